"""malsim: benchmarking engine for learned malware-similarity embeddings."""

__version__ = "0.1.0"
