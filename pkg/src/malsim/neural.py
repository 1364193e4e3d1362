"""Fully connected networks with manual backprop and Adam, written on numpy.

Provides the three trainers used by the harness: a binary malware classifier
(sigmoid head), a family classifier (softmax head over the retained
families), and a symmetric autoencoder with an 8-wide linear bottleneck.
Every classifier exposes a designated embedding layer whose activations are
the sample embedding.

All tensors are float64; train mode applies dropout masks and batch
statistics, inference mode uses running statistics and no dropout.
"""

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class NumericOverflowError(Exception):
    def __init__(self, layer_index):
        super().__init__(f"non-finite activation after layer {layer_index}")
        self.layer_index = layer_index


class TrainingError(Exception):
    pass


class NeuralConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# layers


class Dense:
    kind = "dense"

    def __init__(self, in_dim, out_dim, rng):
        # He-style init suits the ReLU stacks used everywhere here
        self.W = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, out_dim))
        self.b = np.zeros(out_dim)
        self.grads = {}
        self._x = None

    def params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x, train, rng):
        self._x = x if train else None
        return x @ self.W + self.b

    def backward(self, dout):
        self.grads = {"W": self._x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ self.W.T

    def spec(self):
        return {"kind": "dense", "in_dim": self.W.shape[0], "out_dim": self.W.shape[1]}


class BatchNorm:
    kind = "batchnorm"

    def __init__(self, width, epsilon=1e-5, momentum=0.9):
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.epsilon = epsilon
        self.momentum = momentum
        self.grads = {}
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, train, rng):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mu) * inv_std
        if train:
            self._cache = (xhat, inv_std)
        return self.gamma * xhat + self.beta

    def backward(self, dout):
        xhat, inv_std = self._cache
        n = dout.shape[0]
        self.grads = {"gamma": (dout * xhat).sum(axis=0), "beta": dout.sum(axis=0)}
        dxhat = dout * self.gamma
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    def spec(self):
        return {"kind": "batchnorm", "width": self.gamma.size,
                "epsilon": self.epsilon, "momentum": self.momentum}


class ReLU:
    kind = "relu"

    def __init__(self):
        self.grads = {}
        self._mask = None

    def params(self):
        return {}

    def forward(self, x, train, rng):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout):
        return dout * self._mask

    def spec(self):
        return {"kind": "relu"}


class Dropout:
    kind = "dropout"

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise NeuralConfigError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.grads = {}
        self._mask = None

    def params(self):
        return {}

    def forward(self, x, train, rng):
        if not train or self.rate == 0.0:
            return x
        # inverted scaling: inference needs no rescaling
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask

    def spec(self):
        return {"kind": "dropout", "rate": self.rate}


class Sigmoid:
    kind = "sigmoid"

    def __init__(self):
        self.grads = {}
        self._y = None

    def params(self):
        return {}

    def forward(self, x, train, rng):
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, dout):
        return dout * self._y * (1.0 - self._y)

    def spec(self):
        return {"kind": "sigmoid"}


class Softmax:
    kind = "softmax"

    def __init__(self):
        self.grads = {}
        self._y = None

    def params(self):
        return {}

    def forward(self, x, train, rng):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._y = e / e.sum(axis=1, keepdims=True)
        return self._y

    def backward(self, dout):
        y = self._y
        return y * (dout - (dout * y).sum(axis=1, keepdims=True))

    def spec(self):
        return {"kind": "softmax"}


_LAYER_KINDS = {cls.kind: cls for cls in (Dense, BatchNorm, ReLU, Dropout, Sigmoid, Softmax)}


# ---------------------------------------------------------------------------
# model


class NeuralModel:
    def __init__(self, layers, embedding_layer_index):
        self.layers = layers
        self.embedding_layer_index = embedding_layer_index

    def forward(self, x, train=False, rng=None, upto=None):
        """Run layers 0..upto (inclusive; None = all). Raises on non-finite."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        last = len(self.layers) - 1 if upto is None else upto
        for i, layer in enumerate(self.layers[: last + 1]):
            x = layer.forward(x, train, rng)
            if not np.all(np.isfinite(x)):
                raise NumericOverflowError(i)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self):
        """Ordered (key, array) pairs over all trainable tensors."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield (i, name), arr

    def gradients(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params():
                yield (i, name), layer.grads[name]

    def snapshot(self):
        return copy.deepcopy([layer.params() for layer in self.layers]), [
            (lay.running_mean.copy(), lay.running_var.copy())
            for lay in self.layers if isinstance(lay, BatchNorm)
        ]

    def restore(self, snap):
        params, bn_stats = snap
        for layer, saved in zip(self.layers, params):
            for name, arr in saved.items():
                layer.params()[name][...] = arr
        bns = [lay for lay in self.layers if isinstance(lay, BatchNorm)]
        for lay, (rm, rv) in zip(bns, bn_stats):
            lay.running_mean[...] = rm
            lay.running_var[...] = rv


def extract_embedding(model: NeuralModel, x) -> np.ndarray:
    """Inference-mode activations at the designated embedding layer."""
    return model.forward(x, train=False, upto=model.embedding_layer_index)


# ---------------------------------------------------------------------------
# architectures


def build_binary_classifier(input_dim, seed, widths=(512, 256, 128),
                            embedding_dim=128, dropout_rate=0.3) -> NeuralModel:
    rng = np.random.default_rng(seed)
    layers = []
    d = input_dim
    for w in widths:
        layers += [Dense(d, w, rng), BatchNorm(w), ReLU(), Dropout(dropout_rate)]
        d = w
    layers.append(Dense(d, embedding_dim, rng))
    embed_idx = len(layers) - 1
    layers += [Dense(embedding_dim, 1, rng), Sigmoid()]
    return NeuralModel(layers, embed_idx)


def build_family_classifier(input_dim, n_classes, seed, widths=(512, 256, 128),
                            embedding_dim=128, dropout_rate=0.3) -> NeuralModel:
    rng = np.random.default_rng(seed)
    layers = []
    d = input_dim
    for w in widths:
        layers += [Dense(d, w, rng), BatchNorm(w), ReLU(), Dropout(dropout_rate)]
        d = w
    layers.append(Dense(d, embedding_dim, rng))
    embed_idx = len(layers) - 1
    layers += [Dense(embedding_dim, n_classes, rng), Softmax()]
    return NeuralModel(layers, embed_idx)


@dataclass
class AutoencoderPair:
    encoder: NeuralModel
    decoder: NeuralModel

    def reconstruct(self, x, train=False, rng=None):
        return self.decoder.forward(self.encoder.forward(x, train, rng), train, rng)


def build_autoencoder(input_dim, seed, hidden=(256, 64), bottleneck=8) -> AutoencoderPair:
    """Symmetric AE: hidden widths mirror around a linear bottleneck; the
    output layer is linear to suit MSE on z-scored inputs."""
    rng = np.random.default_rng(seed)
    enc = []
    d = input_dim
    for w in hidden:
        enc += [Dense(d, w, rng), ReLU()]
        d = w
    enc.append(Dense(d, bottleneck, rng))
    encoder = NeuralModel(enc, len(enc) - 1)
    dec = []
    d = bottleneck
    for w in reversed(hidden):
        dec += [Dense(d, w, rng), ReLU()]
        d = w
    dec.append(Dense(d, input_dim, rng))
    decoder = NeuralModel(dec, len(dec) - 1)
    return AutoencoderPair(encoder, decoder)


# ---------------------------------------------------------------------------
# losses: each returns (scalar loss, gradient wrt the model output)

_CLIP = 1e-12


def bce_loss(p, y, sample_weights=None):
    p = np.clip(p, _CLIP, 1.0 - _CLIP)
    y = y.reshape(p.shape).astype(np.float64)
    w = np.ones_like(p) if sample_weights is None else sample_weights.reshape(p.shape)
    n = p.shape[0]
    loss = float((w * -(y * np.log(p) + (1 - y) * np.log(1 - p))).sum() / n)
    dp = w * (p - y) / (p * (1.0 - p)) / n
    return loss, dp


def categorical_ce_loss(P, y, sample_weights=None):
    P = np.clip(P, _CLIP, 1.0)
    n = P.shape[0]
    w = np.ones(n) if sample_weights is None else sample_weights
    picked = P[np.arange(n), y]
    loss = float((w * -np.log(picked)).sum() / n)
    dP = np.zeros_like(P)
    dP[np.arange(n), y] = -w / picked / n
    return loss, dP


def mse_loss(x_hat, x):
    """Mean over the batch of the squared reconstruction error norm."""
    n = x.shape[0]
    diff = x_hat - x
    loss = float((diff * diff).sum() / n)
    return loss, 2.0 * diff / n


_LOSSES = {"bce": bce_loss, "categorical_ce": categorical_ce_loss, "mse": mse_loss}


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment buffers and shared timestep over a parameter set."""

    def __init__(self, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params}
        self.v = {k: np.zeros_like(v) for k, v in params}
        self.t = 0
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon


def adam_step(params, grads, state: AdamState, lr=0.001):
    """One standard bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for (key, p), (_, g) in zip(params, grads):
        m = state.m[key] = b1 * state.m[key] + (1 - b1) * g
        v = state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    loss: str = "bce"
    class_weights: np.ndarray | None = None
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise NeuralConfigError("learning_rate must be positive")
        if self.patience < 1:
            raise NeuralConfigError("patience must be >= 1")


@dataclass
class History:
    epochs: list = field(default_factory=list)


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_classifier(X, y, config: TrainConfig, n_classes: int | None = None,
                     model: NeuralModel | None = None):
    """Train a binary (bce) or family (categorical_ce) classifier.

    A validation subset is carved from the training rows for early stopping;
    the parameters with minimum validation loss are restored at the end.
    Returns (model, history); history rows carry per-epoch train/val loss and
    accuracy, plus AUC/precision/recall for the binary head.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(config.seed)
    binary = config.loss == "bce"
    if model is None:
        if binary:
            model = build_binary_classifier(X.shape[1], seed=config.seed)
        else:
            if n_classes is None:
                n_classes = int(y.max()) + 1
            model = build_family_classifier(X.shape[1], n_classes, seed=config.seed)
    loss_fn = _LOSSES[config.loss]

    n_val = max(1, int(round(config.val_fraction * X.shape[0])))
    perm = rng.permutation(X.shape[0])
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if tr_idx.size == 0:
        raise TrainingError("no training rows left after validation carve")
    Xtr, ytr = X[tr_idx], y[tr_idx]
    Xval, yval = X[val_idx], y[val_idx]

    params = list(model.parameters())
    adam = AdamState(params)
    history = History()
    best = (np.inf, None)
    bad_epochs = 0
    for epoch in range(config.max_epochs):
        for batch in _epoch_batches(Xtr.shape[0], config.batch_size, rng):
            out = model.forward(Xtr[batch], train=True, rng=rng)
            sw = None
            if config.class_weights is not None:
                sw = config.class_weights[ytr[batch]]
            loss, dout = loss_fn(out, ytr[batch], sw)
            if not np.isfinite(loss):
                raise TrainingError(f"training loss diverged at epoch {epoch}")
            model.backward(dout)
            adam_step(params, list(model.gradients()), adam, config.learning_rate)
        row = _eval_epoch(model, Xtr, ytr, Xval, yval, loss_fn, config, binary)
        row["epoch"] = epoch
        history.epochs.append(row)
        if not np.isfinite(row["val_loss"]):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        if row["val_loss"] < best[0]:
            best = (row["val_loss"], model.snapshot())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    if best[1] is not None:
        model.restore(best[1])
    return model, history


def _eval_epoch(model, Xtr, ytr, Xval, yval, loss_fn, config, binary):
    from . import eval_metrics

    out_tr = model.forward(Xtr, train=False)
    out_val = model.forward(Xval, train=False)
    sw_tr = sw_val = None
    if config.class_weights is not None:
        sw_tr = config.class_weights[ytr]
        sw_val = config.class_weights[yval]
    row = {
        "train_loss": loss_fn(out_tr, ytr, sw_tr)[0],
        "val_loss": loss_fn(out_val, yval, sw_val)[0],
    }
    if binary:
        pred = (out_val[:, 0] >= 0.5).astype(np.int64)
        row["val_accuracy"] = float((pred == yval).mean())
        tp = int(((pred == 1) & (yval == 1)).sum())
        fp = int(((pred == 1) & (yval == 0)).sum())
        fn = int(((pred == 0) & (yval == 1)).sum())
        row["val_precision"] = tp / (tp + fp) if tp + fp else 0.0
        row["val_recall"] = tp / (tp + fn) if tp + fn else 0.0
        if len(np.unique(yval)) == 2:
            row["val_auc"] = eval_metrics.binary_auc(yval, out_val[:, 0])
    else:
        row["val_accuracy"] = float((out_val.argmax(axis=1) == yval).mean())
    return row


def train_autoencoder(X, config: TrainConfig, fraction: float = 0.25,
                      epochs: int | None = None,
                      pair: AutoencoderPair | None = None):
    """Fit the autoencoder on a seeded `fraction` of the rows, MSE objective.

    Fixed-epoch training (no early stopping); returns (pair, loss_per_epoch).
    """
    X = np.asarray(X, dtype=np.float64)
    if fraction <= 0 or fraction > 1:
        raise NeuralConfigError("training fraction must be in (0, 1]")
    rng = np.random.default_rng(config.seed)
    n_use = max(1, int(round(fraction * X.shape[0])))
    use = rng.permutation(X.shape[0])[:n_use]
    Xtr = X[use]
    if pair is None:
        pair = build_autoencoder(X.shape[1], seed=config.seed)
    params = list(pair.encoder.parameters())
    dec_params = [((len(pair.encoder.layers) + i, name), arr)
                  for (i, name), arr in pair.decoder.parameters()]
    all_params = params + dec_params
    adam = AdamState(all_params)
    losses = []
    for epoch in range(epochs if epochs is not None else config.max_epochs):
        epoch_loss = 0.0
        n_batches = 0
        for batch in _epoch_batches(Xtr.shape[0], config.batch_size, rng):
            xb = Xtr[batch]
            z = pair.encoder.forward(xb, train=True, rng=rng)
            xh = pair.decoder.forward(z, train=True, rng=rng)
            loss, dout = mse_loss(xh, xb)
            if not np.isfinite(loss):
                raise TrainingError(f"autoencoder loss diverged at epoch {epoch}")
            dz = pair.decoder.backward(dout)
            pair.encoder.backward(dz)
            grads = list(pair.encoder.gradients()) + [
                ((len(pair.encoder.layers) + i, name), g)
                for (i, name), g in pair.decoder.gradients()
            ]
            adam_step(all_params, grads, adam, config.learning_rate)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return pair, losses


# ---------------------------------------------------------------------------
# serialization: JSON manifest plus a little-endian float64 tensor blob


def _all_tensors(model: NeuralModel):
    for i, layer in enumerate(model.layers):
        for name, arr in layer.params().items():
            yield f"{i}.{name}", arr
        if isinstance(layer, BatchNorm):
            yield f"{i}.running_mean", layer.running_mean
            yield f"{i}.running_var", layer.running_var


def save_model(model: NeuralModel, out_dir, extra: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    offsets = {}
    blobs = []
    pos = 0
    for key, arr in _all_tensors(model):
        flat = np.ascontiguousarray(arr, dtype="<f8")
        offsets[key] = {"offset": pos, "shape": list(arr.shape)}
        blobs.append(flat.tobytes())
        pos += flat.nbytes
    manifest = {
        "layers": [layer.spec() for layer in model.layers],
        "embedding_layer_index": model.embedding_layer_index,
        "tensors": offsets,
        "dtype": "<f8",
    }
    if extra:
        manifest["extra"] = extra
    (out_dir / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out_dir / "tensors.bin").write_bytes(b"".join(blobs))


def load_model(in_dir) -> NeuralModel:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "model.json").read_text())
    blob = (in_dir / "tensors.bin").read_bytes()
    rng = np.random.default_rng(0)  # immediately overwritten below
    layers = []
    for spec in manifest["layers"]:
        kind = spec["kind"]
        if kind == "dense":
            layers.append(Dense(spec["in_dim"], spec["out_dim"], rng))
        elif kind == "batchnorm":
            layers.append(BatchNorm(spec["width"], spec["epsilon"], spec["momentum"]))
        elif kind == "dropout":
            layers.append(Dropout(spec["rate"]))
        else:
            layers.append(_LAYER_KINDS[kind]())
    model = NeuralModel(layers, manifest["embedding_layer_index"])
    for key, info in manifest["tensors"].items():
        i, name = key.split(".", 1)
        layer = model.layers[int(i)]
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=info["offset"]).reshape(shape).copy()
        if name in layer.params():
            layer.params()[name][...] = arr
        else:
            setattr(layer, name, arr)
    return model
