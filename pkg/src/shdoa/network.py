"""Minimal convolutional network with exact backpropagation.

Architecture: a stack of same-padded 2x2 convolutions with ReLU, two ReLU
dense layers, and two independent sigmoid classification heads (elevation
and azimuth) trained jointly with a mean binary cross-entropy over all
head outputs.  Everything is plain NumPy in double precision so analytic
gradients can be checked tightly against finite differences.

Same padding for the even 2x2 kernel pads one row/column at the bottom and
right edge only, which keeps the spatial size unchanged.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import DomainError, FeatureError, ModelIOError

BCE_EPS = 1e-7
MODEL_MAGIC = b"MCNN"
MODEL_VERSION = 1


@dataclass
class PredictionScores:
    """Per-bin class probabilities from both heads, each strictly in (0, 1)."""

    p_theta: np.ndarray
    p_phi: np.ndarray


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 30
    optimizer: str = "adam"
    seed: int = 0
    loss: str = "bce"
    val_fraction: float = 0.1
    max_per_class: int | None = None
    precision: str = "float64"

    def __post_init__(self):
        if self.optimizer == "adaptive-moment":
            self.optimizer = "adam"
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "bce":
            raise DomainError("only binary cross-entropy is supported")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise DomainError("hyperparameters must be positive")
        if self.precision not in ("float64", "float32"):
            raise DomainError(f"precision must be float64 or float32, got {self.precision!r}")


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(pred: PredictionScores | tuple, target: tuple) -> float:
    """Mean binary cross-entropy over every output of both heads.

    Probabilities are clamped to [eps, 1-eps] so perfect misses stay finite.
    """
    if isinstance(pred, PredictionScores):
        p = np.concatenate([np.atleast_2d(pred.p_theta), np.atleast_2d(pred.p_phi)], axis=1)
    else:
        p = np.concatenate([np.atleast_2d(pred[0]), np.atleast_2d(pred[1])], axis=1)
    y = np.concatenate([np.atleast_2d(target[0]), np.atleast_2d(target[1])], axis=1)
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


class Conv2D:
    """Same-padded convolution with stride 1 (pad at bottom/right edges)."""

    def __init__(self, in_channels, filters, kernel=2, rng=None, dtype=np.float64):
        self.kernel = kernel
        self.in_channels = in_channels
        self.filters = filters
        fan_in = kernel * kernel * in_channels
        limit = np.sqrt(6.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, size=(fan_in, filters)).astype(dtype)
        self.b = np.zeros(filters, dtype=dtype)
        self._patches = None

    def _im2col(self, xp, height, width):
        cols = [
            xp[:, di : di + height, dj : dj + width, :]
            for di in range(self.kernel)
            for dj in range(self.kernel)
        ]
        return np.concatenate(cols, axis=3)

    def forward(self, x, train=False):
        b, h, w, _ = x.shape
        pad = self.kernel - 1
        xp = np.pad(x, ((0, 0), (0, pad), (0, pad), (0, 0)))
        patches = self._im2col(xp, h, w)
        if train:
            self._patches = patches
            self._shape = x.shape
        return patches @ self.w + self.b

    def backward(self, dout):
        b, h, w, _ = self._shape
        pad = self.kernel - 1
        flat = dout.reshape(-1, self.filters)
        self.dw = self._patches.reshape(-1, self.w.shape[0]).T @ flat
        self.db = flat.sum(axis=0)
        dpatches = dout @ self.w.T
        dxp = np.zeros((b, h + pad, w + pad, self.in_channels), dtype=self.w.dtype)
        c = self.in_channels
        block = 0
        for di in range(self.kernel):
            for dj in range(self.kernel):
                dxp[:, di : di + h, dj : dj + w, :] += dpatches[..., block * c : (block + 1) * c]
                block += 1
        return dxp[:, :h, :w, :]

    def params(self):
        return [("w", self), ("b", self)]


class Dense:
    def __init__(self, in_dim, out_dim, rng=None, init="he", dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        if init == "he":
            limit = np.sqrt(6.0 / in_dim)
        else:  # xavier, used for the heads
            limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.w = rng.uniform(-limit, limit, size=(in_dim, out_dim)).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self._x = None

    def forward(self, x, train=False):
        if train:
            self._x = x
        return x @ self.w + self.b

    def backward(self, dout):
        self.dw = self._x.T @ dout
        self.db = dout.sum(axis=0)
        return dout @ self.w.T


class ReLU:
    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout):
        return dout * self._mask


class ModalCNN:
    """The two-headed convolutional classifier on (side, side, channels) tensors."""

    def __init__(self, input_side=4, in_channels=2, n_theta=1, n_phi=36,
                 conv_layers=8, filters=64, kernel=2, dense_layers=2,
                 dense_width=512, seed=0, dtype=np.float64):
        if min(n_theta, n_phi) < 1:
            raise DomainError("each head needs at least one class")
        self.input_side = input_side
        self.in_channels = in_channels
        self.n_theta = n_theta
        self.n_phi = n_phi
        self.conv_layers = conv_layers
        self.filters = filters
        self.kernel = kernel
        self.dense_layers = dense_layers
        self.dense_width = dense_width
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        self.convs = []
        c_in = in_channels
        for _ in range(conv_layers):
            self.convs.append(Conv2D(c_in, filters, kernel, rng, dtype=self.dtype))
            self.convs.append(ReLU())
            c_in = filters
        flat_dim = input_side * input_side * c_in
        self.denses = []
        d_in = flat_dim
        for _ in range(dense_layers):
            self.denses.append(Dense(d_in, dense_width, rng, init="he", dtype=self.dtype))
            self.denses.append(ReLU())
            d_in = dense_width
        self.head_theta = Dense(d_in, n_theta, rng, init="xavier", dtype=self.dtype)
        self.head_phi = Dense(d_in, n_phi, rng, init="xavier", dtype=self.dtype)

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        expected = (self.input_side, self.input_side, self.in_channels)
        if x.shape[1:] != expected:
            raise DomainError(f"input shape {x.shape[1:]} does not match model {expected}")
        return x

    def forward(self, x, train=False):
        """Probabilities for a batch: ((B, n_theta), (B, n_phi))."""
        x = self._check_input(x)
        h = x
        for layer in self.convs:
            h = layer.forward(h, train)
        h = h.reshape(h.shape[0], -1)
        for layer in self.denses:
            h = layer.forward(h, train)
        if train:
            self._trunk_shape = h.shape
        zt = self.head_theta.forward(h, train)
        zp = self.head_phi.forward(h, train)
        return sigmoid(zt), sigmoid(zp)

    def predict_scores(self, x) -> PredictionScores:
        pt, pp = self.forward(x)
        return PredictionScores(p_theta=pt[0], p_phi=pp[0])

    def loss_and_grads(self, x, y_theta, y_phi):
        """Mean BCE over both heads and exact gradients for every parameter."""
        x = self._check_input(x)
        y_theta = np.atleast_2d(np.asarray(y_theta, dtype=self.dtype))
        y_phi = np.atleast_2d(np.asarray(y_phi, dtype=self.dtype))
        pt, pp = self.forward(x, train=True)
        loss = bce_loss((pt, pp), (y_theta, y_phi))

        batch = x.shape[0]
        total_outputs = self.n_theta + self.n_phi
        # clamp-aware derivative of mean BCE through the sigmoid
        scale = 1.0 / (batch * total_outputs)
        dz_t = self._bce_sigmoid_grad(pt, y_theta) * scale
        dz_p = self._bce_sigmoid_grad(pp, y_phi) * scale
        dh = self.head_theta.backward(dz_t) + self.head_phi.backward(dz_p)
        for layer in reversed(self.denses):
            dh = layer.backward(dh)
        dh = dh.reshape(batch, self.input_side, self.input_side, self.filters)
        for layer in reversed(self.convs):
            dh = layer.backward(dh)
        return loss, self.gradients()

    @staticmethod
    def _bce_sigmoid_grad(p, y):
        # d(mean BCE)/dz = p - y for unclamped outputs; clamped outputs have
        # zero gradient w.r.t. p, hence zero through the chain as well
        inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
        return (p - y) * inside

    # -- parameter access ---------------------------------------------------

    def _param_layers(self):
        layers = [l for l in self.convs if isinstance(l, Conv2D)]
        layers += [l for l in self.denses if isinstance(l, Dense)]
        layers += [self.head_theta, self.head_phi]
        return layers

    def parameters(self) -> list[np.ndarray]:
        """All weight/bias arrays in document order (convs, denses, heads)."""
        out = []
        for layer in self._param_layers():
            out.extend([layer.w, layer.b])
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self._param_layers():
            out.extend([layer.dw, layer.db])
        return out

    def set_parameters(self, values) -> None:
        for current, new in zip(self.parameters(), values):
            current[...] = new

    def architecture(self) -> dict:
        return {
            "input_side": self.input_side,
            "in_channels": self.in_channels,
            "n_theta": self.n_theta,
            "n_phi": self.n_phi,
            "conv_layers": self.conv_layers,
            "filters": self.filters,
            "kernel": self.kernel,
            "dense_layers": self.dense_layers,
            "dense_width": self.dense_width,
        }


# -- optimizers --------------------------------------------------------------


class SGD:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# -- training ----------------------------------------------------------------


def one_hot(labels, n_classes, dtype=np.float64):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _subsample_per_class(rng, labels_theta, labels_phi, cap):
    keys = labels_theta.astype(np.int64) * 100000 + labels_phi.astype(np.int64)
    keep = []
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        if idx.size > cap:
            idx = rng.choice(idx, size=cap, replace=False)
        keep.append(idx)
    return np.sort(np.concatenate(keep))


def train_network(net: ModalCNN, x, labels_theta, labels_phi, cfg: TrainConfig):
    """Mini-batch training of both heads; returns per-epoch log rows.

    A held-out validation split tracks loss; the best-validation weights are
    restored at the end.  Fully deterministic for a fixed config and data.
    """
    x = np.asarray(x, dtype=net.dtype)
    labels_theta = np.asarray(labels_theta, dtype=int)
    labels_phi = np.asarray(labels_phi, dtype=int)
    if len(x) == 0:
        raise FeatureError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)

    if cfg.max_per_class is not None:
        keep = _subsample_per_class(rng, labels_theta, labels_phi, cfg.max_per_class)
        x, labels_theta, labels_phi = x[keep], labels_theta[keep], labels_phi[keep]

    y_theta = one_hot(labels_theta, net.n_theta, dtype=net.dtype)
    y_phi = one_hot(labels_phi, net.n_phi, dtype=net.dtype)
    n = len(x)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n)) if n > 10 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    optimizer = (Adam if cfg.optimizer == "adam" else SGD)(net.parameters(), cfg.learning_rate)
    log = []
    best_val = np.inf
    best_params = [p.copy() for p in net.parameters()]
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        running, seen = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = net.loss_and_grads(x[batch], y_theta[batch], y_phi[batch])
            optimizer.step(grads)
            running += loss * batch.size
            seen += batch.size
        train_loss = running / max(seen, 1)
        if n_val:
            val_loss, acc_t, acc_p = evaluate_network(
                net, x[val_idx], labels_theta[val_idx], labels_phi[val_idx]
            )
        else:
            val_loss, acc_t, acc_p = train_loss, np.nan, np.nan
        log.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
             "val_acc_theta": acc_t, "val_acc_phi": acc_p}
        )
        if val_loss <= best_val:
            best_val = val_loss
            best_params = [p.copy() for p in net.parameters()]
    net.set_parameters(best_params)
    return log


def evaluate_network(net, x, labels_theta, labels_phi, chunk=4096):
    """(mean loss, theta accuracy, phi accuracy) without touching weights."""
    losses = []
    hits_t = hits_p = 0
    y_theta = one_hot(labels_theta, net.n_theta, dtype=net.dtype)
    y_phi = one_hot(labels_phi, net.n_phi, dtype=net.dtype)
    for start in range(0, len(x), chunk):
        sl = slice(start, start + chunk)
        pt, pp = net.forward(x[sl])
        losses.append(bce_loss((pt, pp), (y_theta[sl], y_phi[sl])) * (pt.shape[0]))
        hits_t += int(np.sum(np.argmax(pt, axis=1) == labels_theta[sl]))
        hits_p += int(np.sum(np.argmax(pp, axis=1) == labels_phi[sl]))
    n = len(x)
    return sum(losses) / n, hits_t / n, hits_p / n


def forward_in_chunks(net, x, chunk=4096):
    """Batched inference for large blocks; returns (P_theta, P_phi)."""
    pts, pps = [], []
    for start in range(0, len(x), chunk):
        pt, pp = net.forward(x[start : start + chunk])
        pts.append(pt)
        pps.append(pp)
    return np.concatenate(pts), np.concatenate(pps)


def write_training_log(log, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc_theta", "val_acc_phi"])
        for row in log:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]),
                             repr(row["val_acc_theta"]), repr(row["val_acc_phi"])])


# -- serialization ------------------------------------------------------------

_ARCH_FIELDS = ("input_side", "in_channels", "n_theta", "n_phi", "conv_layers",
                "filters", "kernel", "dense_layers", "dense_width")


def save_model(net: ModalCNN, path) -> None:
    """Versioned binary: magic, version, architecture, float64 weights in order."""
    arch = net.architecture()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_VERSION))
        fh.write(struct.pack("<" + "H" * len(_ARCH_FIELDS), *(arch[f] for f in _ARCH_FIELDS)))
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path, expect_classes: tuple[int, int] | None = None) -> ModalCNN:
    """Load a model file; verifies magic, version, and exact payload size."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise ModelIOError(f"{path} is not a model file (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != MODEL_VERSION:
        raise ModelIOError(f"unsupported model version {version}")
    header = struct.unpack_from("<" + "H" * len(_ARCH_FIELDS), raw, 6)
    arch = dict(zip(_ARCH_FIELDS, header))
    if expect_classes is not None and (arch["n_theta"], arch["n_phi"]) != tuple(expect_classes):
        raise ModelIOError(
            f"model has (I, J) = ({arch['n_theta']}, {arch['n_phi']}), "
            f"expected {tuple(expect_classes)}"
        )
    net = ModalCNN(seed=0, **arch)
    offset = 6 + 2 * len(_ARCH_FIELDS)
    params = net.parameters()
    expected = offset + sum(p.size for p in params) * 8
    if len(raw) != expected:
        raise ModelIOError(f"{path} is corrupt: {len(raw)} bytes, expected {expected}")
    for p in params:
        count = p.size
        p[...] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(p.shape)
        offset += count * 8
    return net


# -- scikit-learn facade -------------------------------------------------------


class CoherenceClassifier(BaseEstimator, ClassifierMixin):
    """Estimator-style facade over :class:`ModalCNN`.

    ``fit(X, y)`` takes tensors of shape (n, side, side, 2) and integer
    labels of shape (n, 2) holding (elevation class, azimuth class);
    ``predict_proba`` returns both heads' probabilities.
    """

    def __init__(self, n_theta=None, n_phi=None, conv_layers=8, filters=64,
                 kernel=2, dense_layers=2, dense_width=512, learning_rate=1e-3,
                 batch_size=128, epochs=30, optimizer="adam", val_fraction=0.1,
                 max_per_class=None, seed=0, precision="float64"):
        self.n_theta = n_theta
        self.n_phi = n_phi
        self.conv_layers = conv_layers
        self.filters = filters
        self.kernel = kernel
        self.dense_layers = dense_layers
        self.dense_width = dense_width
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.val_fraction = val_fraction
        self.max_per_class = max_per_class
        self.seed = seed
        self.precision = precision

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        if X.ndim != 4 or y.ndim != 2 or y.shape[1] != 2:
            raise DomainError("expected X of shape (n, s, s, 2) and y of shape (n, 2)")
        n_theta = self.n_theta or int(y[:, 0].max()) + 1
        n_phi = self.n_phi or int(y[:, 1].max()) + 1
        cfg = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, optimizer=self.optimizer, seed=self.seed,
            val_fraction=self.val_fraction, max_per_class=self.max_per_class,
            precision=self.precision,
        )
        self.network_ = ModalCNN(
            input_side=X.shape[1], in_channels=X.shape[3], n_theta=n_theta,
            n_phi=n_phi, conv_layers=self.conv_layers, filters=self.filters,
            kernel=self.kernel, dense_layers=self.dense_layers,
            dense_width=self.dense_width, seed=self.seed, dtype=cfg.precision,
        )
        self.history_ = train_network(self.network_, X, y[:, 0], y[:, 1], cfg)
        return self

    def predict_proba(self, X):
        return forward_in_chunks(self.network_, np.asarray(X, dtype=float))

    def predict(self, X):
        pt, pp = self.predict_proba(X)
        return np.stack([np.argmax(pt, axis=1), np.argmax(pp, axis=1)], axis=1)

    def score(self, X, y):
        pred = self.predict(X)
        y = np.asarray(y, dtype=int)
        return float(np.mean((pred == y).all(axis=1)))
