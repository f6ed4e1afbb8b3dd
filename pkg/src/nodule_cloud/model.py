"""Point-set classifier in plain numpy.

Architecture: optional EdgeConv layers (kNN graph rebuilt from each layer's
input features), a shared per-point MLP, a channelwise max over points, and a
small head ending in a sigmoid. Everything works on batches shaped
``(B, m, d)``; a single cloud ``(m, d)`` is promoted to ``B = 1``.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment_points, balanced_batches
from .errors import MalformedFile, SingleClassDataset, TooFewPoints
from .fileutil import atomic_write_bytes

PROB_EPS = 1e-7


class FeatureSet(enum.Enum):
    XYZ_HU_P = "xyz-hu-p"
    XYZ_P = "xyz-p"
    XYZ_HU = "xyz-hu"
    XYZ = "xyz"
    HU_P = "hu-p"

    @property
    def columns(self) -> tuple[int, ...]:
        return _FEATURE_COLUMNS[self]

    @property
    def input_dim(self) -> int:
        return len(self.columns)

    @property
    def has_xyz(self) -> bool:
        return 0 in self.columns


_FEATURE_COLUMNS = {
    FeatureSet.XYZ_HU_P: (0, 1, 2, 3, 4),
    FeatureSet.XYZ_P: (0, 1, 2, 4),
    FeatureSet.XYZ_HU: (0, 1, 2, 3),
    FeatureSet.XYZ: (0, 1, 2),
    FeatureSet.HU_P: (3, 4),
}


def select_features(points: np.ndarray, fs: FeatureSet) -> np.ndarray:
    """Restrict ``(..., 5)`` point features (x, y, z, hu, p) to ``fs``'s columns."""
    return np.asarray(points)[..., list(fs.columns)]


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    widths: tuple = (64, 128, 256)
    head: int = 64
    edge_widths: tuple = ()
    k: int = 10


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {n: a.copy() for n, a in self.params.items()})

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {n: a.astype(dtype) for n, a in self.params.items()})


def layer_shapes(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    shapes, c = [], cfg.input_dim
    for i, o in enumerate(cfg.edge_widths):
        shapes.append((f"edge{i}", 2 * c, o))
        c = o
    for i, o in enumerate(cfg.widths):
        shapes.append((f"mlp{i}", c, o))
        c = o
    shapes.append(("head0", c, cfg.head))
    shapes.append(("head1", cfg.head, 1))
    return shapes


def init_weights(cfg: ModelConfig, rng, dtype=np.float32) -> ModelWeights:
    params = {}
    for name, fan_in, fan_out in layer_shapes(cfg):
        params[f"{name}.W"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)).astype(dtype)
        params[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)
    return ModelWeights(cfg, params)


def zeros_like(w: ModelWeights) -> dict:
    return {n: np.zeros_like(a) for n, a in w.params.items()}


# -- EdgeConv ------------------------------------------------------------------


def knn_indices(features: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbours (self excluded, ties to the lowest index).

    ``features`` is ``(B, m, c)``; returns ``(B, m, k)`` int indices.
    """
    B, m, _ = features.shape
    if m < k + 1:
        raise TooFewPoints(f"kNN with k={k} needs at least {k + 1} points, got {m}")
    f = features.astype(np.float64)
    sq = np.einsum("bmc,bmc->bm", f, f)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * (f @ f.transpose(0, 2, 1))
    np.maximum(d2, 0.0, out=d2)
    d2[:, np.arange(m), np.arange(m)] = np.inf
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


def _edge_forward(F, W, b, k):
    c = F.shape[-1]
    idx = knn_indices(F, k)
    Wa = W[:c] - W[c:]
    Wb = W[c:]
    P = F @ Wa
    Q = F @ Wb
    B = F.shape[0]
    Qg = Q[np.arange(B)[:, None, None], idx]
    Z = P[:, :, None, :] + Qg + b
    amax = Z.argmax(axis=2)
    zmax = np.take_along_axis(Z, amax[:, :, None, :], axis=2)[:, :, 0, :]
    out = np.maximum(zmax, 0.0)
    return out, (F, idx, amax, zmax, Wa, Wb)


def _edge_backward(dout, cache):
    F, idx, amax, zmax, Wa, Wb = cache
    B, m, o = dout.shape
    dz = dout * (zmax > 0)
    nbr = np.take_along_axis(idx, amax, axis=2)  # (B, m, o): winning neighbour per channel
    flat = ((np.arange(B)[:, None, None] * m + nbr) * o + np.arange(o)).ravel()
    dQ = np.bincount(flat, weights=dz.ravel().astype(np.float64), minlength=B * m * o)
    dQ = dQ.reshape(B, m, o).astype(dz.dtype)
    dP = dz
    Ff = F.reshape(-1, F.shape[-1])
    dWa = Ff.T @ dP.reshape(-1, o)
    dWb = Ff.T @ dQ.reshape(-1, o)
    dW = np.concatenate([dWa, dWb - dWa], axis=0)
    db = dz.sum(axis=(0, 1))
    dF = dP @ Wa.T + dQ @ Wb.T
    return dF, dW, db


def edgeconv_layer(features, params, k: int) -> np.ndarray:
    """One EdgeConv layer: per-edge MLP on ``[f_i, f_j - f_i]`` then max over
    the k neighbours found in the current feature space."""
    W, b = params
    F = np.asarray(features)
    single = F.ndim == 2
    out, _ = _edge_forward(F[None] if single else F, W, b, k)
    return out[0] if single else out


# -- forward / backward --------------------------------------------------------


def _batched(features):
    F = np.asarray(features)
    return (F[None], True) if F.ndim == 2 else (F, False)


def forward_logits(features, w: ModelWeights, keep_cache: bool = False):
    F, _ = _batched(features)
    F = F.astype(w.dtype, copy=False)
    cfg, p = w.config, w.params
    caches = []
    h = F
    for i in range(len(cfg.edge_widths)):
        h, cache = _edge_forward(h, p[f"edge{i}.W"], p[f"edge{i}.b"], cfg.k)
        caches.append(("edge", i, cache))
    for i in range(len(cfg.widths)):
        z = h @ p[f"mlp{i}.W"] + p[f"mlp{i}.b"]
        caches.append(("mlp", i, (h, z)))
        h = np.maximum(z, 0.0)
    arg = h.argmax(axis=1)  # (B, C); first occurrence wins ties
    pooled = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
    z0 = pooled @ p["head0.W"] + p["head0.b"]
    a0 = np.maximum(z0, 0.0)
    logit = (a0 @ p["head1.W"] + p["head1.b"])[:, 0]
    if not keep_cache:
        return logit
    return logit, (caches, h.shape, arg, pooled, z0, a0)


_P_LO = np.finfo(np.float64).tiny
_P_HI = np.nextafter(1.0, 0.0)


def sigmoid(z):
    """Logistic function kept strictly inside (0, 1) even for saturated logits."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(p, _P_LO, _P_HI)


def forward(features, w: ModelWeights):
    """Probability per cloud; a scalar for a single ``(m, d)`` input."""
    F, single = _batched(features)
    prob = sigmoid(forward_logits(F, w))
    return float(prob[0]) if single else prob


def loss(prob, label):
    """Binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(label, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


def backward(features, labels, w: ModelWeights):
    """Mean batch loss and its exact gradients w.r.t. every parameter."""
    F, _ = _batched(features)
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    logit, (caches, hshape, arg, pooled, z0, a0) = forward_logits(F, w, keep_cache=True)
    prob = sigmoid(logit)
    B = len(y)
    inside = (prob > PROB_EPS) & (prob < 1.0 - PROB_EPS)
    dlogit = ((prob - y) * inside / B).astype(w.dtype)[:, None]
    p, g = w.params, {}
    g["head1.W"] = a0.T @ dlogit
    g["head1.b"] = dlogit.sum(axis=0)
    dz0 = (dlogit @ p["head1.W"].T) * (z0 > 0)
    g["head0.W"] = pooled.T @ dz0
    g["head0.b"] = dz0.sum(axis=0)
    dpool = dz0 @ p["head0.W"].T
    dh = np.zeros(hshape, dtype=dpool.dtype)
    np.put_along_axis(dh, arg[:, None, :], dpool[:, None, :], axis=1)
    for kind, i, cache in reversed(caches):
        if kind == "mlp":
            h_in, z = cache
            dz = dh * (z > 0)
            g[f"mlp{i}.W"] = h_in.reshape(-1, h_in.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            g[f"mlp{i}.b"] = dz.sum(axis=(0, 1))
            dh = dz @ p[f"mlp{i}.W"].T
        else:
            dh, g[f"edge{i}.W"], g[f"edge{i}.b"] = _edge_backward(dh, cache)
    total = float(np.mean(loss(prob, y)))
    return total, g


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    epochs: int = 70
    batch_size: int = 32
    steps_per_epoch: int | None = None
    seed: int = 0
    feature_set: FeatureSet = FeatureSet.XYZ_HU_P
    use_edgeconv: bool = False
    k_neighbors: int = 10
    widths: tuple = (64, 128, 256)
    head: int = 64
    edge_widths: tuple = (64, 64)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = False
    augment_cfg: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if isinstance(self.feature_set, str):
            object.__setattr__(self, "feature_set", FeatureSet(self.feature_set))

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_dim=self.feature_set.input_dim, widths=tuple(self.widths), head=self.head,
            edge_widths=tuple(self.edge_widths) if self.use_edgeconv else (), k=self.k_neighbors,
        )


def learning_rate(lr0: float, epoch: int) -> float:
    """Halved every 10 epochs."""
    return lr0 * 0.5 ** (epoch // 10)


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(a) for n, a in params.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in sorted(params):
            g = grads[n]
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            step = lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            params[n] -= step.astype(params[n].dtype)


def predict(clouds: np.ndarray, w: ModelWeights, fs: FeatureSet, batch: int = 64) -> np.ndarray:
    """Probabilities for ``(N, m, 5)`` full-feature clouds."""
    X = select_features(clouds, fs)
    out = [sigmoid(forward_logits(X[i:i + batch], w)) for i in range(0, len(X), batch)]
    return np.concatenate(out) if out else np.empty(0)


@dataclass
class TrainResult:
    weights: ModelWeights
    log: list
    best_epoch: int


def train(clouds: np.ndarray, labels, cfg: TrainConfig, rng=None, val=None) -> TrainResult:
    """Adam on mean BCE over class-balanced batches.

    ``clouds`` is ``(N, m, 5)`` with columns x, y, z, hu, p. ``val`` is an
    optional ``(val_clouds, scorer)`` pair where ``scorer(probs)`` returns the
    mean sensitivity; the best-scoring epoch's weights are returned (later
    epochs win ties). Without ``val`` the final weights are returned.
    """
    labels = np.asarray(labels).astype(int)
    if len(np.unique(labels)) < 2:
        raise SingleClassDataset("training needs positive and negative samples")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    fs = cfg.feature_set
    w = init_weights(cfg.model_config(), rng)
    opt = Adam(w.params, cfg.beta1, cfg.beta2, cfg.eps)
    batches = balanced_batches(labels, cfg.batch_size, rng)
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(labels) / cfg.batch_size))
    augment = cfg.augment and fs.has_xyz
    log, best, best_score, best_epoch = [], None, -np.inf, cfg.epochs - 1
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg.lr0, epoch)
        losses = []
        for _ in range(steps):
            idx = next(batches)
            pts = clouds[idx]
            if augment:
                pts = np.stack([augment_points(c, cfg.augment_cfg, rng) for c in pts])
            value, grads = backward(select_features(pts, fs), labels[idx], w)
            opt.step(w.params, grads, lr)
            losses.append(value)
        score = float("nan")
        if val is not None:
            val_clouds, scorer = val
            score = float(scorer(predict(val_clouds, w, fs)))
            if score >= best_score:
                best, best_score, best_epoch = w.copy(), score, epoch
        log.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                    "val_mean_sens": score})
    return TrainResult(best if best is not None else w, log, best_epoch)


def log_to_csv(log) -> str:
    lines = ["epoch,lr,train_loss,val_mean_sens"]
    for row in log:
        lines.append(f"{row['epoch']},{row['lr']!r},{row['train_loss']!r},{row['val_mean_sens']!r}")
    return "\n".join(lines) + "\n"


# -- NWTS ----------------------------------------------------------------------

NWTS_MAGIC = b"NWTS1"


def encode_weights(w: ModelWeights) -> bytes:
    arrays = dict(w.params)
    arrays["config.k"] = np.array([w.config.k], dtype=np.float32)
    names = sorted(arrays)
    head = [NWTS_MAGIC, struct.pack("<I", len(names))]
    for n in names:
        a = arrays[n]
        raw = n.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        head.append(struct.pack(f"<{a.ndim}I", *a.shape))
    payload = [np.ascontiguousarray(arrays[n], dtype="<f4").tobytes() for n in names]
    return b"".join(head + payload)


def decode_weights(buf: bytes) -> ModelWeights:
    if not buf.startswith(NWTS_MAGIC):
        raise MalformedFile("missing NWTS1 magic")
    try:
        pos = len(NWTS_MAGIC)
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        table = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            table.append((name, shape))
        arrays = {}
        for name, shape in table:
            n = int(np.prod(shape))
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, ValueError) as exc:
        raise MalformedFile(f"truncated NWTS file: {exc}") from exc
    if pos != len(buf):
        raise MalformedFile("trailing bytes in NWTS file")
    k = int(arrays.pop("config.k")[0])
    edge = sorted((n for n in arrays if n.startswith("edge") and n.endswith(".W")), key=lambda s: int(s[4:-2]))
    mlp = sorted((n for n in arrays if n.startswith("mlp") and n.endswith(".W")), key=lambda s: int(s[3:-2]))
    first = arrays[edge[0]] if edge else arrays[mlp[0]]
    cfg = ModelConfig(
        input_dim=first.shape[0] // 2 if edge else first.shape[0],
        widths=tuple(arrays[n].shape[1] for n in mlp),
        head=arrays["head0.W"].shape[1],
        edge_widths=tuple(arrays[n].shape[1] for n in edge),
        k=k,
    )
    return ModelWeights(cfg, arrays)


def save_weights(path, w: ModelWeights) -> None:
    atomic_write_bytes(path, encode_weights(w))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())


__all__ = [
    "FeatureSet", "ModelConfig", "ModelWeights", "TrainConfig", "TrainResult", "Adam",
    "select_features", "init_weights", "knn_indices", "edgeconv_layer", "forward",
    "forward_logits", "loss", "backward", "learning_rate", "train", "predict",
    "save_weights", "load_weights", "encode_weights", "decode_weights",
]
