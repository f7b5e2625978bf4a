"""Two-stream multi-task network over feature vectors.

A multilayer-perceptron backbone is shared by one supervised head (C
classes) and T pseudo heads (Z classes each). The supervised loss, the
ensemble pseudo-label loss and their weighted sum are trained with plain
mini-batch SGD.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, FormatError
from .neighbors import make_rng

ACTIVATIONS = ("relu", "tanh")
MODEL_MAGIC = b"MFMD"
MODEL_VERSION = 1

# sub-stream keys under the training seed
_INIT_BACKBONE, _INIT_PSEUDO, _SHUFFLE_LABELED, _SHUFFLE_PSEUDO = range(4)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    activation: str = "relu"
    n_classes: int = 0
    n_trials: int = 0
    n_pseudo_classes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("net: all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"net.activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.n_classes < 0 or self.n_trials < 0:
            raise ConfigError("net: class and trial counts must be >= 0")
        if self.n_trials > 0 and self.n_pseudo_classes < 1:
            raise ConfigError("net: pseudo heads need n_pseudo_classes >= 1")

    @property
    def rep_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims]
        return [(dims[i + 1], dims[i]) for i in range(len(self.hidden_dims))]


@dataclass
class NetworkParams:
    """Backbone layers (weights stored out x in) plus the supervised and pseudo heads.

    The backbone exists once and is read by every head. An absent supervised
    head is a 0 x h matrix; the T pseudo heads are stacked as T x Z x h.
    """

    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    sup_w: np.ndarray
    sup_b: np.ndarray
    pseudo_w: np.ndarray
    pseudo_b: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        """All tensors in declaration order (the model file order)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.sup_w, self.sup_b, self.pseudo_w, self.pseudo_b]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.sup_w.copy(), self.sup_b.copy(), self.pseudo_w.copy(), self.pseudo_b.copy(),
        )

    def equals(self, other: "NetworkParams") -> bool:
        return self.spec == other.spec and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.tensors(), other.tensors())
        )

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "NetworkParams":
        h = spec.rep_dim
        return cls(
            spec,
            [np.zeros(s) for s in spec.layer_dims],
            [np.zeros(s[0]) for s in spec.layer_dims],
            np.zeros((spec.n_classes, h)),
            np.zeros(spec.n_classes),
            np.zeros((spec.n_trials, spec.n_pseudo_classes, h)),
            np.zeros((spec.n_trials, spec.n_pseudo_classes)),
        )


def _glorot(rng, shape):
    fan_out, fan_in = shape[-2], shape[-1]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Uniform Glorot weights and zero biases.

    The backbone and supervised head come from one sub-stream and the pseudo
    heads from another, so networks that differ only in their pseudo heads
    start from the same backbone.
    """
    p = NetworkParams.zeros(spec)
    rng = make_rng(seed, _INIT_BACKBONE)
    p.weights = [_glorot(rng, w.shape) for w in p.weights]
    if spec.n_classes:
        p.sup_w = _glorot(rng, p.sup_w.shape)
    return reset_pseudo_heads(p, spec.n_trials, spec.n_pseudo_classes, seed)


def reset_pseudo_heads(params: NetworkParams, n_trials: int, n_pseudo_classes: int,
                       seed: int) -> NetworkParams:
    """Copy of ``params`` with freshly initialized pseudo heads."""
    spec = replace(params.spec, n_trials=n_trials, n_pseudo_classes=n_pseudo_classes)
    p = params.copy()
    p.spec = spec
    h = spec.rep_dim
    p.pseudo_w = _glorot(make_rng(seed, _INIT_PSEUDO), (n_trials, n_pseudo_classes, h))
    p.pseudo_b = np.zeros((n_trials, n_pseudo_classes))
    return p


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0.0).astype(z.dtype) if name == "relu" else 1.0 - a * a


def _backbone(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(f"expected inputs of dimension {params.spec.input_dim}, got shape {x.shape}")
    pre, acts = [], [x]
    for w, b in zip(params.weights, params.biases):
        z = acts[-1] @ w.T + b
        pre.append(z)
        acts.append(_act(params.spec.activation, z))
    return pre, acts


def forward(params: NetworkParams, x):
    """Supervised scores (None without a supervised head) and T x Z pseudo scores.

    A single vector gives ``(C,)`` and ``(T, Z)`` outputs; a batch adds a
    leading sample axis.
    """
    single = np.ndim(x) == 1
    xb = np.atleast_2d(x)
    rep = _backbone(params, xb)[1][-1]
    sup = rep @ params.sup_w.T + params.sup_b if params.spec.n_classes else None
    pseudo = _head_scores(rep, params.pseudo_w, params.pseudo_b)
    if single:
        return (None if sup is None else sup[0]), pseudo[0]
    return sup, pseudo


def embed(params: NetworkParams, x) -> np.ndarray:
    """The shared representation feeding every head (last hidden activation)."""
    single = np.ndim(x) == 1
    rep = _backbone(params, np.atleast_2d(x))[1][-1]
    return rep[0] if single else rep


def _head_scores(rep, w, b):
    t, z, h = w.shape
    if t * z == 0:
        return np.zeros((rep.shape[0], t, z))
    return (rep @ w.reshape(t * z, h).T).reshape(-1, t, z) + b


def _cross_entropy(s, y):
    """Per-row cross-entropy and d(loss)/d(scores) over the last axis."""
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    tot = e.sum(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(tot[..., 0])
    picked = np.take_along_axis(s, y[..., None], axis=-1)[..., 0]
    g = e / tot
    np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
    return lse - picked, g


def _sq(a):
    return float(np.sum(a * a))


def _backward(params, pre, acts, d_rep, grads):
    d_a = d_rep
    for layer in range(len(params.weights) - 1, -1, -1):
        dz = d_a * _act_grad(params.spec.activation, pre[layer], acts[layer + 1])
        grads.weights[layer] += dz.T @ acts[layer]
        grads.biases[layer] += dz.sum(axis=0)
        d_a = dz @ params.weights[layer]


@dataclass
class LossParts:
    total: float
    supervised: float
    manifold: float


def value_and_grad(params: NetworkParams, labeled=None, pseudo=None, lambda_s: float = 0.0,
                   lambda_m: float = 0.0, lam: float = 1.0, reduction: str = "sum",
                   heads=None, need_grad: bool = True):
    """Joint objective ``L_s + lam * L_m`` and its gradient.

    ``labeled`` is ``(x, y)``; ``pseudo`` is ``(x, Y)`` with Y of shape N x T.
    A stream that is absent, empty, or has no matching head contributes
    nothing, its weight decay included. ``heads`` restricts the pseudo term
    to a subset of trials. With ``reduction="mean"`` the supervised data term
    is divided by the batch size and the pseudo data term by batch size times
    head count; weight decay is not rescaled.

    Returns ``(LossParts, grads)`` where grads is a NetworkParams (or None).
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    spec = params.spec
    grads = NetworkParams.zeros(spec) if need_grad else None
    l_s = l_m = 0.0

    if labeled is not None and spec.n_classes and len(labeled[1]):
        x, y = labeled
        y = np.asarray(y, dtype=np.int64)
        pre, acts = _backbone(params, x)
        rep = acts[-1]
        ce, g = _cross_entropy(rep @ params.sup_w.T + params.sup_b, y)
        scale = 1.0 / len(y) if reduction == "mean" else 1.0
        l_s = float(ce.sum()) * scale
        l_s += lambda_s * (sum(_sq(w) for w in params.weights) + _sq(params.sup_w))
        if need_grad:
            g *= scale
            grads.sup_w += g.T @ rep
            grads.sup_b += g.sum(axis=0)
            _backward(params, pre, acts, g @ params.sup_w, grads)
            for gw, w in zip(grads.weights, params.weights):
                gw += 2.0 * lambda_s * w
            grads.sup_w += 2.0 * lambda_s * params.sup_w

    sel = slice(None) if heads is None else np.asarray(heads, dtype=np.int64)
    n_heads = spec.n_trials if heads is None else sel.size
    if pseudo is not None and n_heads and len(pseudo[1]):
        x, yy = pseudo
        yy = np.asarray(yy, dtype=np.int64)
        if yy.ndim != 2 or yy.shape[1] != spec.n_trials:
            raise ValueError(f"pseudo-labels must be N x {spec.n_trials}, got shape {yy.shape}")
        pre, acts = _backbone(params, x)
        rep = acts[-1]
        hw, hb = params.pseudo_w[sel], params.pseudo_b[sel]
        ce, g = _cross_entropy(_head_scores(rep, hw, hb), yy[:, sel])
        scale = 1.0 / (len(yy) * n_heads) if reduction == "mean" else 1.0
        l_m = float(ce.sum()) * scale
        l_m += lambda_m * (sum(_sq(w) for w in params.weights) + _sq(hw))
        if need_grad:
            g *= scale * lam
            n, t, z = g.shape
            g2 = g.reshape(n, t * z)
            grads.pseudo_w[sel] += (g2.T @ rep).reshape(t, z, -1) + 2.0 * lam * lambda_m * hw
            grads.pseudo_b[sel] += g.sum(axis=0)
            _backward(params, pre, acts, g2 @ hw.reshape(t * z, -1), grads)
            for gw, w in zip(grads.weights, params.weights):
                gw += 2.0 * lam * lambda_m * w

    return LossParts(l_s + lam * l_m, l_s, l_m), grads


def loss_supervised(params, x, y, lambda_s, reduction="sum") -> float:
    return value_and_grad(params, labeled=(x, y), lambda_s=lambda_s, reduction=reduction,
                          need_grad=False)[0].total


def loss_manifold(params, x, pseudo_labels, lambda_m, reduction="sum", heads=None) -> float:
    return value_and_grad(params, pseudo=(x, pseudo_labels), lambda_m=lambda_m,
                          reduction=reduction, heads=heads, need_grad=False)[0].total


def loss_joint(params, labeled, pseudo, cfg: "TrainConfig", lam=None, reduction="sum") -> float:
    lam = cfg.lam if lam is None else lam
    return value_and_grad(params, labeled, pseudo, cfg.lambda_s, cfg.lambda_m, lam,
                          reduction=reduction, need_grad=False)[0].total


@dataclass(frozen=True)
class TrainConfig:
    lambda_s: float = 0.0005
    lambda_m: float = 0.0005
    lam: float = 1.0
    lambda_mode: str = "auto_balance"
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lambda_mode not in ("fixed", "auto_balance"):
            raise ConfigError(f"train.lambda_mode must be 'fixed' or 'auto_balance', got {self.lambda_mode!r}")
        for key in ("lambda_s", "lambda_m", "lam"):
            v = getattr(self, key)
            if not (math.isfinite(v) and v >= 0):
                name = "lambda" if key == "lam" else key
                raise ConfigError(f"train.{name} must be a finite value >= 0, got {v}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainResult:
    params: NetworkParams
    losses: list[float] = field(default_factory=list)
    supervised_losses: list[float] = field(default_factory=list)
    manifold_losses: list[float] = field(default_factory=list)
    lam: float = 1.0
    balance: dict | None = None


class _BatchStream:
    """Endless mini-batches over ``n`` samples, reshuffled on every pass."""

    def __init__(self, n, batch_size, rng):
        self.n, self.bs, self.rng = n, batch_size, rng
        self.order = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def next(self):
        if self.pos >= self.order.size:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return idx


def train(params: NetworkParams, cfg: TrainConfig, labeled=None, pseudo=None,
          steps_per_epoch: int | None = None) -> TrainResult:
    """Mini-batch SGD on the supervised stream, the pseudo stream, or both.

    Every step draws one batch from each active stream; the streams cycle
    independently with their own shuffling generators. An epoch is enough
    steps to pass once over the larger stream unless ``steps_per_epoch`` is
    given. The per-step objective uses mean-reduced data terms; the loss
    trace holds the average step objective of each epoch.

    With both streams and ``lambda_mode="auto_balance"`` the first epoch runs with
    ``cfg.lam``; the stream weight is then set so that ``lam * L_m`` equals
    ``L_s`` on the full streams and frozen.
    """
    spec = params.spec
    use_s = labeled is not None and spec.n_classes > 0 and len(labeled[1]) > 0
    use_m = pseudo is not None and spec.n_trials > 0 and len(pseudo[1]) > 0
    if not (use_s or use_m):
        raise ValueError("train needs at least one non-empty stream with a matching head")
    if use_s:
        xs, ys = np.asarray(labeled[0], dtype=np.float64), np.asarray(labeled[1], dtype=np.int64)
        s_stream = _BatchStream(len(ys), cfg.batch_size, make_rng(cfg.seed, _SHUFFLE_LABELED))
    if use_m:
        xm, ym = np.asarray(pseudo[0], dtype=np.float64), np.asarray(pseudo[1], dtype=np.int64)
        m_stream = _BatchStream(len(ym), cfg.batch_size, make_rng(cfg.seed, _SHUFFLE_PSEUDO))
    if steps_per_epoch is None:
        sizes = ([len(ys)] if use_s else []) + ([len(ym)] if use_m else [])
        steps_per_epoch = max(math.ceil(n / cfg.batch_size) for n in sizes)

    lam = cfg.lam if (use_s and use_m) else 1.0
    full_s = (xs, ys) if use_s else None
    full_m = (xm, ym) if use_m else None
    p = params.copy()
    result = TrainResult(p, lam=lam)
    for epoch in range(1, cfg.epochs + 1):
        acc = np.zeros(3)
        for step in range(steps_per_epoch):
            bs = None
            bm = None
            if use_s:
                i = s_stream.next()
                bs = (xs[i], ys[i])
            if use_m:
                j = m_stream.next()
                bm = (xm[j], ym[j])
            with np.errstate(over="ignore", invalid="ignore"):
                parts, g = value_and_grad(p, bs, bm, cfg.lambda_s, cfg.lambda_m, lam,
                                          reduction="mean")
            if not math.isfinite(parts.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {step}")
            acc += (parts.total, parts.supervised, parts.manifold)
            for t, gt in zip(p.tensors(), g.tensors()):
                t -= cfg.learning_rate * gt
        acc /= steps_per_epoch
        result.losses.append(float(acc[0]))
        result.supervised_losses.append(float(acc[1]))
        result.manifold_losses.append(float(acc[2]))
        if epoch == 1 and use_s and use_m and cfg.lambda_mode == "auto_balance":
            parts, _ = value_and_grad(p, full_s, full_m, cfg.lambda_s, cfg.lambda_m, lam,
                                      reduction="mean", need_grad=False)
            if parts.manifold > 0:
                lam = parts.supervised / parts.manifold
            result.balance = {"supervised": parts.supervised, "manifold": parts.manifold, "lam": lam}
            result.lam = lam
    return result


_SPEC_HEAD = struct.Struct("<4sII")
_SPEC_TAIL = struct.Struct("<BIII")


def save_model(params: NetworkParams, path) -> None:
    """Write the spec and all tensors as float32; nothing is written if a value overflows."""
    spec = params.spec
    chunks = [_SPEC_HEAD.pack(MODEL_MAGIC, MODEL_VERSION, spec.input_dim),
              struct.pack(f"<I{len(spec.hidden_dims)}I", len(spec.hidden_dims), *spec.hidden_dims),
              _SPEC_TAIL.pack(ACTIVATIONS.index(spec.activation), spec.n_classes,
                              spec.n_trials, spec.n_pseudo_classes)]
    for t in params.tensors():
        with np.errstate(over="ignore"):
            t32 = np.ascontiguousarray(t, dtype="<f4")
        if not np.isfinite(t32).all():
            raise ValueError(f"{path}: parameters overflow float32")
        chunks.append(t32.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path) -> NetworkParams:
    """Read a model file; a file holding only the spec gives a zero network."""
    raw = Path(path).read_bytes()
    try:
        magic, version, input_dim = _SPEC_HEAD.unpack_from(raw)
        if magic != MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != MODEL_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        off = _SPEC_HEAD.size
        (n_hidden,) = struct.unpack_from("<I", raw, off)
        off += 4
        if n_hidden > (len(raw) - off) // 4:
            raise FormatError(f"{path}: shape mismatch, header declares {n_hidden} hidden layers")
        hidden = struct.unpack_from(f"<{n_hidden}I", raw, off)
        off += 4 * n_hidden
        act, c, t, z = _SPEC_TAIL.unpack_from(raw, off)
        off += _SPEC_TAIL.size
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    if act >= len(ACTIVATIONS):
        raise FormatError(f"{path}: unknown activation id {act}")
    try:
        spec = NetworkSpec(input_dim, tuple(hidden), ACTIVATIONS[act], c, t, z)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from None
    params = NetworkParams.zeros(spec)
    tensors = params.tensors()
    need = 4 * sum(a.size for a in tensors)
    if len(raw) == off:
        return params
    if len(raw) - off != need:
        raise FormatError(f"{path}: shape mismatch, expected {need} tensor bytes, got {len(raw) - off}")
    for a in tensors:
        a[...] = np.frombuffer(raw, dtype="<f4", count=a.size, offset=off).reshape(a.shape)
        off += 4 * a.size
    return params
