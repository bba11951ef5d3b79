"""Minimal reverse-mode autodiff on float64 numpy arrays.

Covers exactly the op set the policy and PPO losses need: dense matmul,
elementwise math, reductions, log-softmax, gather/scatter, Gaussian
log-densities, and a radial-basis featurizer. Graphs are single-threaded;
parameters live in a ParamStore with an adaptive-moment optimizer and a
versioned binary checkpoint format (layout documented on save_checkpoint).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "backward",
    "ParamStore",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "config_hash",
]

_GRAD_ENABLED = True

LOG_2PI = math.log(2.0 * math.pi)


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_done")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # operator sugar used throughout the policy code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"


def tensor(data) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim > 2 or b.data.ndim > 2:
        raise ValueError(
            f"matmul supports <= 2 dims, got {a.data.shape} @ {b.data.shape}"
        )
    try:
        out = a.data @ b.data
    except ValueError:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad  # 1D . 1D

    return _make(out, (a, b), vjp)


def linear(x, W, b=None) -> Tensor:
    """Fused x @ W + b (single graph node)."""
    x, W = _as_tensor(x), _as_tensor(W)
    xd = x.data
    out = xd @ W.data
    if b is None:
        def vjp2(g):
            if xd.ndim == 1:
                return W.data @ g, np.outer(xd, g)
            return g @ W.data.T, xd.T @ g

        return _make(out, (x, W), vjp2)
    b = _as_tensor(b)
    out = out + b.data

    def vjp(g):
        if xd.ndim == 1:
            return W.data @ g, np.outer(xd, g), g
        return g @ W.data.T, xd.T @ g, g.sum(axis=0)

    return _make(out, (x, W, b), vjp)


def linear2(x, Wx, y, Wy, b) -> Tensor:
    """Fused x @ Wx + y @ Wy + b for 2D inputs (single graph node)."""
    x, Wx, y, Wy, b = (_as_tensor(t) for t in (x, Wx, y, Wy, b))
    xd, yd = x.data, y.data
    out = xd @ Wx.data + yd @ Wy.data + b.data

    def vjp(g):
        return (
            g @ Wx.data.T,
            xd.T @ g,
            g @ Wy.data.T,
            yd.T @ g,
            g.sum(axis=0) if g.ndim == 2 else g,
        )

    return _make(out, (x, Wx, y, Wy, b), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * sig,))


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), vjp)


def gather_rows(a, idx) -> Tensor:
    """Select rows (or scalars from a vector) by integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), vjp)


def index(a, i: int) -> Tensor:
    """Scalar element of a vector."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ValueError(f"index expects a vector, got shape {a.data.shape}")
    out = a.data[i]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _make(out, (a,), vjp)


def scatter_add(a, idx, n_rows: int) -> Tensor:
    """Sum rows of a into n_rows buckets chosen by idx."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)
    return _make(out, (a,), lambda g: (g[idx],))


def concat(parts, axis=0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.data.shape),))


def stack_scalars(items) -> Tensor:
    """Stack scalar tensors into a vector."""
    items = [_as_tensor(x) for x in items]
    out = np.array([float(x.data) for x in items], dtype=np.float64)

    def vjp(g):
        return tuple(np.asarray(g[i]) for i in range(len(items)))

    return _make(out, tuple(items), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient follows the smaller branch (ties to a)."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(out, (a, b), vjp)


def gaussian_log_pdf(x, mu, log_sigma) -> Tensor:
    """log N(x | mu, sigma^2) with x treated as data."""
    mu, log_sigma = _as_tensor(mu), _as_tensor(log_sigma)
    x = np.asarray(x, dtype=np.float64)
    sigma = np.exp(log_sigma.data)
    z = (x - mu.data) / sigma
    out = -0.5 * z * z - log_sigma.data - 0.5 * LOG_2PI

    def vjp(g):
        return (
            _unbroadcast(g * z / sigma, mu.data.shape),
            _unbroadcast(g * (z * z - 1.0), log_sigma.data.shape),
        )

    return _make(out, (mu, log_sigma), vjp)


def radial_basis(r, n_basis: int, cutoff: float) -> np.ndarray:
    """Gaussian radial features of distances.

    Returns plain data: distances are environment inputs, never
    differentiated.
    """
    r = np.asarray(r, dtype=np.float64)
    centers = np.linspace(0.0, cutoff, n_basis)
    width = cutoff / max(n_basis - 1, 1)
    return np.exp(-(((r[..., None] - centers) / width) ** 2))


def cosine_cutoff(r, cutoff: float) -> np.ndarray:
    """Smooth switch: 1 at r=0, 0 at and beyond the cutoff."""
    r = np.asarray(r, dtype=np.float64)
    return np.where(r < cutoff, 0.5 * (np.cos(np.pi * r / cutoff) + 1.0), 0.0)


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation into .grad of every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward called twice on the same graph without reset")
    loss._done = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                # vjp outputs may be views; never mutated afterwards since
                # accumulation below always rebinds
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# --- parameters and optimization -------------------------------------------


class ParamStore:
    """Named parameter tensors plus adaptive-moment optimizer state."""

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0
        self._init_rng = np.random.default_rng(seed)

    def param(self, name: str, shape: tuple, init: str = "fan_in") -> Tensor:
        """Create-or-get a parameter. Weights: uniform(+-sqrt(1/fan_in))."""
        if name in self.params:
            return self.params[name]
        if init == "zeros":
            data = np.zeros(shape, dtype=np.float64)
        elif init == "fan_in":
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
            bound = math.sqrt(1.0 / fan_in)
            data = self._init_rng.uniform(-bound, bound, size=shape)
        elif isinstance(init, (list, tuple, np.ndarray)):
            data = np.asarray(init, dtype=np.float64).reshape(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self.moment1[name] = np.zeros(shape, dtype=np.float64)
        self.moment2[name] = np.zeros(shape, dtype=np.float64)
        return t

    def constant(self, name: str, values) -> Tensor:
        """Parameter with explicit initial values."""
        if name in self.params:
            return self.params[name]
        data = np.asarray(values, dtype=np.float64)
        t = Tensor(data.copy(), requires_grad=True)
        self.params[name] = t
        self.moment1[name] = np.zeros(data.shape, dtype=np.float64)
        self.moment2[name] = np.zeros(data.shape, dtype=np.float64)
        return t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            if name not in self.params:
                raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
            if self.params[name].data.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: {self.params[name].data.shape}"
                    f" vs {arr.shape}"
                )
            self.params[name].data = arr.astype(np.float64).copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, arr in snap.items():
            self.params[name].data = arr.copy()


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for t in store.params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return math.sqrt(total)


def optimizer_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    grad_clip: float | None = None,
) -> float:
    """Global-norm clip then bias-corrected adaptive-moment update.

    Returns the pre-clip gradient norm. Parameters without gradients are
    skipped (their moments stay untouched).
    """
    b1, b2 = betas
    for name, t in store.params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    norm = global_grad_norm(store)
    scale = 1.0
    if grad_clip is not None and norm > grad_clip and norm > 0.0:
        scale = grad_clip / norm
    store.step_count += 1
    t_step = store.step_count
    bc1 = 1.0 - b1**t_step
    bc2 = 1.0 - b2**t_step
    for name, t in store.params.items():
        if t.grad is None:
            continue
        g = t.grad * scale
        m = store.moment1[name]
        v = store.moment2[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return norm


# --- checkpoints ------------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..7    magic b"MOLNN01\n"
#   bytes 8..15   uint64 header length H
#   bytes 16..16+H  UTF-8 JSON header:
#       {"version": 1, "config_hash": str, "step_count": int,
#        "params": [{"name": str, "shape": [int]} ...],   # payload order
#        "rng": <json>, "extra": <json>}
#   then payload: for each param in order, data then moment1 then moment2,
#   each as raw little-endian float64.

MAGIC = b"MOLNN01\n"


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(
    path, store: ParamStore, cfg_hash: str, rng_state=None, extra=None
) -> None:
    header = {
        "version": 1,
        "config_hash": cfg_hash,
        "step_count": store.step_count,
        "params": [
            {"name": name, "shape": list(t.data.shape)}
            for name, t in store.params.items()
        ],
        "rng": rng_state,
        "extra": extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, t in store.params.items():
            fh.write(t.data.astype("<f8").tobytes())
            fh.write(store.moment1[name].astype("<f8").tobytes())
            fh.write(store.moment2[name].astype("<f8").tobytes())


def load_checkpoint(path, store: ParamStore, expected_hash: str | None = None):
    """Restore parameters + optimizer state; returns (rng_state, extra).

    Refuses on magic/version/config-hash mismatch or truncated payload.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path!s} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path!s}: {exc}")
    if header.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {header['config_hash']},"
            f" current {expected_hash}"
        )
    offset = 16 + hlen
    for meta in header["params"]:
        name, shape = meta["name"], tuple(meta["shape"])
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        arrays = []
        for _ in range(3):
            chunk = raw[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointError(f"truncated checkpoint payload in {path!s}")
            arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).copy())
            offset += nbytes
        if name not in store.params:
            raise CheckpointError(f"checkpoint parameter {name!r} unknown to this model")
        if store.params[name].data.shape != tuple(shape):
            raise CheckpointError(f"checkpoint shape mismatch for {name!r}")
        store.params[name].data = arrays[0]
        store.moment1[name] = arrays[1]
        store.moment2[name] = arrays[2]
    store.step_count = header["step_count"]
    return header.get("rng"), header.get("extra")
