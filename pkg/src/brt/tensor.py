"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` walks the graph
reachable from one output, so each forward pass owns its own tape and nothing
is shared between passes.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_CHECKED: contextvars.ContextVar[bool] = contextvars.ContextVar("brt_checked", default=False)
_RECORD: contextvars.ContextVar[bool] = contextvars.ContextVar("brt_record", default=True)


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """Raised when a softmax row has no unmasked entry."""


class NonFiniteError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op produces NaN or Inf."""
    token = _CHECKED.set(enabled)
    try:
        yield
    finally:
        _CHECKED.reset(token)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape; results are plain leaves."""
    token = _RECORD.set(False)
    try:
        yield
    finally:
        _RECORD.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, _op: str = ""):
        if type(data) is not np.ndarray or data.dtype != DTYPE:
            data = np.asarray(data, dtype=DTYPE)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op or 'leaf'})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if type(x) is Tensor:
        return x
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _CHECKED.get() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    if not _RECORD.get():
        return Tensor(data, _op=op)
    for p in parents:
        if p.requires_grad:
            break
    else:
        return Tensor(data, _op=op)
    return Tensor(data, True, tuple(parents), backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul"
    )


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    # x * x2 rather than x**3: numpy's general pow path is ~100x slower on small arrays
    inner = _GELU_C * (x + 0.044715 * (x * x2))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ≥2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def _mask_array(mask, shape) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else mask
    m = np.asarray(m)
    if m.dtype != bool:
        m = m.astype(bool)
    try:
        return np.broadcast_to(m, shape)
    except ValueError as exc:
        raise DimensionError(f"mask shape {m.shape} does not broadcast to {shape}") from exc


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` entries that are False get exactly 0."""
    z = x.data
    if mask is not None:
        m = _mask_array(mask, z.shape)
        if not np.all(m.any(axis=-1)):
            raise DegenerateRowError("softmax row is fully masked")
        z = np.where(m, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(m, e, 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm affine params {gamma.shape}/{beta.shape} do not match last dim {d}")
    # sum / d is what ndarray.mean computes, without its Python-level wrapper
    mu = x.data.sum(axis=-1, keepdims=True) / d
    xc = x.data - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward, "layernorm")


ACTIVATIONS = {"relu": relu, "gelu": gelu, "none": lambda t: t, None: lambda t: t}


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    if bias is None:
        return y
    # one tape node for matmul + bias; the arithmetic is that of matmul() then add()
    out = y.data + bias.data

    def backward(g):
        gx = np.matmul(g, np.swapaxes(weight.data, -1, -2))
        gw = np.matmul(np.swapaxes(x.data, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gw, weight.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, weight, bias), backward, "linear")


def mlp_forward(x: Tensor, layers: Iterable[tuple[Tensor, Tensor | None, str | None]]) -> Tensor:
    for weight, bias, act in layers:
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        x = ACTIVATIONS[act](linear(x, weight, bias))
    return x


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitSpec:
    kind: str  # "uniform" | "normal" | "zeros" | "ones" | "constant"
    a: float = 0.0
    b: float = 0.0

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size=shape)
        if self.kind == "normal":
            return rng.normal(self.a, self.b, size=shape)
        if self.kind == "zeros":
            return np.zeros(shape)
        if self.kind == "ones":
            return np.ones(shape)
        if self.kind == "constant":
            return np.full(shape, self.a)
        raise ValueError(f"unknown init kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}

    @classmethod
    def from_json(cls, d: dict) -> "InitSpec":
        return cls(d["kind"], float(d.get("a", 0.0)), float(d.get("b", 0.0)))


def normal(mean: float, std: float) -> InitSpec:
    return InitSpec("normal", mean, std)


def uniform(lo: float, hi: float) -> InitSpec:
    return InitSpec("uniform", lo, hi)


ZEROS = InitSpec("zeros")
ONES = InitSpec("ones")


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    init_spec: InitSpec
    seed: int


def param_seed(global_seed: int, name: str) -> int:
    return (int(global_seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**32)


class ParamRegistry:
    """Ordered, name-unique collection of trainable tensors.

    Each parameter draws from its own generator seeded by (registry seed,
    name), so values do not depend on registration order.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, name: str, shape, init: InitSpec) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        seed = param_seed(self.seed, name)
        data = init.sample(shape, np.random.default_rng(seed)).astype(DTYPE)
        t = Tensor(data, requires_grad=True)
        self._params[name] = Parameter(name, t, init, seed)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self._params.values()]

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    def num_scalars(self) -> int:
        return int(sum(p.tensor.data.size for p in self._params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in state:
                raise CheckpointError(f"missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.tensor.shape:
                raise CheckpointError(
                    f"shape mismatch for parameter {name!r}: checkpoint {arr.shape}, model {p.tensor.shape}"
                )
            p.tensor.data = arr.copy()
        extra = set(state) - set(self._params)
        if extra:
            raise CheckpointError(f"unexpected parameters in checkpoint: {sorted(extra)}")


# ---------------------------------------------------------------------------
# checkpoint format: <stem>.bin (float64 little-endian blobs) + <stem>.json manifest
# ---------------------------------------------------------------------------

def checkpoint_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".bin"), p.with_suffix(".json")


def save_checkpoint(registry: ParamRegistry, path, extra: dict | None = None) -> Path:
    bin_path, json_path = checkpoint_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(bin_path, "wb") as fh:
        for p in registry:
            blob = p.tensor.data.astype("<f8").tobytes(order="C")
            fh.write(blob)
            entries[p.name] = {
                "offset": offset,
                "shape": list(p.tensor.shape),
                "init_spec": p.init_spec.to_json(),
                "seed": p.seed,
            }
            offset += len(blob)
    manifest = {"format_version": 1, "binary": bin_path.name, "registry_seed": registry.seed, "parameters": entries}
    if extra:
        manifest.update(extra)
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return json_path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (manifest, name -> array)."""
    _, json_path = checkpoint_paths(path)
    manifest = json.loads(json_path.read_text())
    raw = (json_path.parent / manifest["binary"]).read_bytes()
    arrays = {}
    for name, e in manifest["parameters"].items():
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start, stop = e["offset"], e["offset"] + 8 * n
        if stop > len(raw):
            raise CheckpointError(f"binary too short for parameter {name!r}")
        arrays[name] = np.frombuffer(raw[start:stop], dtype="<f8").reshape(e["shape"]).astype(DTYPE)
    return manifest, arrays


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6, floor: float = 1e-8) -> float:
    """Worst relative error between autodiff and central differences.

    ``f`` rebuilds its graph on every call and returns a scalar tensor. The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("objective is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("grad_check needs contiguous parameter arrays")
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("objective is not finite under perturbation")
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
