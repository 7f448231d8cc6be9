"""Reverse-mode automatic differentiation over a dynamically recorded tape.

Values are strictly 2-D float64 matrices: scalars are (1, 1), row vectors
(1, d), column vectors (n, 1).  There is no implicit broadcasting beyond
scalar * matrix; shape changes go through explicit ops (tile_rows,
slice_cols, ...).  Every primitive below accepts either a Node or a plain
ndarray and only records onto a tape when at least one operand is a Node,
so the same model code serves both the differentiable training path and
fast gradient-free evaluation.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import DomainError, ShapeError

GROUPS = ("theta", "phi", "eta")
_GROUP_TAG = {"theta": 0, "phi": 1, "eta": 2}
_TAG_GROUP = {v: k for k, v in _GROUP_TAG.items()}

_MAGIC = b"FGM1"
_VERSION = 1


def as_matrix(x) -> np.ndarray:
    """Coerce a scalar or 2-D array-like to a float64 matrix."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected a scalar or 2-D array, got shape {a.shape}")
    return a


class Node:
    """One tape entry: an op, its 2-D value, and how to push gradients back."""

    __slots__ = ("tape", "idx", "op", "value", "parents", "_vjps", "grad")

    def __init__(self, tape, idx, op, value, parents, vjps):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.value = value
        self.parents = parents
        self._vjps = vjps
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.idx} {self.op} {self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of one computation; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}

    def _record(self, op, value, parents, vjps) -> Node:
        node = Node(self, len(self.nodes), op, value, parents, vjps)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._record("const", as_matrix(value), (), ())

    def leaf(self, param: "Parameter") -> Node:
        """Node for a parameter; memoized so repeated use shares one leaf."""
        node = self._leaves.get(id(param))
        if node is None:
            node = self._record("param", param.value, (), ())
            self._leaves[id(param)] = node
        return node

    def grad(self, param: "Parameter") -> np.ndarray:
        """Gradient of the last backward() root w.r.t. `param` (zero if unused)."""
        node = self._leaves.get(id(param))
        if node is None or node.grad is None:
            return np.zeros_like(param.value)
        return node.grad


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into .grad for every node reachable from root.

    Root must be scalar-valued.  All gradients are reset first, so running
    backward twice on the same tape gives bit-identical results.
    """
    if not isinstance(root, Node):
        raise ShapeError("backward root must be a Node")
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
    tape = root.tape
    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node._vjps):
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else as_matrix(x)


def _shape(x):
    return x.value.shape if isinstance(x, Node) else as_matrix(x).shape


def _check_same_shape(op, a, b):
    sa, sb = _shape(a), _shape(b)
    if sa != sb:
        raise ShapeError(f"{op}: shape mismatch {sa} vs {sb}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    _check_same_shape("add", a, b)
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return as_matrix(a) + as_matrix(b)
    va, vb = value_of(a), value_of(b)
    parents, vjps = [], []
    for operand in (a, b):
        if isinstance(operand, Node):
            parents.append(operand)
            vjps.append(lambda g: g)
    tape = parents[0].tape
    return tape._record("add", va + vb, tuple(parents), tuple(vjps))


def sub(a, b):
    _check_same_shape("sub", a, b)
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return as_matrix(a) - as_matrix(b)
    va, vb = value_of(a), value_of(b)
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g: g)
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g: -g)
    tape = parents[0].tape
    return tape._record("sub", va - vb, tuple(parents), tuple(vjps))


def mul(a, b):
    """Elementwise product; operands must have identical shapes."""
    _check_same_shape("mul", a, b)
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return as_matrix(a) * as_matrix(b)
    va, vb = value_of(a), value_of(b)
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, o=vb: g * o)
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, o=va: g * o)
    tape = parents[0].tape
    return tape._record("mul", va * vb, tuple(parents), tuple(vjps))


def neg(x):
    if not isinstance(x, Node):
        return -as_matrix(x)
    return x.tape._record("neg", -x.value, (x,), (lambda g: -g,))


def scale(x, c: float):
    """Multiply a matrix by a python scalar."""
    c = float(c)
    if not isinstance(x, Node):
        return as_matrix(x) * c
    return x.tape._record("scale", x.value * c, (x,), (lambda g: g * c,))


def matmul(a, b):
    sa, sb = _shape(a), _shape(b)
    if sa[1] != sb[0]:
        raise ShapeError(f"matmul: inner dims differ, {sa} @ {sb}")
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return as_matrix(a) @ as_matrix(b)
    va, vb = value_of(a), value_of(b)
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g, o=vb: g @ o.T)
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g, o=va: o.T @ g)
    tape = parents[0].tape
    return tape._record("matmul", va @ vb, tuple(parents), tuple(vjps))


def matvec(a, v):
    """Matrix times column vector; v must have shape (n, 1)."""
    if _shape(v)[1] != 1:
        raise ShapeError(f"matvec: expected a column vector, got {_shape(v)}")
    return matmul(a, v)


def exp(x):
    if not isinstance(x, Node):
        return np.exp(as_matrix(x))
    out = np.exp(x.value)
    return x.tape._record("exp", out, (x,), (lambda g, o=out: g * o,))


def log(x):
    v = value_of(x)
    if np.any(v <= 0.0):
        raise DomainError("log requires strictly positive input")
    if not isinstance(x, Node):
        return np.log(v)
    return x.tape._record("log", np.log(v), (x,), (lambda g, o=v: g / o,))


def tanh(x):
    if not isinstance(x, Node):
        return np.tanh(as_matrix(x))
    out = np.tanh(x.value)
    deriv = 1.0 - out * out
    return x.tape._record("tanh", out, (x,), (lambda g, d=deriv: g * d,))


def _softplus(v):
    # log(1 + e^v) without overflow for large |v|
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x):
    if not isinstance(x, Node):
        return _softplus(as_matrix(x))
    v = x.value
    return x.tape._record(
        "softplus", _softplus(v), (x,), (lambda g, o=v: g * _sigmoid(o),)
    )


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes through only where unclamped."""
    v = value_of(x)
    out = np.clip(v, lo, hi)
    if not isinstance(x, Node):
        return out
    mask = ((v >= lo) & (v <= hi)).astype(np.float64)
    return x.tape._record("clip", out, (x,), (lambda g, m=mask: g * m,))


def reduce_sum(x, axis=None):
    v = value_of(x)
    if axis not in (None, 0, 1):
        raise ShapeError(f"reduce_sum: axis must be None, 0 or 1, got {axis}")
    out = np.sum(v, axis=axis, keepdims=True) if axis is not None else np.sum(v).reshape(1, 1)
    if not isinstance(x, Node):
        return out
    shape = v.shape

    def vjp(g, shape=shape):
        return np.broadcast_to(g, shape).copy()

    return x.tape._record("sum", out, (x,), (vjp,))


def reduce_mean(x, axis=None):
    v = value_of(x)
    n = v.size if axis is None else v.shape[axis]
    return scale(reduce_sum(x, axis=axis), 1.0 / n)


def tile_rows(x, n: int):
    """Repeat a (1, d) row vector into an (n, d) matrix (no-copy view)."""
    v = value_of(x)
    if v.shape[0] != 1:
        raise ShapeError(f"tile_rows: expected a single row, got {v.shape}")
    out = np.broadcast_to(v, (n, v.shape[1]))
    if not isinstance(x, Node):
        return out
    return x.tape._record(
        "tile_rows", out, (x,), (lambda g: np.sum(g, axis=0, keepdims=True),)
    )


def tile_cols(x, n: int):
    """Repeat an (r, 1) column vector into an (r, n) matrix (no-copy view)."""
    v = value_of(x)
    if v.shape[1] != 1:
        raise ShapeError(f"tile_cols: expected a single column, got {v.shape}")
    out = np.broadcast_to(v, (v.shape[0], n))
    if not isinstance(x, Node):
        return out
    return x.tape._record(
        "tile_cols", out, (x,), (lambda g: np.sum(g, axis=1, keepdims=True),)
    )


def slice_cols(x, start: int, stop: int):
    v = value_of(x)
    if not (0 <= start < stop <= v.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {v.shape}")
    out = v[:, start:stop]  # view; node values are never mutated
    if not isinstance(x, Node):
        return out
    shape = v.shape

    def vjp(g, shape=shape, start=start, stop=stop):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return full

    return x.tape._record("slice_cols", out, (x,), (vjp,))


def concat_cols(parts):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = {_shape(p)[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {sorted(rows)}")
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=1)
    if not any(isinstance(p, Node) for p in parts):
        return out
    tape = next(p.tape for p in parts if isinstance(p, Node))
    parents, vjps = [], []
    offset = 0
    for p, v in zip(parts, values):
        w = v.shape[1]
        if isinstance(p, Node):
            parents.append(p)
            vjps.append(lambda g, j0=offset, j1=offset + w: g[:, j0:j1].copy())
        offset += w
    return tape._record("concat_cols", out, tuple(parents), tuple(vjps))


def logsumexp_cols(x):
    """Row-wise log-sum-exp: (r, c) -> (r, 1), numerically stable."""
    v = value_of(x)
    m = np.max(v, axis=1, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=1, keepdims=True))
    if not isinstance(x, Node):
        return out
    soft = np.exp(v - out)
    return x.tape._record("logsumexp", out, (x,), (lambda g, s=soft: g * s,))


# ---------------------------------------------------------------------------
# parameters and checkpoints
# ---------------------------------------------------------------------------


class Parameter:
    """A named trainable matrix belonging to exactly one optimization group."""

    __slots__ = ("name", "group", "value")

    def __init__(self, name: str, group: str, value):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}; expected one of {GROUPS}")
        self.name = name
        self.group = group
        self.value = as_matrix(value).copy()

    def __repr__(self):
        return f"Parameter({self.name!r}, {self.group}, {self.value.shape})"


class ParameterStore:
    """Ordered collection of named parameters, partitioned into groups."""

    def __init__(self, params=()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def group(self, group: str) -> list[Parameter]:
        return [p for p in self._params.values() if p.group == group]

    @classmethod
    def from_models(cls, *models) -> "ParameterStore":
        store = cls()
        for m in models:
            for p in m.parameters():
                store.add(p)
        return store

    def save(self, path) -> None:
        save_checkpoint(self, path)

    def load_values(self, path) -> None:
        """Restore values from a checkpoint; names, groups and shapes must match."""
        other = load_checkpoint(path)
        for p in self:
            if p.name not in other._params:
                raise ValueError(f"checkpoint is missing parameter {p.name!r}")
            q = other[p.name]
            if q.group != p.group:
                raise ValueError(f"group mismatch for {p.name!r}: {q.group} vs {p.group}")
            if q.value.shape != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {p.name!r}: {q.value.shape} vs {p.value.shape}"
                )
            p.value[...] = q.value


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file + rename so interrupted runs leave no partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(store: ParameterStore, path) -> None:
    chunks = [_MAGIC, struct.pack("<I", _VERSION)]
    for p in store:
        name = p.name.encode("utf-8")
        rows, cols = p.value.shape
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", _GROUP_TAG[p.group]))
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> ParameterStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    store = ParameterStore()
    off = 8
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (tag,) = struct.unpack_from("<B", blob, off)
        off += 1
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        n_bytes = rows * cols * 8
        value = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off)
        off += n_bytes
        store.add(Parameter(name, _TAG_GROUP[tag], value.reshape(rows, cols)))
    return store
