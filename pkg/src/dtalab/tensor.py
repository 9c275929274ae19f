"""Dense float32 tensors with tape-based reverse-mode differentiation.

Values are stored in 32-bit floats; reductions (sum, mean, dot, norms,
softmax denominators, normalization statistics) accumulate in 64-bit
before casting back, so gradient checks stay stable.

Broadcasting is deliberately restricted: only ``broadcast-add`` aligns a
trailing-shape operand against a larger one. Everything else demands
exact shapes, which keeps the derivative rules simple and results
bit-reproducible.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError

_F32 = np.float32
_F64 = np.float64
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _all_finite(arr: np.ndarray) -> bool:
    # a float64 sum is finite iff every element is (NaN/Inf propagate and
    # finite float32 values cannot overflow the 64-bit accumulator)
    return bool(np.isfinite(arr.sum(dtype=_F64)))


class Tensor:
    """Immutable dense array of 32-bit reals, row-major."""

    __slots__ = ("_data",)

    def __init__(self, values, *, _wrap: bool = False):
        if _wrap:
            arr = values  # engine-internal arrays, already validated
        else:
            arr = np.ascontiguousarray(np.array(values, copy=True), dtype=_F32)
            if not _all_finite(arr):
                raise NumericError("tensor holds non-finite values")
        if any(n < 1 for n in arr.shape):
            raise ContractError(f"tensor extents must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying float32 array."""
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def copy_array(self) -> np.ndarray:
        """Writable float32 copy of the stored values."""
        return np.array(self._data, dtype=_F32, copy=True)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _wrap_output(arr: np.ndarray, kind: str) -> Tensor:
    arr = np.ascontiguousarray(arr, dtype=_F32)
    if not _all_finite(arr):
        raise NumericError(f"'{kind}' produced non-finite values")
    return Tensor(arr, _wrap=True)


def _shape_fail(kind: str, shapes, why: str = "incompatible shapes"):
    raise ContractError(f"'{kind}': {why}: {list(shapes)}")


class Node:
    """One recorded operation: op kind, input node ids, output, saved state."""

    __slots__ = ("kind", "inputs", "output", "ctx", "params")

    def __init__(self, kind, inputs, output, ctx, params):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.ctx = ctx
        self.params = params


class Tape:
    """Topologically ordered record of operations for one computation.

    Single-owner: never share a live tape across concurrent tasks. The
    tensors it holds are immutable and safe to read from anywhere.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._ids: Dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, tensor: Tensor) -> int:
        """Register a leaf tensor and return its node id."""
        return self._ensure(tensor)

    def node_id(self, tensor: Tensor) -> int:
        nid = self._ids.get(id(tensor))
        if nid is None:
            raise ContractError("tensor is not recorded on this tape")
        return nid

    def apply(self, kind: str, *inputs: Tensor, **params) -> Tensor:
        return apply_primitive(kind, inputs, self, **params)

    def _ensure(self, tensor: Tensor) -> int:
        if not isinstance(tensor, Tensor):
            raise ContractError(f"expected Tensor, got {type(tensor).__name__}")
        nid = self._ids.get(id(tensor))
        if nid is None:
            nid = self._record(Node("leaf", (), tensor, None, None))
        return nid

    def _record(self, node: Node) -> int:
        nid = len(self.nodes)
        self.nodes.append(node)
        self._ids[id(node.output)] = nid
        return nid


# --------------------------------------------------------------------------
# primitive rules
#
# forward(arrays, params) -> (out_array, ctx)
# vjp(g, arrays, out, ctx, params) -> per-input gradient arrays (None = skip)
# --------------------------------------------------------------------------


class _Rule:
    __slots__ = ("forward", "vjp")

    def __init__(self, forward: Callable, vjp: Callable):
        self.forward = forward
        self.vjp = vjp


_OPS: Dict[str, _Rule] = {}


def _op(kind):
    def deco(pair):
        fwd, bwd = pair()
        _OPS[kind] = _Rule(fwd, bwd)
        return pair

    return deco


def _need(kind, arrays, n):
    if len(arrays) != n:
        raise ContractError(f"'{kind}' takes {n} inputs, got {len(arrays)}")


@_op("add")
def _add():
    def fwd(arrays, params):
        _need("add", arrays, 2)
        a, b = arrays
        if a.shape != b.shape:
            _shape_fail("add", (a.shape, b.shape))
        return a + b, None

    def bwd(g, arrays, out, ctx, params):
        return [g, g]

    return fwd, bwd


@_op("sub")
def _sub():
    def fwd(arrays, params):
        _need("sub", arrays, 2)
        a, b = arrays
        if a.shape != b.shape:
            _shape_fail("sub", (a.shape, b.shape))
        return a - b, None

    def bwd(g, arrays, out, ctx, params):
        return [g, -g]

    return fwd, bwd


@_op("elementwise-mul")
def _mul():
    def fwd(arrays, params):
        _need("elementwise-mul", arrays, 2)
        a, b = arrays
        if a.shape != b.shape:
            _shape_fail("elementwise-mul", (a.shape, b.shape))
        return a * b, None

    def bwd(g, arrays, out, ctx, params):
        a, b = arrays
        return [g * b, g * a]

    return fwd, bwd


@_op("scalar-mul")
def _smul():
    def fwd(arrays, params):
        _need("scalar-mul", arrays, 1)
        c = _F32(params["c"])
        return arrays[0] * c, None

    def bwd(g, arrays, out, ctx, params):
        return [g * _F32(params["c"])]

    return fwd, bwd


@_op("matmul")
def _matmul():
    def fwd(arrays, params):
        _need("matmul", arrays, 2)
        a, b = arrays
        ok = (
            (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
            or (a.ndim == 3 and b.ndim == 2 and a.shape[2] == b.shape[0])
            or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
        )
        if not ok:
            _shape_fail("matmul", (a.shape, b.shape))
        return np.matmul(a, b), None

    def bwd(g, arrays, out, ctx, params):
        a, b = arrays
        if a.ndim == 2 and b.ndim == 2:
            return [g @ b.T, a.T @ g]
        if a.ndim == 3 and b.ndim == 2:
            ga = np.matmul(g, b.T)
            gb = np.tensordot(a, g, axes=([0, 1], [0, 1]))
            return [ga, gb]
        ga = np.matmul(g, b.transpose(0, 2, 1))
        gb = np.matmul(a.transpose(0, 2, 1), g)
        return [ga, gb]

    return fwd, bwd


@_op("transpose")
def _transpose():
    def fwd(arrays, params):
        _need("transpose", arrays, 1)
        a = arrays[0]
        axes = params.get("axes")
        if axes is None:
            if a.ndim != 2:
                _shape_fail("transpose", (a.shape,), "axes required for ndim != 2")
            axes = (1, 0)
        axes = tuple(int(x) for x in axes)
        if sorted(axes) != list(range(a.ndim)):
            _shape_fail("transpose", (a.shape,), f"bad permutation {axes}")
        return np.transpose(a, axes), axes

    def bwd(g, arrays, out, ctx, params):
        inv = tuple(int(i) for i in np.argsort(ctx))
        return [np.ascontiguousarray(np.transpose(g, inv))]

    return fwd, bwd


@_op("reshape")
def _reshape():
    def fwd(arrays, params):
        _need("reshape", arrays, 1)
        a = arrays[0]
        shape = tuple(int(x) for x in params["shape"])
        if int(np.prod(shape)) != a.size or any(n < 1 for n in shape):
            _shape_fail("reshape", (a.shape,), f"cannot reshape to {shape}")
        return a.reshape(shape), None

    def bwd(g, arrays, out, ctx, params):
        return [g.reshape(arrays[0].shape)]

    return fwd, bwd


@_op("concat")
def _concat():
    def fwd(arrays, params):
        if not arrays:
            raise ContractError("'concat' needs at least one input")
        axis = int(params["axis"])
        base = arrays[0]
        if not 0 <= axis < base.ndim:
            _shape_fail("concat", [a.shape for a in arrays], f"axis {axis} out of range")
        for a in arrays:
            if a.ndim != base.ndim:
                _shape_fail("concat", [x.shape for x in arrays])
            for d in range(base.ndim):
                if d != axis and a.shape[d] != base.shape[d]:
                    _shape_fail("concat", [x.shape for x in arrays])
        return np.concatenate(arrays, axis=axis), None

    def bwd(g, arrays, out, ctx, params):
        axis = int(params["axis"])
        sizes = [a.shape[axis] for a in arrays]
        cuts = np.cumsum(sizes)[:-1]
        return [np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis)]

    return fwd, bwd


@_op("slice")
def _slice():
    def fwd(arrays, params):
        _need("slice", arrays, 1)
        a = arrays[0]
        axis, start, stop = int(params["axis"]), int(params["start"]), int(params["stop"])
        if not (0 <= axis < a.ndim and 0 <= start < stop <= a.shape[axis]):
            _shape_fail("slice", (a.shape,), f"bad slice axis={axis} [{start}:{stop}]")
        idx = tuple(slice(start, stop) if d == axis else slice(None) for d in range(a.ndim))
        return np.ascontiguousarray(a[idx]), idx

    def bwd(g, arrays, out, ctx, params):
        full = np.zeros(arrays[0].shape, dtype=_F32)
        full[ctx] = g
        return [full]

    return fwd, bwd


@_op("sum")
def _sum():
    def fwd(arrays, params):
        _need("sum", arrays, 1)
        return np.asarray(arrays[0].sum(dtype=_F64), dtype=_F32), None

    def bwd(g, arrays, out, ctx, params):
        return [np.full(arrays[0].shape, _F32(g.reshape(-1)[0]), dtype=_F32)]

    return fwd, bwd


@_op("mean")
def _mean():
    def fwd(arrays, params):
        _need("mean", arrays, 1)
        return np.asarray(arrays[0].mean(dtype=_F64), dtype=_F32), None

    def bwd(g, arrays, out, ctx, params):
        a = arrays[0]
        return [np.full(a.shape, _F32(g.reshape(-1)[0] / a.size), dtype=_F32)]

    return fwd, bwd


@_op("softmax")
def _softmax():
    def fwd(arrays, params):
        _need("softmax", arrays, 1)
        x = arrays[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        s = e / e.sum(axis=-1, keepdims=True, dtype=_F64).astype(_F32)
        return s, s

    def bwd(g, arrays, out, ctx, params):
        s = ctx
        gs = g * s
        dx = gs - s * gs.sum(axis=-1, keepdims=True, dtype=_F64).astype(_F32)
        return [dx]

    return fwd, bwd


@_op("layer-norm")
def _layer_norm():
    def fwd(arrays, params):
        _need("layer-norm", arrays, 3)
        x, w, b = arrays
        d = x.shape[-1]
        if w.shape != (d,) or b.shape != (d,):
            _shape_fail("layer-norm", (x.shape, w.shape, b.shape))
        eps = float(params.get("eps", 1e-5))
        mu = x.mean(axis=-1, keepdims=True, dtype=_F64).astype(_F32)
        diff = x - mu
        var = (diff * diff).mean(axis=-1, keepdims=True, dtype=_F64)
        inv = (1.0 / np.sqrt(var + eps)).astype(_F32)
        xhat = diff * inv
        out = xhat * w + b
        return out, (xhat, inv)

    def bwd(g, arrays, out, ctx, params):
        x, w, b = arrays
        xhat, inv = ctx
        gxh = g * w
        m1 = gxh.mean(axis=-1, keepdims=True, dtype=_F64).astype(_F32)
        m2 = (gxh * xhat).mean(axis=-1, keepdims=True, dtype=_F64).astype(_F32)
        dx = inv * (gxh - m1 - xhat * m2)
        lead = tuple(range(x.ndim - 1))
        dw = (g * xhat).sum(axis=lead, dtype=_F64).astype(_F32)
        db = g.sum(axis=lead, dtype=_F64).astype(_F32)
        return [dx, dw, db]

    return fwd, bwd


@_op("gelu")
def _gelu():
    def fwd(arrays, params):
        _need("gelu", arrays, 1)
        x = arrays[0]
        out = _F32(0.5) * x * (_F32(1.0) + erf(x * _F32(_INV_SQRT2)))
        return out, None

    def bwd(g, arrays, out, ctx, params):
        x = arrays[0]
        cdf = _F32(0.5) * (_F32(1.0) + erf(x * _F32(_INV_SQRT2)))
        pdf = _F32(_INV_SQRT_2PI) * np.exp(_F32(-0.5) * x * x)
        return [g * (cdf + x * pdf)]

    return fwd, bwd


@_op("relu")
def _relu():
    def fwd(arrays, params):
        _need("relu", arrays, 1)
        return np.maximum(arrays[0], _F32(0)), None

    def bwd(g, arrays, out, ctx, params):
        return [g * (arrays[0] > 0)]

    return fwd, bwd


@_op("l2-norm")
def _l2_norm():
    def fwd(arrays, params):
        _need("l2-norm", arrays, 1)
        a = arrays[0].astype(_F64)
        n = np.sqrt((a * a).sum())
        return np.asarray(n, dtype=_F32), n

    def bwd(g, arrays, out, ctx, params):
        n = ctx
        if n == 0.0:
            return [np.zeros(arrays[0].shape, dtype=_F32)]
        scale = g.reshape(-1)[0].astype(_F64) / n
        return [(arrays[0].astype(_F64) * scale).astype(_F32)]

    return fwd, bwd


@_op("dot")
def _dot():
    def fwd(arrays, params):
        _need("dot", arrays, 2)
        a, b = arrays
        if a.shape != b.shape:
            _shape_fail("dot", (a.shape, b.shape))
        v = (a.astype(_F64) * b.astype(_F64)).sum()
        return np.asarray(v, dtype=_F32), None

    def bwd(g, arrays, out, ctx, params):
        a, b = arrays
        s = _F32(g.reshape(-1)[0])
        return [s * b, s * a]

    return fwd, bwd


@_op("cosine-similarity")
def _cosine():
    def fwd(arrays, params):
        _need("cosine-similarity", arrays, 2)
        a, b = arrays
        if a.shape != b.shape or a.ndim != 1:
            _shape_fail("cosine-similarity", (a.shape, b.shape), "expects two equal-length vectors")
        a64, b64 = a.astype(_F64), b.astype(_F64)
        na = np.sqrt((a64 * a64).sum())
        nb = np.sqrt((b64 * b64).sum())
        if na == 0.0 or nb == 0.0:
            # undefined at a zero vector; defined here as 0 with zero gradient
            return np.asarray(0.0, dtype=_F32), None
        c = (a64 * b64).sum() / (na * nb)
        return np.asarray(c, dtype=_F32), (na, nb, c)

    def bwd(g, arrays, out, ctx, params):
        a, b = arrays
        if ctx is None:
            z = np.zeros(a.shape, dtype=_F32)
            return [z, z.copy()]
        na, nb, c = ctx
        s = float(g.reshape(-1)[0])
        a64, b64 = a.astype(_F64), b.astype(_F64)
        da = s * (b64 / (na * nb) - c * a64 / (na * na))
        db = s * (a64 / (na * nb) - c * b64 / (nb * nb))
        return [da.astype(_F32), db.astype(_F32)]

    return fwd, bwd


@_op("broadcast-add")
def _broadcast_add():
    def fwd(arrays, params):
        _need("broadcast-add", arrays, 2)
        a, b = arrays
        if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
            _shape_fail("broadcast-add", (a.shape, b.shape), "second operand must match trailing shape")
        return a + b, None

    def bwd(g, arrays, out, ctx, params):
        a, b = arrays
        lead = tuple(range(a.ndim - b.ndim))
        gb = g.sum(axis=lead, dtype=_F64).astype(_F32) if lead else g
        return [g, gb]

    return fwd, bwd


@_op("atcs")
def _atcs():
    # Per-token cosine similarity averaged over tokens; fused so a full
    # token matrix costs one node instead of one slice+cosine per token.
    def fwd(arrays, params):
        _need("atcs", arrays, 2)
        a, b = arrays
        if a.shape != b.shape or a.ndim not in (2, 3):
            _shape_fail("atcs", (a.shape, b.shape), "expects matching (T,d) or (B,T,d)")
        na = np.sqrt((a * a).sum(axis=-1, dtype=_F64))
        nb = np.sqrt((b * b).sum(axis=-1, dtype=_F64))
        dots = (a * b).sum(axis=-1, dtype=_F64)
        denom = na * nb
        valid = denom > 0.0
        cos = np.where(valid, dots / np.where(valid, denom, 1.0), 0.0)
        out = cos.mean(axis=-1)
        return np.asarray(out, dtype=_F32), (na, nb, cos, valid)

    def bwd(g, arrays, out, ctx, params):
        a, b = arrays
        na, nb, cos, valid = ctx
        t_count = a.shape[-2]
        g64 = np.asarray(g, dtype=_F64)
        if a.ndim == 3:
            g64 = g64[:, None]
        coef = np.where(valid, g64 / t_count, 0.0)[..., None].astype(_F32)
        na_s = np.where(valid, na, 1.0)[..., None]
        nb_s = np.where(valid, nb, 1.0)[..., None]
        inv_ab = (1.0 / (na_s * nb_s)).astype(_F32)
        ca = (cos[..., None] / (na_s * na_s)).astype(_F32)
        cb = (cos[..., None] / (nb_s * nb_s)).astype(_F32)
        da = coef * (b * inv_ab - a * ca)
        db = coef * (a * inv_ab - b * cb)
        return [da, db]

    return fwd, bwd


@_op("cross-entropy")
def _cross_entropy():
    # labels ride in params (not differentiable). (C,) + int -> scalar loss;
    # (B,C) + (B,) ints -> mean loss over the batch.
    def fwd(arrays, params):
        _need("cross-entropy", arrays, 1)
        logits = arrays[0]
        y = np.asarray(params["labels"], dtype=np.int64)
        if logits.ndim == 1:
            if y.ndim != 0:
                _shape_fail("cross-entropy", (logits.shape,), "scalar label expected")
            y = y.reshape(1)
            l2d = logits.reshape(1, -1)
        elif logits.ndim == 2:
            if y.shape != (logits.shape[0],):
                _shape_fail("cross-entropy", (logits.shape, y.shape))
            l2d = logits
        else:
            _shape_fail("cross-entropy", (logits.shape,))
        if (y < 0).any() or (y >= l2d.shape[1]).any():
            raise ContractError(f"cross-entropy label out of range for {l2d.shape[1]} classes")
        x = l2d.astype(_F64)
        m = x.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
        picked = x[np.arange(x.shape[0]), y]
        loss = (lse - picked).mean()
        sm = np.exp(x - m)
        sm /= sm.sum(axis=1, keepdims=True)
        return np.asarray(loss, dtype=_F32), (sm, y)

    def bwd(g, arrays, out, ctx, params):
        logits = arrays[0]
        sm, y = ctx
        grad = sm.copy()
        grad[np.arange(grad.shape[0]), y] -= 1.0
        grad *= float(g.reshape(-1)[0]) / grad.shape[0]
        return [grad.astype(_F32).reshape(logits.shape)]

    return fwd, bwd


#: kinds accepted by :func:`apply_primitive`. "atcs" and "cross-entropy" are
#: fused composites recorded through the same machinery as the primitives.
PRIMITIVE_KINDS = tuple(_OPS.keys())


def apply_primitive(kind: str, inputs: Sequence[Tensor], tape: Tape, **params) -> Tensor:
    """Evaluate one primitive and record it on ``tape``.

    Raises ContractError for unknown kinds or shape mismatches (naming the
    kind and shapes), NumericError when the output is non-finite. Inputs
    are never mutated.
    """
    rule = _OPS.get(kind)
    if rule is None:
        raise ContractError(f"unknown primitive kind '{kind}'")
    tensors = list(inputs)
    ids = tuple(tape._ensure(t) for t in tensors)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, ctx = rule.forward([t.data for t in tensors], params)
    result = _wrap_output(out, kind)  # non-finite values become NumericError here
    tape._record(Node(kind, ids, result, ctx, params))
    return result


def backward(
    tape: Tape, root: int, wanted: Optional[Sequence[int]] = None
) -> Dict[int, Tensor]:
    """Gradients of the scalar node ``root`` w.r.t. nodes on the tape.

    By default the map covers every node; nodes with no path to the root
    get exact zero tensors. ``wanted`` restricts the returned map to the
    given node ids (the sweep is unchanged). Deterministic: repeated
    calls on the same tape produce bit-identical results.
    """
    nodes = tape.nodes
    if not 0 <= root < len(nodes):
        raise ContractError(f"root node id {root} is not on the tape")
    if nodes[root].output.size != 1:
        raise ContractError(
            f"backward root must be scalar, got shape {nodes[root].output.shape}"
        )
    grads: List[Optional[np.ndarray]] = [None] * len(nodes)
    grads[root] = np.ones(nodes[root].output.shape, dtype=_F32)
    for nid in range(root, -1, -1):
        g = grads[nid]
        node = nodes[nid]
        if g is None or node.kind == "leaf":
            continue
        arrays = [nodes[i].output.data for i in node.inputs]
        vjps = _OPS[node.kind].vjp(g, arrays, node.output.data, node.ctx, node.params)
        for iid, vg in zip(node.inputs, vjps):
            if vg is None:
                continue
            if grads[iid] is None:
                grads[iid] = np.ascontiguousarray(vg, dtype=_F32)
            else:
                grads[iid] = grads[iid] + vg
    ids = range(len(nodes)) if wanted is None else wanted
    out: Dict[int, Tensor] = {}
    for nid in ids:
        g = grads[nid]
        if g is None:
            g = np.zeros(nodes[nid].output.shape, dtype=_F32)
        if not _all_finite(g):
            raise NumericError(f"gradient of node {nid} ('{nodes[nid].kind}') is non-finite")
        out[nid] = Tensor(np.ascontiguousarray(g), _wrap=True)
    return out


def finite_difference_gradient(
    f: Callable[[Tensor], float], x: Tensor, h: float = 1e-3
) -> Tensor:
    """Central-difference gradient of a scalar function, the testing oracle.

    (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.
    """
    if not h > 0:
        raise ContractError(f"finite difference step must be positive, got {h}")
    base = x.copy_array()
    flat = base.reshape(-1)
    grad = np.zeros(flat.shape, dtype=_F64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(flat[i])  # realized float32 step, not the nominal one
        fp = float(f(Tensor(base)))
        flat[i] = orig - h
        lo = float(flat[i])
        fm = float(f(Tensor(base)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"objective returned non-finite value at coordinate {i}")
        grad[i] = (fp - fm) / (hi - lo)
    return _wrap_output(grad.reshape(x.shape).astype(_F32), "finite-difference")
