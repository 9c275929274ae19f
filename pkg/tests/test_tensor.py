"""Tensor engine: forward rules, gradient correctness, determinism."""

import numpy as np
import pytest

from dtalab.errors import ContractError, NumericError
from dtalab.tensor import (
    PRIMITIVE_KINDS,
    Tape,
    Tensor,
    apply_primitive,
    backward,
    finite_difference_gradient,
)


def ap(tape, kind, *tensors, **params):
    return apply_primitive(kind, tensors, tape, **params)


def grad_metrics(auto: np.ndarray, ref: np.ndarray):
    a = auto.astype(np.float64).ravel()
    r = ref.astype(np.float64).ravel()
    na, nr = np.linalg.norm(a), np.linalg.norm(r)
    cos = 1.0 if na == 0 and nr == 0 else float(a @ r / max(na * nr, 1e-300))
    rel = np.abs(a - r) / np.maximum(np.abs(r), 1e-6)
    return cos, float((rel < 1e-2).mean())


def projection(rng, size):
    """Random scalarizing weights bounded away from zero, so per-coordinate
    relative error against the finite-difference oracle stays meaningful."""
    return (rng.uniform(0.5, 1.5, size=size) * rng.choice([-1.0, 1.0], size=size)).astype(
        np.float32
    )


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------


def test_add_example():
    t = Tape()
    out = ap(t, "add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, np.array([4.0, 6.0], dtype=np.float32))


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 2)).astype(np.float32)
    t = Tape()
    out = ap(t, "matmul", Tensor(np.eye(2, dtype=np.float32)), Tensor(a))
    assert np.allclose(out.data, a)


def test_softmax_symmetry():
    t = Tape()
    out = ap(t, "softmax", Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_shape_mismatch_names_kind():
    t = Tape()
    with pytest.raises(ContractError, match="matmul"):
        ap(t, "matmul", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ContractError, match="add"):
        ap(t, "add", Tensor([1.0]), Tensor([1.0, 2.0]))


def test_unknown_kind_rejected():
    with pytest.raises(ContractError, match="unknown primitive"):
        ap(Tape(), "convolve", Tensor([1.0]))


def test_non_finite_output_is_numeric_error():
    t = Tape()
    big = ap(t, "scalar-mul", Tensor([1e20]), c=1e10)  # 1e30, still finite
    with pytest.raises(NumericError, match="scalar-mul"):
        ap(t, "scalar-mul", big, c=1e10)  # overflows float32


def test_inputs_never_mutated():
    rng = np.random.default_rng(1)
    a_src = rng.normal(size=(3, 4)).astype(np.float32)
    b_src = rng.normal(size=(3, 4)).astype(np.float32)
    a, b = Tensor(a_src), Tensor(b_src)
    t = Tape()
    for kind in ("add", "sub", "elementwise-mul", "dot"):
        ap(t, kind, a, b)
    ap(t, "softmax", a)
    ap(t, "relu", a)
    assert np.array_equal(a.data, a_src)
    assert np.array_equal(b.data, b_src)
    with pytest.raises(ValueError):
        a.data[0, 0] = 5.0  # tensors are read-only


def test_cosine_zero_vector_convention():
    t = Tape()
    c = ap(t, "cosine-similarity", Tensor([0.0, 0.0]), Tensor([1.0, 2.0]))
    assert c.item() == 0.0
    root = ap(t, "scalar-mul", c, c=1.0)
    grads = backward(t, t.node_id(root))
    for nid in range(len(t.nodes)):
        if t.nodes[nid].kind == "leaf":
            assert not grads[nid].data.any()


# ---------------------------------------------------------------------------
# backward basics
# ---------------------------------------------------------------------------


def test_sum_gradient_is_ones():
    t = Tape()
    x = Tensor([1.0, 2.0, 3.0])
    root = ap(t, "sum", x)
    g = backward(t, t.node_id(root))[t.node_id(x)]
    assert np.array_equal(g.data, np.ones(3, dtype=np.float32))


def test_dot_gradient_is_other_operand():
    t = Tape()
    x = Tensor([0.5, -1.5])
    w = Tensor([2.0, -1.0])
    root = ap(t, "dot", x, w)
    grads = backward(t, t.node_id(root))
    assert np.array_equal(grads[t.node_id(x)].data, np.array([2.0, -1.0], dtype=np.float32))
    assert np.array_equal(grads[t.node_id(w)].data, np.array([0.5, -1.5], dtype=np.float32))


def test_backward_requires_scalar_root():
    t = Tape()
    x = Tensor([1.0, 2.0])
    y = ap(t, "relu", x)
    with pytest.raises(ContractError, match="scalar"):
        backward(t, t.node_id(y))


def test_unreachable_node_gets_zero_gradient():
    t = Tape()
    x = Tensor([1.0, 2.0])
    y = Tensor([3.0, 4.0])
    unused = ap(t, "relu", y)
    root = ap(t, "sum", x)
    grads = backward(t, t.node_id(root))
    assert not grads[t.node_id(unused)].data.any()
    assert not grads[t.node_id(y)].data.any()


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(3)
    t = Tape()
    x = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    w = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    h = ap(t, "gelu", ap(t, "matmul", x, w))
    root = ap(t, "mean", ap(t, "softmax", h))
    g1 = backward(t, t.node_id(root))
    g2 = backward(t, t.node_id(root))
    for nid in g1:
        assert np.array_equal(g1[nid].data, g2[nid].data)


# ---------------------------------------------------------------------------
# finite differences: oracle self-checks, then per-primitive gradient checks
# ---------------------------------------------------------------------------


def test_fd_linear_exact():
    fd = finite_difference_gradient(
        lambda v: float(v.data.astype(np.float64).sum()), Tensor([1.0, 2.0, -0.5]), 1e-3
    )
    assert np.allclose(fd.data, 1.0, atol=1e-6)


def test_fd_quadratic():
    fd = finite_difference_gradient(lambda v: float(v.data[0]) ** 2, Tensor([3.0]), 1e-3)
    assert abs(fd.item() - 6.0) < 1e-5


def test_fd_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_difference_gradient(lambda v: 0.0, Tensor([1.0]), 0.0)


def _case_inputs(kind, rng):
    """Representative input set + params for each primitive kind.

    Ops whose loss value is a single float32 scalar (norms, dots) get
    inputs bounded away from zero: the stored-scalar quantization puts a
    floor of ~ulp(|f|)/2h under the oracle, and coordinates whose true
    gradient sits below that floor say nothing about the derivative rule.
    """
    n = lambda *s: rng.normal(size=s).astype(np.float32)
    b = lambda *s: projection(rng, s)  # signed, |value| in [0.5, 1.5]
    if kind in ("add", "sub", "elementwise-mul"):
        return [n(6, 8), n(6, 8)], {}
    if kind == "scalar-mul":
        return [n(6, 8)], {"c": -1.7}
    if kind == "matmul":
        return [n(5, 6), n(6, 4)], {}
    if kind == "transpose":
        return [n(3, 4, 5)], {"axes": (2, 0, 1)}
    if kind == "reshape":
        return [n(4, 6)], {"shape": (3, 8)}
    if kind == "concat":
        return [n(4, 5), n(4, 3)], {"axis": 1}
    if kind == "slice":
        return [n(5, 8)], {"axis": 1, "start": 1, "stop": 6}
    if kind in ("sum", "mean", "softmax", "relu", "gelu"):
        return [n(6, 10)], {}
    if kind == "l2-norm":
        return [b(4, 6)], {}
    if kind == "dot":
        return [b(5, 6), b(5, 6)], {}
    if kind == "cosine-similarity":
        return [b(12), b(12)], {}
    if kind == "layer-norm":
        return [n(5, 8), n(8), n(8)], {"eps": 1e-5}
    if kind == "broadcast-add":
        return [n(3, 4, 6), n(6)], {}
    if kind == "atcs":
        return [b(6, 8), b(6, 8)], {}
    if kind == "cross-entropy":
        return [n(8)], {"labels": 2}
    raise AssertionError(f"no case for {kind}")


@pytest.mark.parametrize("kind", PRIMITIVE_KINDS)
def test_primitive_gradients_match_finite_differences(kind):
    """Backward on a random scalar projection of every primitive agrees
    with central differences: cosine > 0.999 per draw, and 95% of all
    checked coordinates within 1e-2 relative error (pooled over draws,
    since the float32 forward puts a hard noise floor under the oracle)."""
    rels = []
    for draw in range(3):
        rng = np.random.default_rng((hash(kind) + draw) % 2**32)
        arrays, params = _case_inputs(kind, rng)

        # fixed random projection to scalarize non-scalar outputs
        t_probe = Tape()
        probe_out = apply_primitive(kind, [Tensor(a) for a in arrays], t_probe, **params)
        weights = projection(rng, probe_out.size)

        def build(tape, tensors):
            out = apply_primitive(kind, tensors, tape, **params)
            if out.size == 1:
                return apply_primitive("scalar-mul", (out,), tape, c=1.0)
            flat = apply_primitive("reshape", (out,), tape, shape=(out.size,))
            return apply_primitive("dot", (flat, Tensor(weights)), tape)

        for slot in range(len(arrays)):
            tape = Tape()
            tensors = [Tensor(a) for a in arrays]
            root = build(tape, tensors)
            auto = backward(tape, tape.node_id(root))[tape.node_id(tensors[slot])].data

            def f(xt, _slot=slot):
                t2 = Tape()
                ts = [Tensor(a) for a in arrays]
                ts[_slot] = xt
                return build(t2, ts).item()

            ref = finite_difference_gradient(f, Tensor(arrays[slot]), 1e-3).data
            cos, _ = grad_metrics(auto, ref)
            assert cos > 0.999, f"{kind} draw {draw} input {slot}: cosine {cos}"
            a64 = auto.astype(np.float64).ravel()
            r64 = ref.astype(np.float64).ravel()
            rels.append(np.abs(a64 - r64) / np.maximum(np.abs(r64), 1e-6))
    pooled = np.concatenate(rels)
    frac = float((pooled < 1e-2).mean())
    assert frac >= 0.95, f"{kind}: only {frac:.1%} of coordinates within 1e-2"


def test_batched_matmul_gradients():
    rng = np.random.default_rng(11)
    for shapes in (((2, 3, 4), (4, 2)), ((2, 3, 4), (2, 4, 2))):
        a = rng.normal(size=shapes[0]).astype(np.float32)
        b = rng.normal(size=shapes[1]).astype(np.float32)
        t_probe = Tape()
        out = ap(t_probe, "matmul", Tensor(a), Tensor(b))
        weights = projection(rng, out.size)

        def build(tape, ta, tb):
            out = ap(tape, "matmul", ta, tb)
            flat = ap(tape, "reshape", out, shape=(out.size,))
            return ap(tape, "dot", flat, Tensor(weights))

        tape = Tape()
        ta, tb = Tensor(a), Tensor(b)
        root = build(tape, ta, tb)
        grads = backward(tape, tape.node_id(root))
        for tensor, arr in ((ta, a), (tb, b)):
            def f(xt, _t=tensor):
                t2 = Tape()
                xs = {id(ta): Tensor(a), id(tb): Tensor(b)}
                xs[id(_t)] = xt
                return build(t2, xs[id(ta)], xs[id(tb)]).item()

            ref = finite_difference_gradient(f, Tensor(arr), 1e-3).data
            cos, frac = grad_metrics(grads[tape.node_id(tensor)].data, ref)
            assert cos > 0.999 and frac >= 0.95


def test_batched_atcs_matches_rank2():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4, 6)).astype(np.float32)
    b = rng.normal(size=(3, 4, 6)).astype(np.float32)
    t = Tape()
    vec = ap(t, "atcs", Tensor(a), Tensor(b))
    singles = [ap(Tape(), "atcs", Tensor(a[i]), Tensor(b[i])).item() for i in range(3)]
    assert np.allclose(vec.data, singles, atol=1e-6)


def test_fused_atcs_equals_composed_cosines():
    """The fused token-cosine node must agree (value and gradient) with the
    same quantity composed from slice + cosine-similarity primitives."""
    rng = np.random.default_rng(9)
    a = rng.normal(size=(5, 7)).astype(np.float32)
    b = rng.normal(size=(5, 7)).astype(np.float32)

    t1 = Tape()
    ta1, tb1 = Tensor(a), Tensor(b)
    fused = ap(t1, "atcs", ta1, tb1)
    g_fused = backward(t1, t1.node_id(fused))[t1.node_id(tb1)].data

    t2 = Tape()
    ta2, tb2 = Tensor(a), Tensor(b)
    total = None
    for i in range(a.shape[0]):
        ra = ap(t2, "reshape", ap(t2, "slice", ta2, axis=0, start=i, stop=i + 1), shape=(7,))
        rb = ap(t2, "reshape", ap(t2, "slice", tb2, axis=0, start=i, stop=i + 1), shape=(7,))
        c = ap(t2, "cosine-similarity", ra, rb)
        total = c if total is None else ap(t2, "add", total, c)
    composed = ap(t2, "scalar-mul", total, c=1.0 / a.shape[0])
    g_composed = backward(t2, t2.node_id(composed))[t2.node_id(tb2)].data

    assert abs(fused.item() - composed.item()) < 1e-6
    assert np.allclose(g_fused, g_composed, atol=1e-6)


def test_cross_entropy_node_value_and_gradient():
    logits = np.array([1.0, 2.0], dtype=np.float32)
    t = Tape()
    lt = Tensor(logits)
    loss = ap(t, "cross-entropy", lt, labels=0)
    expected = float(np.log(1.0 + np.e))  # -log softmax([1,2])[0]
    assert abs(loss.item() - expected) < 1e-6
    g = backward(t, t.node_id(loss))[t.node_id(lt)].data
    sm = np.exp(logits) / np.exp(logits).sum()
    assert np.allclose(g, sm - np.array([1.0, 0.0]), atol=1e-6)


def test_random_composite_graphs_gradcheck():
    """Twenty random op chains; autodiff vs finite differences.

    Cosine must hold per graph; the 95%-within-1e-2 statistic pools the
    coordinates of all graphs (a single near-dead relu row in one graph
    would otherwise dominate a 12-coordinate sample).
    """
    rng = np.random.default_rng(2024)
    rels = []
    for trial in range(20):
        x0 = rng.normal(size=(3, 4)).astype(np.float32) * 0.8
        w = rng.normal(size=(4, 4)).astype(np.float32) * 0.8
        bias = rng.normal(size=4).astype(np.float32)
        ln_w = np.ones(4, dtype=np.float32)
        ln_b = np.zeros(4, dtype=np.float32)
        ops = rng.choice(["gelu", "relu", "softmax", "layer-norm"], size=3)
        proj = projection(rng, 12)

        def build(tape, xt):
            h = ap(tape, "matmul", xt, Tensor(w))
            h = ap(tape, "broadcast-add", h, Tensor(bias))
            for op in ops:
                if op == "layer-norm":
                    h = ap(tape, op, h, Tensor(ln_w), Tensor(ln_b))
                else:
                    h = ap(tape, op, h)
            flat = ap(tape, "reshape", h, shape=(12,))
            return ap(tape, "dot", flat, Tensor(proj))

        tape = Tape()
        xt = Tensor(x0)
        root = build(tape, xt)
        auto = backward(tape, tape.node_id(root))[tape.node_id(xt)].data
        ref = finite_difference_gradient(lambda v: build(Tape(), v).item(), Tensor(x0), 1e-3).data
        cos, _ = grad_metrics(auto, ref)
        assert cos > 0.999, f"trial {trial}: cos {cos}"
        a64 = auto.astype(np.float64).ravel()
        r64 = ref.astype(np.float64).ravel()
        rels.append(np.abs(a64 - r64) / np.maximum(np.abs(r64), 1e-6))
    pooled = np.concatenate(rels)
    frac = float((pooled < 1e-2).mean())
    assert frac >= 0.95, f"pooled fraction within 1e-2: {frac:.1%}"


def test_tensor_rejects_nan_and_empty():
    with pytest.raises(NumericError):
        Tensor([np.nan])
    with pytest.raises(ContractError):
        Tensor(np.zeros((0, 2), dtype=np.float32))
