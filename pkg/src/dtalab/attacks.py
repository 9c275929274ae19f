"""Feature-space attacks crafted on a pre-trained backbone.

The flagship attack lowers the average token cosine similarity (ATCS)
between clean and adversarial features. It first hits layer 1 with a
short, coarse schedule; if the achieved similarity is still above a
threshold it probes the middle-to-deep layers jointly, ranks them by
achieved per-layer similarity, and re-attacks the most vulnerable N
from scratch. NRDM (feature distortion at a fixed layer) and a
universal-perturbation generator trained to inflate feature norms are
included as baselines.

All optimizers are sign-based steps projected onto the L-inf ball
around the clean image intersected with the valid pixel range. The
ball bounds are nudged by ulps so that ``x_adv - x`` never exceeds
epsilon even in 32-bit arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, NumericError
from .rng import substream
from .tensor import Tape, Tensor, apply_primitive, backward
from .vit import Backbone, FeatureMap, forward_batch, measure_batch

_F32 = np.float32

LOSS_KINDS = ("atcs", "l1", "l2", "l3", "l4")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 10.0 / 255.0
    eta_shallow: float = 0.05
    steps_shallow: int = 3
    eta_deep: float = 0.02
    steps_deep: int = 20
    gamma: float = 0.25
    n_select: int = 4
    loss_kind: str = "atcs"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ContractError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.eta_shallow <= 0 or self.eta_deep <= 0:
            raise ContractError("step sizes must be positive")
        if self.steps_shallow < 1 or self.steps_deep < 1:
            raise ContractError("step counts must be >= 1")
        if not -1.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must be in [-1, 1], got {self.gamma}")
        if self.n_select < 1:
            raise ContractError("n_select must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss kind must be one of {LOSS_KINDS}, got '{self.loss_kind}'")


@dataclass
class AttackResult:
    x_adv: Tensor
    delta: Tensor
    stage: str  # "shallow-only" | "multi-layer"
    atcs_per_layer: Dict[int, float]
    selected_layers: Tuple[int, ...]
    stage1_final_atcs: float
    # stage-2 diagnostics, populated only on the multi-layer path
    stage2_losses: Optional[Dict[int, float]] = None
    stage2_x: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# similarity measurements
# ---------------------------------------------------------------------------


def _token_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    na = np.sqrt((a64 * a64).sum(axis=-1))
    nb = np.sqrt((b64 * b64).sum(axis=-1))
    denom = na * nb
    valid = denom > 0.0
    return np.where(valid, (a64 * b64).sum(axis=-1) / np.where(valid, denom, 1.0), 0.0)


def atcs_arrays(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-token cosine similarity between two token matrices."""
    if a.shape != b.shape:
        raise ContractError(f"atcs: shape mismatch {a.shape} vs {b.shape}")
    return float(_token_cosines(a, b).mean())


def atcs(a: FeatureMap, b: FeatureMap) -> float:
    """Average token cosine similarity of two same-layer feature maps."""
    if a.layer != b.layer:
        raise ContractError(f"atcs: layer mismatch {a.layer} vs {b.layer}")
    return atcs_arrays(a.tokens.data, b.tokens.data)


def _flat_cos(a: np.ndarray, b: np.ndarray) -> float:
    a64, b64 = a.reshape(-1).astype(np.float64), b.reshape(-1).astype(np.float64)
    na, nb = np.linalg.norm(a64), np.linalg.norm(b64)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a64 @ b64 / (na * nb))


def loss_value(kind: str, fx: FeatureMap, fxadv: FeatureMap) -> float:
    """Scalar loss under the selected objective.

    "atcs" is the mean token cosine; "l1" the negated flattened cosine
    and "l3" the negated dot product, as conventionally written; "l2"
    (feature distance) and "l4" (adversarial feature norm) are negated
    so that, like the others, more feature damage means a lower value.
    """
    if kind not in LOSS_KINDS:
        raise ContractError(f"unknown loss kind '{kind}'")
    a, b = fx.tokens.data, fxadv.tokens.data
    if a.shape != b.shape:
        raise ContractError(f"loss '{kind}': shape mismatch {a.shape} vs {b.shape}")
    if kind == "atcs":
        return atcs_arrays(a, b)
    if kind == "l1":
        return -_flat_cos(a, b)
    if kind == "l2":
        return -float(np.linalg.norm(a.astype(np.float64) - b.astype(np.float64)))
    if kind == "l3":
        return -float(a.astype(np.float64).reshape(-1) @ b.astype(np.float64).reshape(-1))
    return -float(np.linalg.norm(b.astype(np.float64)))


def _loss_values_batch(kind: str, clean: np.ndarray, adv: np.ndarray) -> np.ndarray:
    """Per-sample loss values for (B,T,d) clean/adversarial features."""
    if kind == "atcs":
        return _token_cosines(clean, adv).mean(axis=-1)
    b = clean.shape[0]
    flat_c = clean.reshape(b, -1).astype(np.float64)
    flat_a = adv.reshape(b, -1).astype(np.float64)
    if kind == "l1":
        na = np.linalg.norm(flat_c, axis=1)
        nb = np.linalg.norm(flat_a, axis=1)
        denom = na * nb
        valid = denom > 0.0
        cos = np.where(valid, (flat_c * flat_a).sum(axis=1) / np.where(valid, denom, 1.0), 0.0)
        return -cos
    if kind == "l2":
        return -np.linalg.norm(flat_c - flat_a, axis=1)
    if kind == "l3":
        return -(flat_c * flat_a).sum(axis=1)
    return -np.linalg.norm(flat_a, axis=1)


def _sim_from_loss(kind: str, values: np.ndarray) -> np.ndarray:
    # similarity framing: lower always means the features moved further.
    # l1/l3 carry a conventional minus sign, so flip them back.
    return -values if kind in ("l1", "l3") else values


# ---------------------------------------------------------------------------
# projection helpers
# ---------------------------------------------------------------------------


def ball_bounds(x: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel [lo, hi] for the eps-ball around x intersected with [0,1].

    Bounds are tightened by ulps until (hi - x) <= eps and (x - lo) <= eps
    hold in float32, so any projected point satisfies the budget bit-exactly.
    """
    e = _F32(eps)
    x = np.ascontiguousarray(x, dtype=_F32)
    lo = x - e
    hi = x + e
    for _ in range(4):
        over = (hi - x) > e
        if not over.any():
            break
        hi[over] = np.nextafter(hi[over], _F32(-np.inf))
    for _ in range(4):
        over = (x - lo) > e
        if not over.any():
            break
        lo[over] = np.nextafter(lo[over], _F32(np.inf))
    np.maximum(lo, _F32(0.0), out=lo)
    np.minimum(hi, _F32(1.0), out=hi)
    return lo, hi


def _init_noise(rng: np.random.Generator, shape, eps: float) -> np.ndarray:
    return rng.uniform(-eps, eps, size=shape).astype(_F32)


def uniform_noise_baseline(x: np.ndarray, eps: float, seed: int, index: int = 0) -> np.ndarray:
    """clip(x + U(-eps, eps), ball, [0,1]): the no-optimization control."""
    lo, hi = ball_bounds(x, eps)
    noise = _init_noise(substream(seed, "noise-baseline", index), x.shape, eps)
    return np.clip((x + noise).astype(_F32), lo, hi)


# ---------------------------------------------------------------------------
# PGD core (batched; samples never mix gradients)
# ---------------------------------------------------------------------------


def _sim_vector(tape: Tape, kind: str, clean: np.ndarray, adv: Tensor) -> Tensor:
    """(B,)-shaped per-sample similarity-framed objective on the tape."""
    def ap(op, *ts, **kw):
        return apply_primitive(op, ts, tape, **kw)

    if kind == "atcs":
        return ap("atcs", Tensor(clean), adv)
    b = clean.shape[0]
    parts = []
    for i in range(b):
        row = ap("slice", adv, axis=0, start=i, stop=i + 1)
        if kind == "l1":
            flat = ap("reshape", row, shape=(row.size,))
            ref = Tensor(clean[i].reshape(-1))
            s = ap("cosine-similarity", flat, ref)
        elif kind == "l2":
            diff = ap("sub", row, Tensor(clean[i:i + 1]))
            s = ap("scalar-mul", ap("l2-norm", diff), c=-1.0)
        elif kind == "l3":
            s = ap("dot", row, Tensor(clean[i:i + 1]))
        else:  # l4
            s = ap("scalar-mul", ap("l2-norm", row), c=-1.0)
        parts.append(ap("reshape", s, shape=(1,)))
    return parts[0] if b == 1 else ap("concat", *parts, axis=0)


def _pgd_core(
    backbone: Backbone,
    xs: np.ndarray,
    clean_feats: List[np.ndarray],
    layer_weights: Dict[int, np.ndarray],
    kind: str,
    eps: float,
    eta: float,
    steps: int,
    noise: np.ndarray,
    snapshot: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Sign-descent on the summed per-sample objective, projected each step."""
    depth = backbone.config.depth
    for layer in layer_weights:
        if not 1 <= layer <= depth:
            raise ContractError(f"attack layer {layer} outside 1..{depth}")
    if steps < 1:
        raise ContractError("steps must be >= 1")
    lo, hi = ball_bounds(xs, eps)
    xa = np.clip((xs + noise).astype(_F32), lo, hi)
    if snapshot is not None:
        snapshot(0, xa)
    eta32 = _F32(eta)
    for t in range(1, steps + 1):
        tape = Tape()
        x_t = Tensor(xa)
        x_node = tape.watch(x_t)
        try:
            rec = forward_batch(backbone, x_t, tape)
            total = None
            for layer, weights in layer_weights.items():
                vec = _sim_vector(tape, kind, clean_feats[layer - 1], rec.features[layer - 1])
                masked = apply_primitive("elementwise-mul", (vec, Tensor(weights)), tape)
                term = apply_primitive("sum", (masked,), tape)
                total = term if total is None else apply_primitive("add", (total, term), tape)
            grads = backward(tape, tape.node_id(total), wanted=(x_node,))
            g = grads[x_node].data
        except NumericError as err:
            raise NumericError(f"attack step {t}: {err}") from err
        xa = np.clip(xa - eta32 * np.sign(g), lo, hi)
        if snapshot is not None:
            snapshot(t, xa)
    return xa


def _uniform_weights(layers: Sequence[int], batch: int) -> Dict[int, np.ndarray]:
    return {int(k): np.ones(batch, dtype=_F32) for k in layers}


def _stage_noise(cfg_seed: int, stage: str, indices: Sequence[int], shape, eps) -> np.ndarray:
    rows = [
        _init_noise(substream(cfg_seed, "attack", int(i), stage), shape, eps)
        for i in indices
    ]
    return np.stack(rows)


def pgd_minimize(
    model: Backbone,
    x: Tensor,
    layer_set: Sequence[int],
    kind: str,
    eps: float,
    eta: float,
    steps: int,
    seed: int,
    snapshot: Optional[Callable[[int, np.ndarray], None]] = None,
) -> Tuple[Tensor, Dict[int, float]]:
    """Projected sign descent of the summed objective over ``layer_set``.

    Starts from x plus seeded uniform noise, keeps iterates inside the
    eps-ball around x and inside [0,1]. Returns the adversarial image
    and each attacked layer's final loss value.
    """
    layers = [int(k) for k in layer_set]
    if not layers:
        raise ContractError("layer_set must be nonempty")
    if kind not in LOSS_KINDS:
        raise ContractError(f"unknown loss kind '{kind}'")
    xs = x.data[None] if x.ndim == 3 else None
    if xs is None:
        raise ContractError(f"expected a (C,S,S) image, got {x.shape}")
    _check_image_range(xs)
    _, clean_feats = measure_batch(model, xs)
    noise = _stage_noise(seed, "pgd", [0], x.shape, eps)
    wrapped = None if snapshot is None else (lambda t, xa: snapshot(t, xa[0]))
    xa = _pgd_core(
        model, xs, clean_feats, _uniform_weights(layers, 1), kind,
        eps, eta, steps, noise, wrapped,
    )
    _, adv_feats = measure_batch(model, xa)
    finals = {
        k: float(_loss_values_batch(kind, clean_feats[k - 1], adv_feats[k - 1])[0])
        for k in layers
    }
    return Tensor(xa[0]), finals


def _check_image_range(xs: np.ndarray):
    if xs.min() < 0.0 or xs.max() > 1.0:
        raise ContractError("attack input must lie in [0, 1]")


def deep_layer_range(depth: int) -> Tuple[int, ...]:
    """Middle-to-deep probe set: floor(depth/3) .. depth (floored at 1)."""
    return tuple(range(max(1, depth // 3), depth + 1))


def select_vulnerable(sims: Dict[int, float], n: int) -> Tuple[int, ...]:
    """The n layers with the smallest achieved similarity, ties to lower index."""
    ranked = sorted(sims.items(), key=lambda kv: (kv[1], kv[0]))
    return tuple(sorted(k for k, _ in ranked[: min(n, len(ranked))]))


def dta_attack(model: Backbone, x: Tensor, cfg: AttackConfig) -> AttackResult:
    """Two-phase vulnerable-layer attack on a single image."""
    return dta_attack_many(model, x.data[None], cfg, indices=[0])[0]


def dta_attack_many(
    model: Backbone,
    xs: np.ndarray,
    cfg: AttackConfig,
    indices: Optional[Sequence[int]] = None,
    batch_size: int = 16,
) -> List[AttackResult]:
    """Vectorized per-sample attacks; gradients never mix across samples.

    ``indices`` name each sample's RNG stream (defaults to 0..N-1), so
    results do not depend on how samples are grouped into batches.
    """
    xs = np.ascontiguousarray(xs, dtype=_F32)
    _check_image_range(xs)
    if indices is None:
        indices = list(range(xs.shape[0]))
    if len(indices) != xs.shape[0]:
        raise ContractError("indices must name every sample")
    results: List[Optional[AttackResult]] = [None] * xs.shape[0]
    for start in range(0, xs.shape[0], batch_size):
        chunk = slice(start, min(start + batch_size, xs.shape[0]))
        for offset, res in enumerate(_dta_batch(model, xs[chunk], cfg, indices[chunk])):
            results[start + offset] = res
    return results  # type: ignore[return-value]


def _dta_batch(
    model: Backbone, xs: np.ndarray, cfg: AttackConfig, indices: Sequence[int]
) -> List[AttackResult]:
    depth = model.config.depth
    kind = cfg.loss_kind
    b = xs.shape[0]
    shape = xs.shape[1:]
    _, clean_feats = measure_batch(model, xs)

    # phase 1: the shallowest layer, short coarse schedule
    noise1 = _stage_noise(cfg.seed, "stage1", indices, shape, cfg.epsilon)
    xa1 = _pgd_core(
        model, xs, clean_feats, _uniform_weights([1], b), kind,
        cfg.epsilon, cfg.eta_shallow, cfg.steps_shallow, noise1,
    )
    _, feats1 = measure_batch(model, xa1)
    l1_vals = _loss_values_batch(kind, clean_feats[0], feats1[0])
    shallow_done = l1_vals < cfg.gamma

    results: List[Optional[AttackResult]] = [None] * b
    for i in np.flatnonzero(shallow_done):
        results[i] = _make_result(
            xs[i], xa1[i], "shallow-only", (1,), float(l1_vals[i]),
            clean_feats, model, i,
        )
    todo = np.flatnonzero(~shallow_done)
    if todo.size == 0:
        return results  # type: ignore[return-value]

    sub_xs = np.ascontiguousarray(xs[todo])
    sub_idx = [indices[int(i)] for i in todo]
    sub_clean = [np.ascontiguousarray(f[todo]) for f in clean_feats]
    probe = deep_layer_range(depth)
    n_eff = min(cfg.n_select, len(probe))

    # phase 2: probe middle-to-deep layers jointly
    noise2 = _stage_noise(cfg.seed, "stage2", sub_idx, shape, cfg.epsilon)
    xa2 = _pgd_core(
        model, sub_xs, sub_clean, _uniform_weights(probe, todo.size), kind,
        cfg.epsilon, cfg.eta_deep, cfg.steps_deep, noise2,
    )
    _, feats2 = measure_batch(model, xa2)
    stage2_loss = {
        k: _loss_values_batch(kind, sub_clean[k - 1], feats2[k - 1]) for k in probe
    }
    stage2_sim = {k: _sim_from_loss(kind, v) for k, v in stage2_loss.items()}

    # phase 3: fresh start on each sample's own most-vulnerable set
    selections = [
        select_vulnerable({k: float(stage2_sim[k][j]) for k in probe}, n_eff)
        for j in range(todo.size)
    ]
    weights: Dict[int, np.ndarray] = {}
    for j, sel in enumerate(selections):
        for k in sel:
            weights.setdefault(k, np.zeros(todo.size, dtype=_F32))[j] = 1.0
    noise3 = _stage_noise(cfg.seed, "stage3", sub_idx, shape, cfg.epsilon)
    xa3 = _pgd_core(
        model, sub_xs, sub_clean, weights, kind,
        cfg.epsilon, cfg.eta_deep, cfg.steps_deep, noise3,
    )
    for j, i in enumerate(todo):
        res = _make_result(
            xs[i], xa3[j], "multi-layer", selections[j], float(l1_vals[i]),
            clean_feats, model, int(i),
        )
        res.stage2_losses = {k: float(stage2_loss[k][j]) for k in probe}
        res.stage2_x = xa2[j].copy()
        results[int(i)] = res
    return results  # type: ignore[return-value]


def _make_result(
    x: np.ndarray,
    xa: np.ndarray,
    stage: str,
    selected: Tuple[int, ...],
    stage1_loss: float,
    clean_feats: List[np.ndarray],
    model: Backbone,
    batch_index: int,
) -> AttackResult:
    _, adv_feats = measure_batch(model, xa[None])
    per_layer = {
        k + 1: atcs_arrays(clean_feats[k][batch_index], adv_feats[k][0])
        for k in range(len(clean_feats))
    }
    return AttackResult(
        x_adv=Tensor(xa),
        delta=Tensor((xa - x).astype(_F32)),
        stage=stage,
        atcs_per_layer=per_layer,
        selected_layers=tuple(selected),
        stage1_final_atcs=stage1_loss,
    )


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def nrdm_default_layer(depth: int) -> int:
    """Fixed attack layer used by the feature-distortion baseline."""
    return max(1, round(2 * depth / 3))


def nrdm_attack(
    model: Backbone,
    x: Tensor,
    k: int,
    eps: float,
    eta: float,
    steps: int,
    seed: int,
) -> Tensor:
    """Sign ascent on the L2 distortion of layer k's feature map."""
    return Tensor(nrdm_attack_many(model, x.data[None], k, eps, eta, steps, seed, [0])[0])


def nrdm_attack_many(
    model: Backbone,
    xs: np.ndarray,
    k: int,
    eps: float,
    eta: float,
    steps: int,
    seed: int,
    indices: Optional[Sequence[int]] = None,
    batch_size: int = 16,
) -> np.ndarray:
    xs = np.ascontiguousarray(xs, dtype=_F32)
    _check_image_range(xs)
    if not 1 <= k <= model.config.depth:
        raise ContractError(f"layer {k} outside 1..{model.config.depth}")
    if indices is None:
        indices = list(range(xs.shape[0]))
    out = np.empty_like(xs)
    for start in range(0, xs.shape[0], batch_size):
        chunk = slice(start, min(start + batch_size, xs.shape[0]))
        sub = xs[chunk]
        _, clean = measure_batch(model, sub)
        noise = _stage_noise(seed, "nrdm", indices[chunk], xs.shape[1:], eps)
        out[chunk] = _pgd_core(
            model, sub, clean, _uniform_weights([k], sub.shape[0]), "l2",
            eps, eta, steps, noise,
        )
    return out


def pap_uap(
    model: Backbone,
    batches: Sequence[np.ndarray],
    k: int,
    eps: float,
    eta: float,
    epochs: int,
    seed: int,
) -> Tensor:
    """Universal perturbation: sign ascent on the batch-mean feature norm
    of layer k, projected to the eps-ball after every step."""
    if not batches:
        raise ContractError("pap_uap needs at least one batch")
    shape = batches[0].shape[1:]
    for b in batches:
        if b.ndim != 4 or b.shape[1:] != shape:
            raise ContractError("pap_uap batches must share one (B,C,S,S) shape")
    if not 1 <= k <= model.config.depth:
        raise ContractError(f"layer {k} outside 1..{model.config.depth}")
    eps32 = _F32(eps)
    delta = _init_noise(substream(seed, "pap-init"), shape, eps)
    for _ in range(int(epochs)):
        for batch in batches:
            tape = Tape()
            d_t = Tensor(delta)
            d_node = tape.watch(d_t)
            xb = apply_primitive("broadcast-add", (Tensor(batch), d_t), tape)
            rec = forward_batch(model, xb, tape)
            feat = rec.features[k - 1]
            total = None
            for i in range(batch.shape[0]):
                row = apply_primitive("slice", (feat,), tape, axis=0, start=i, stop=i + 1)
                n = apply_primitive("l2-norm", (row,), tape)
                total = n if total is None else apply_primitive("add", (total, n), tape)
            mean = apply_primitive("scalar-mul", (total,), tape, c=1.0 / batch.shape[0])
            grads = backward(tape, tape.node_id(mean), wanted=(d_node,))
            g = grads[d_node].data
            delta = np.clip(delta + _F32(eta) * np.sign(g), -eps32, eps32)
    return Tensor(delta)


def apply_uap(xs: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Add a universal perturbation and clamp back to valid pixels."""
    return np.clip((xs + delta).astype(_F32), _F32(0.0), _F32(1.0))
