"""A small configurable ViT classifier exposing every block's token output.

The backbone is the standard pre-norm encoder: patch embedding, class
token, learned positional embedding, then ``depth`` blocks of
multi-head self-attention and GELU MLP with residual connections. A
block's "output" is the residual stream after its second residual add,
before any later normalization.

Adapters: LoRA (rank-r updates on the Q and V projections) and a
bottleneck adapter running parallel to the MLP sub-block, scaled by a
constant. Both are exact identities at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ContractError
from .rng import substream
from .tensor import Tape, Tensor, apply_primitive

_F32 = np.float32


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_hidden: int
    num_classes: int
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ContractError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ContractError("embed_dim must be divisible by num_heads")
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if min(self.num_classes, self.mlp_hidden, self.channels) < 1:
            raise ContractError("num_classes, mlp_hidden and channels must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        """Patch tokens plus the class token."""
        return self.grid * self.grid + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> Dict[str, int]:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "mlp_hidden": self.mlp_hidden,
            "num_classes": self.num_classes,
            "channels": self.channels,
        }


#: desk-scale default used across the experiments (T=17)
DESK_CONFIG = dict(
    image_size=32, patch_size=8, embed_dim=64, depth=6, num_heads=4,
    mlp_hidden=128, num_classes=10, channels=3,
)


def param_schema(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) schema of all backbone tensors."""
    d, hid = config.embed_dim, config.mlp_hidden
    schema: List[Tuple[str, Tuple[int, ...]]] = [
        ("patch_embed.w", (config.patch_dim, d)),
        ("patch_embed.b", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (config.tokens, d)),
    ]
    for i in range(config.depth):
        p = f"blocks.{i}."
        schema += [
            (p + "ln1.w", (d,)),
            (p + "ln1.b", (d,)),
            (p + "qkv.w", (d, 3 * d)),
            (p + "qkv.b", (3 * d,)),
            (p + "proj.w", (d, d)),
            (p + "proj.b", (d,)),
            (p + "ln2.w", (d,)),
            (p + "ln2.b", (d,)),
            (p + "mlp.w1", (d, hid)),
            (p + "mlp.b1", (hid,)),
            (p + "mlp.w2", (hid, d)),
            (p + "mlp.b2", (d,)),
        ]
    schema += [
        ("ln_f.w", (d,)),
        ("ln_f.b", (d,)),
        ("head.w", (d, config.num_classes)),
        ("head.b", (config.num_classes,)),
    ]
    return schema


class _TensorBag:
    """Ordered name -> float32 ndarray store validated against a schema."""

    def __init__(self, schema, tensors: Dict[str, np.ndarray]):
        self._schema = list(schema)
        expected = {name: tuple(shape) for name, shape in self._schema}
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ContractError(f"tensor set mismatch: missing={missing} extra={extra}")
        self.tensors: Dict[str, np.ndarray] = {}
        for name, _ in self._schema:
            arr = np.ascontiguousarray(tensors[name], dtype=_F32)
            if arr.shape != expected[name]:
                raise ContractError(
                    f"tensor '{name}' has shape {arr.shape}, expected {expected[name]}"
                )
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> List[str]:
        return [name for name, _ in self._schema]

    def items(self):
        return ((name, self.tensors[name]) for name, _ in self._schema)

    def copy_tensors(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.tensors.items()}


class ViTParams(_TensorBag):
    """All learnable backbone weights for a given ModelConfig."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, np.ndarray]):
        self.config = config
        super().__init__(param_schema(config), tensors)

    def copy(self) -> "ViTParams":
        return ViTParams(self.config, self.copy_tensors())


def lora_schema(config: ModelConfig, rank: int) -> List[Tuple[str, Tuple[int, ...]]]:
    d = config.embed_dim
    schema = []
    for i in range(config.depth):
        for proj in ("q", "v"):
            schema.append((f"blocks.{i}.{proj}.down", (rank, d)))
            schema.append((f"blocks.{i}.{proj}.up", (d, rank)))
    return schema


class LoRAParams(_TensorBag):
    """Rank-r additive updates for the Q and V projections of every block."""

    def __init__(self, config: ModelConfig, rank: int, alpha: float, tensors):
        if rank < 1 or rank > config.embed_dim:
            raise ContractError(f"lora rank must be in [1, {config.embed_dim}], got {rank}")
        self.config = config
        self.rank = int(rank)
        self.alpha = float(alpha)
        super().__init__(lora_schema(config, rank), tensors)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def copy(self) -> "LoRAParams":
        return LoRAParams(self.config, self.rank, self.alpha, self.copy_tensors())


def adaptformer_schema(config: ModelConfig, bottleneck: int):
    d = config.embed_dim
    schema = []
    for i in range(config.depth):
        schema.append((f"blocks.{i}.down", (d, bottleneck)))
        schema.append((f"blocks.{i}.up", (bottleneck, d)))
    return schema


class AdaptFormerParams(_TensorBag):
    """Bottleneck adapter applied in parallel with each block's MLP."""

    def __init__(self, config: ModelConfig, bottleneck: int, scale: float, tensors):
        if bottleneck < 1:
            raise ContractError("adapter bottleneck must be >= 1")
        self.config = config
        self.bottleneck = int(bottleneck)
        self.scale = float(scale)
        super().__init__(adaptformer_schema(config, bottleneck), tensors)

    def copy(self) -> "AdaptFormerParams":
        return AdaptFormerParams(self.config, self.bottleneck, self.scale, self.copy_tensors())


Adapters = Union[LoRAParams, AdaptFormerParams, None]


@dataclass(frozen=True)
class Backbone:
    """Read-only bundle handed to attacks and evaluation."""

    params: ViTParams
    adapters: Adapters = None

    @property
    def config(self) -> ModelConfig:
        return self.params.config


@dataclass
class FeatureMap:
    """Token matrix output of one transformer block (1-based layer index)."""

    layer: int
    tokens: Tensor

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ContractError(f"feature map must be (T, d), got {self.tokens.shape}")


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0) -> np.ndarray:
    """Normal(0, std) resampled until within +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    limit = bound * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out.astype(_F32)


def init_params(config: ModelConfig, seed: int) -> ViTParams:
    """Deterministic init: matrices and embeddings from a truncated normal
    (sigma=0.02, cut at 2 sigma), biases zero, layer-norm affine identity."""
    rng = substream(seed, "init", "backbone")
    tensors = {}
    for name, shape in param_schema(config):
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("ln") or ".ln" in name:
            tensors[name] = (np.ones if leaf == "w" else np.zeros)(shape, dtype=_F32)
        elif leaf in ("b", "b1", "b2"):
            tensors[name] = np.zeros(shape, dtype=_F32)
        else:
            tensors[name] = _trunc_normal(rng, shape)
    return ViTParams(config, tensors)


def init_lora(config: ModelConfig, seed: int, rank: int = 4, alpha: float = 8.0) -> LoRAParams:
    """Down matrices from the truncated normal, up matrices zero (identity start)."""
    rng = substream(seed, "init", "lora")
    tensors = {}
    for name, shape in lora_schema(config, rank):
        if name.endswith(".up"):
            tensors[name] = np.zeros(shape, dtype=_F32)
        else:
            tensors[name] = _trunc_normal(rng, shape)
    return LoRAParams(config, rank, alpha, tensors)


def init_adaptformer(
    config: ModelConfig, seed: int, bottleneck: int = 16, scale: float = 0.1
) -> AdaptFormerParams:
    """Down projections from the truncated normal, up projections zero."""
    rng = substream(seed, "init", "adaptformer")
    tensors = {}
    for name, shape in adaptformer_schema(config, bottleneck):
        if name.endswith(".up"):
            tensors[name] = np.zeros(shape, dtype=_F32)
        else:
            tensors[name] = _trunc_normal(rng, shape)
    return AdaptFormerParams(config, bottleneck, scale, tensors)


class ForwardRecord:
    """Tape-side handles from one batched forward pass."""

    __slots__ = ("logits", "features", "x_node", "param_nodes")

    def __init__(self, logits, features, x_node, param_nodes):
        self.logits = logits
        self.features = features
        self.x_node = x_node
        self.param_nodes = param_nodes


def forward_batch(
    backbone: Backbone,
    x: Tensor,
    tape: Tape,
    watch_params: bool = False,
) -> ForwardRecord:
    """Forward a (B, C, S, S) batch, recording every op on ``tape``.

    Returns logits (B, num_classes) and the M per-block token tensors
    (B, T, d). When ``watch_params`` is set, param_nodes maps tensor
    names to tape node ids so training can pull weight gradients.
    """
    cfg = backbone.config
    params = backbone.params
    adapters = backbone.adapters
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ContractError(
            f"input batch must be (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), "
            f"got {x.shape}"
        )
    batch = x.shape[0]
    d, heads, dh = cfg.embed_dim, cfg.num_heads, cfg.head_dim

    def ap(kind, *ts, **kw):
        return apply_primitive(kind, ts, tape, **kw)

    leaves: Dict[str, Tensor] = {}
    param_nodes: Dict[str, int] = {}

    def leaf(name: str, owner=params) -> Tensor:
        key = name if owner is params else "adapter:" + name
        t = leaves.get(key)
        if t is None:
            t = Tensor(owner[name])
            leaves[key] = t
            nid = tape.watch(t)
            if watch_params:
                param_nodes[key] = nid
        return t

    x_node = tape.watch(x)

    # patchify: (B,C,S,S) -> (B, P^2, C*p*p)
    g, p = cfg.grid, cfg.patch_size
    h = ap("reshape", x, shape=(batch, cfg.channels, g, p, g, p))
    h = ap("transpose", h, axes=(0, 2, 4, 1, 3, 5))
    h = ap("reshape", h, shape=(batch, g * g, cfg.patch_dim))
    h = ap("matmul", h, leaf("patch_embed.w"))
    h = ap("broadcast-add", h, leaf("patch_embed.b"))

    # class token, tiled across the batch through a ones matmul
    ones = Tensor(np.ones((batch, 1, 1), dtype=_F32))
    cls_row = ap("reshape", leaf("cls_token"), shape=(1, d))
    cls_tok = ap("matmul", ones, cls_row)
    h = ap("concat", cls_tok, h, axis=1)
    h = ap("broadcast-add", h, leaf("pos_embed"))

    features: List[Tensor] = []
    for i in range(cfg.depth):
        blk = f"blocks.{i}."
        a = ap("layer-norm", h, leaf(blk + "ln1.w"), leaf(blk + "ln1.b"))
        qkv = ap("matmul", a, leaf(blk + "qkv.w"))
        qkv = ap("broadcast-add", qkv, leaf(blk + "qkv.b"))
        q = ap("slice", qkv, axis=2, start=0, stop=d)
        k = ap("slice", qkv, axis=2, start=d, stop=2 * d)
        v = ap("slice", qkv, axis=2, start=2 * d, stop=3 * d)
        if isinstance(adapters, LoRAParams):
            for proj, base in (("q", q), ("v", v)):
                down = ap("transpose", leaf(f"blocks.{i}.{proj}.down", adapters))
                up = ap("transpose", leaf(f"blocks.{i}.{proj}.up", adapters))
                delta = ap("matmul", ap("matmul", a, down), up)
                delta = ap("scalar-mul", delta, c=adapters.scale)
                if proj == "q":
                    q = ap("add", base, delta)
                else:
                    v = ap("add", base, delta)
        head_outs = []
        scale = 1.0 / math.sqrt(dh)
        for j in range(heads):
            lo, hi = j * dh, (j + 1) * dh
            qj = ap("slice", q, axis=2, start=lo, stop=hi)
            kj = ap("slice", k, axis=2, start=lo, stop=hi)
            vj = ap("slice", v, axis=2, start=lo, stop=hi)
            scores = ap("matmul", qj, ap("transpose", kj, axes=(0, 2, 1)))
            scores = ap("scalar-mul", scores, c=scale)
            attn = ap("softmax", scores)
            head_outs.append(ap("matmul", attn, vj))
        att = head_outs[0] if heads == 1 else ap("concat", *head_outs, axis=2)
        att = ap("matmul", att, leaf(blk + "proj.w"))
        att = ap("broadcast-add", att, leaf(blk + "proj.b"))
        h = ap("add", h, att)

        m = ap("layer-norm", h, leaf(blk + "ln2.w"), leaf(blk + "ln2.b"))
        m = ap("matmul", m, leaf(blk + "mlp.w1"))
        m = ap("broadcast-add", m, leaf(blk + "mlp.b1"))
        m = ap("gelu", m)
        m = ap("matmul", m, leaf(blk + "mlp.w2"))
        m = ap("broadcast-add", m, leaf(blk + "mlp.b2"))
        out = ap("add", h, m)
        if isinstance(adapters, AdaptFormerParams):
            # parallel branch reads the sub-block input (pre-norm residual)
            ad = ap("matmul", h, leaf(f"blocks.{i}.down", adapters))
            ad = ap("relu", ad)
            ad = ap("matmul", ad, leaf(f"blocks.{i}.up", adapters))
            ad = ap("scalar-mul", ad, c=adapters.scale)
            out = ap("add", out, ad)
        h = out
        features.append(h)

    cls_final = ap("slice", h, axis=1, start=0, stop=1)
    cls_final = ap("reshape", cls_final, shape=(batch, d))
    z = ap("layer-norm", cls_final, leaf("ln_f.w"), leaf("ln_f.b"))
    logits = ap("matmul", z, leaf("head.w"))
    logits = ap("broadcast-add", logits, leaf("head.b"))
    return ForwardRecord(logits, features, x_node, param_nodes)


def forward_with_features(
    params: ViTParams,
    adapters: Adapters,
    x: Tensor,
    tape: Optional[Tape] = None,
) -> Tuple[Tensor, List[FeatureMap]]:
    """Single-image forward pass.

    x is a (C, S, S) image in [0, 1]. Returns the logits vector and one
    FeatureMap per block. Supply a tape to make gradients w.r.t. the
    image (and, via forward_batch, the weights) available.
    """
    cfg = params.config
    if x.ndim != 3 or x.shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ContractError(
            f"image must be ({cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}"
        )
    if float(x.data.min()) < 0.0 or float(x.data.max()) > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    tape = tape if tape is not None else Tape()

    def ap(kind, *ts, **kw):
        return apply_primitive(kind, ts, tape, **kw)

    xb = ap("reshape", x, shape=(1,) + x.shape)
    rec = forward_batch(Backbone(params, adapters), xb, tape)
    logits = ap("reshape", rec.logits, shape=(cfg.num_classes,))
    features = [
        FeatureMap(i + 1, ap("reshape", f, shape=(cfg.tokens, cfg.embed_dim)))
        for i, f in enumerate(rec.features)
    ]
    return logits, features


def merge_lora(params: ViTParams, lora: LoRAParams) -> ViTParams:
    """Fold the adapter into the QKV weights: W_q += scale * (up @ down)^T,
    same for W_v. The merged network computes the adapter-path function."""
    if lora.config.embed_dim != params.config.embed_dim or lora.config.depth != params.config.depth:
        raise ContractError("lora parameters do not match the backbone config")
    d = params.config.embed_dim
    merged = params.copy_tensors()
    for i in range(params.config.depth):
        w = merged[f"blocks.{i}.qkv.w"]
        for proj, col in (("q", 0), ("v", 2 * d)):
            down = lora[f"blocks.{i}.{proj}.down"]
            up = lora[f"blocks.{i}.{proj}.up"]
            delta = (lora.scale * (up.astype(np.float64) @ down.astype(np.float64))).T
            w[:, col:col + d] = (w[:, col:col + d].astype(np.float64) + delta).astype(_F32)
    return ViTParams(params.config, merged)


# ---------------------------------------------------------------------------
# tape-free measurement helpers (shared by attacks, training and evaluation)
# ---------------------------------------------------------------------------


def measure_batch(backbone: Backbone, xs: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Logits and per-block token arrays for a (B,C,S,S) float32 batch."""
    rec = forward_batch(backbone, Tensor(xs), Tape())
    return rec.logits.copy_array(), [f.copy_array() for f in rec.features]


def predict(backbone: Backbone, xs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class per sample, evaluated in fixed-size batches."""
    preds = []
    for i in range(0, xs.shape[0], batch_size):
        logits, _ = measure_batch(backbone, xs[i:i + batch_size])
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)
