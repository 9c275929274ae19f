"""Supervised pretraining, downstream fine-tuning, and adversarial fine-tuning.

Pretraining here is a deliberately small supervised stand-in for
large-scale pretraining: it only has to produce a backbone whose
features the downstream models inherit. Fine-tuning comes in three
flavors: full (everything trains), LoRA (frozen backbone, low-rank
attention updates plus head), and the parallel bottleneck adapter
(frozen backbone, adapters plus head).

Adversarial fine-tuning replaces every training image with an
adversarial example crafted against the *pre-trained* backbone, which
is the model the attacker is assumed to hold. Because that backbone is
fixed and per-sample noise streams are keyed by sample index, the
examples are generated once up front; regenerating them each epoch
would produce the identical batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from . import attacks
from .dataset import LabeledData
from .errors import ContractError, NumericError, TrainingError
from .rng import substream
from .tensor import Tape, Tensor, apply_primitive, backward
from .vit import (
    Adapters,
    Backbone,
    ModelConfig,
    ViTParams,
    _trunc_normal,
    forward_batch,
    init_adaptformer,
    init_lora,
    init_params,
    predict,
)

_F32 = np.float32

MODES = ("pretrain", "full", "lora", "adaptformer")
GENERATORS = ("dta", "pap")


@dataclass(frozen=True)
class AdversarialSpec:
    """How to build the adversarial training batches."""

    eps_train: float = 4.0 / 255.0
    steps: int = 10
    eta: float = 0.03
    generator: str = "dta"

    def __post_init__(self):
        if self.eps_train < 0:
            raise ContractError("eps_train must be >= 0")
        if self.generator not in GENERATORS:
            raise ContractError(f"generator must be one of {GENERATORS}")

    def to_dict(self) -> dict:
        return {
            "eps_train": self.eps_train,
            "steps": self.steps,
            "eta": self.eta,
            "generator": self.generator,
        }


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    adversarial: Optional[AdversarialSpec] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.mode == "pretrain" and self.adversarial is not None:
            raise ContractError("pretraining does not take an adversarial config")

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
        }
        if self.adversarial is not None:
            out["adversarial"] = self.adversarial.to_dict()
        return out


@dataclass
class Checkpoint:
    """A trained model plus how it came to be."""

    config: ModelConfig
    params: ViTParams
    adapters: Adapters
    head_classes: int
    provenance: dict

    @property
    def backbone(self) -> Backbone:
        return Backbone(self.params, self.adapters)


def cross_entropy(tape: Tape, logits: Tensor, y: int) -> Tensor:
    """-log softmax(logits)[y], recorded on the tape."""
    if logits.ndim != 1:
        raise ContractError(f"cross_entropy expects a logits vector, got {logits.shape}")
    if not 0 <= int(y) < logits.shape[0]:
        raise ContractError(f"label {y} out of range for {logits.shape[0]} classes")
    return apply_primitive("cross-entropy", (logits,), tape, labels=int(y))


class Adam:
    """Standard Adam; weight decay (if any) is the classic L2 term on the gradient."""

    def __init__(self, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = _F32(lr)
        self.wd = _F32(weight_decay)
        self.b1 = _F32(beta1)
        self.b2 = _F32(beta2)
        self.eps = _F32(eps)
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def begin_step(self):
        self.t += 1

    def update(self, name: str, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.wd > 0:
            g = g + self.wd * w
        m = self._m.get(name)
        if m is None:
            m = np.zeros_like(w)
            self._m[name] = m
            self._v[name] = np.zeros_like(w)
        v = self._v[name]
        m[...] = self.b1 * m + (_F32(1) - self.b1) * g
        v[...] = self.b2 * v + (_F32(1) - self.b2) * (g * g)
        mhat = m / (_F32(1) - self.b1 ** self.t)
        vhat = v / (_F32(1) - self.b2 ** self.t)
        return (w - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(_F32)


def _accuracy(backbone: Backbone, data: LabeledData) -> float:
    return float((predict(backbone, data.images) == data.labels).mean())


def _train_loop(
    backbone: Backbone,
    trainable: Iterable[str],
    data: LabeledData,
    tcfg: TrainConfig,
) -> None:
    """Adam on mean cross-entropy; mutates the backbone's arrays in place.

    Trainable names use the forward_batch key convention: plain names for
    backbone tensors, "adapter:" prefix for adapter tensors.
    """
    trainable = list(trainable)
    opt = Adam(tcfg.learning_rate, tcfg.weight_decay)
    n = data.images.shape[0]
    for epoch in range(tcfg.epochs):
        order = substream(tcfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            xb = np.ascontiguousarray(data.images[idx])
            yb = data.labels[idx]
            tape = Tape()
            try:
                rec = forward_batch(backbone, Tensor(xb), tape, watch_params=True)
                loss = apply_primitive("cross-entropy", (rec.logits,), tape, labels=yb)
                grads = backward(
                    tape, tape.node_id(loss),
                    wanted=[rec.param_nodes[n] for n in trainable],
                )
            except NumericError as err:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {start // tcfg.batch_size}: {err}"
                ) from err
            opt.begin_step()
            for name in trainable:
                g = grads[rec.param_nodes[name]].data
                if name.startswith("adapter:"):
                    bag, key = backbone.adapters, name[len("adapter:"):]
                else:
                    bag, key = backbone.params, name
                bag.tensors[key] = opt.update(name, bag.tensors[key], g)


def _backbone_names(params: ViTParams) -> list:
    return params.names()


def _adapter_names(adapters: Adapters) -> list:
    return ["adapter:" + n for n in adapters.names()] if adapters is not None else []


def pretrain_supervised(config: ModelConfig, data: LabeledData, tcfg: TrainConfig) -> Checkpoint:
    """Train every backbone weight from scratch on labeled data."""
    if tcfg.mode != "pretrain":
        raise ContractError("pretrain_supervised requires mode='pretrain'")
    if data.num_classes != config.num_classes:
        raise ContractError(
            f"dataset has {data.num_classes} classes but config expects {config.num_classes}"
        )
    params = init_params(config, tcfg.seed)
    backbone = Backbone(params, None)
    _train_loop(backbone, _backbone_names(params), data, tcfg)
    acc = _accuracy(backbone, data)
    return Checkpoint(
        config=config,
        params=params,
        adapters=None,
        head_classes=config.num_classes,
        provenance={
            "mode": "pretrain",
            "parent_hash": None,
            "train_config": tcfg.to_dict(),
            "metrics": {"train_accuracy": acc},
            "seed": tcfg.seed,
        },
    )


def _fresh_head(params: ViTParams, config: ModelConfig, num_classes: int, seed: int) -> ViTParams:
    new_config = replace(config, num_classes=num_classes)
    tensors = params.copy_tensors()
    rng = substream(seed, "init", "head")
    tensors["head.w"] = _trunc_normal(rng, (config.embed_dim, num_classes))
    tensors["head.b"] = np.zeros(num_classes, dtype=_F32)
    return ViTParams(new_config, tensors)


def finetune(
    pretrained: Checkpoint,
    mode: str,
    data: LabeledData,
    tcfg: TrainConfig,
    val_data: Optional[LabeledData] = None,
    lora_rank: int = 4,
    lora_alpha: float = 8.0,
    adapter_bottleneck: int = 16,
    adapter_scale: float = 0.1,
    _train_data_override: Optional[LabeledData] = None,
) -> Checkpoint:
    """Adapt a pretrained backbone to a (possibly different) label space.

    full: everything trains. lora / adaptformer: the backbone is frozen
    and only the adapters plus the re-initialized head train.
    """
    if mode not in ("full", "lora", "adaptformer"):
        raise ContractError(f"finetune mode must be full|lora|adaptformer, got '{mode}'")
    if tcfg.mode != mode:
        raise ContractError(f"tcfg.mode '{tcfg.mode}' does not match requested mode '{mode}'")
    params = _fresh_head(pretrained.params, pretrained.config, data.num_classes, tcfg.seed)
    config = params.config
    if mode == "full":
        adapters: Adapters = None
        trainable = _backbone_names(params)
    elif mode == "lora":
        adapters = init_lora(config, tcfg.seed, rank=lora_rank, alpha=lora_alpha)
        trainable = _adapter_names(adapters) + ["head.w", "head.b"]
    else:
        adapters = init_adaptformer(
            config, tcfg.seed, bottleneck=adapter_bottleneck, scale=adapter_scale
        )
        trainable = _adapter_names(adapters) + ["head.w", "head.b"]
    backbone = Backbone(params, adapters)
    train_data = _train_data_override if _train_data_override is not None else data
    _train_loop(backbone, trainable, train_data, tcfg)
    from .store import content_hash  # local import: store serializes Checkpoints

    metrics = {"train_accuracy": _accuracy(backbone, train_data)}
    if val_data is not None:
        metrics["val_accuracy"] = _accuracy(backbone, val_data)
    return Checkpoint(
        config=config,
        params=params,
        adapters=adapters,
        head_classes=data.num_classes,
        provenance={
            "mode": mode,
            "parent_hash": content_hash(pretrained),
            "train_config": tcfg.to_dict(),
            "metrics": metrics,
            "seed": tcfg.seed,
        },
    )


def adversarial_inputs(
    pretrained: Checkpoint, data: LabeledData, adv: AdversarialSpec, seed: int
) -> np.ndarray:
    """Adversarial versions of every training image, crafted on the
    pre-trained backbone (the model the attacker is assumed to know)."""
    if adv.eps_train == 0:
        return data.images.copy()
    backbone = pretrained.backbone
    if adv.generator == "dta":
        cfg = attacks.AttackConfig(
            epsilon=adv.eps_train,
            eta_deep=adv.eta,
            steps_deep=adv.steps,
            seed=seed,
        )
        results = attacks.dta_attack_many(backbone, data.images, cfg)
        return np.stack([r.x_adv.data for r in results])
    batches = [
        data.images[i:i + 64] for i in range(0, data.images.shape[0], 64)
    ]
    delta = attacks.pap_uap(
        backbone, batches, k=1, eps=adv.eps_train, eta=adv.eta,
        epochs=adv.steps, seed=seed,
    )
    return attacks.apply_uap(data.images, delta.data)


def adversarial_finetune(
    pretrained: Checkpoint,
    mode: str,
    data: LabeledData,
    tcfg: TrainConfig,
    **finetune_kwargs,
) -> Checkpoint:
    """Fine-tune on adversarial examples instead of the clean images."""
    if tcfg.adversarial is None:
        raise ContractError("adversarial_finetune requires tcfg.adversarial")
    adv = tcfg.adversarial
    if adv.eps_train == 0:
        return finetune(pretrained, mode, data, tcfg, **finetune_kwargs)
    x_adv = adversarial_inputs(pretrained, data, adv, tcfg.seed)
    adv_data = LabeledData(x_adv, data.labels, data.num_classes)
    ckpt = finetune(
        pretrained, mode, data, tcfg, _train_data_override=adv_data, **finetune_kwargs
    )
    ckpt.provenance["adversarial_generator"] = adv.generator
    return ckpt
