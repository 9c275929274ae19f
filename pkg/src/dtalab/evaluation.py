"""Attack success rate, clean accuracy, and the diagnostic analyses.

ASR is untargeted misclassification of the true label over the whole
sample set, including samples the model already gets wrong cleanly; a
filtered rate over the cleanly-correct subset is reported alongside
for analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import attacks
from .dataset import LabeledData
from .errors import ContractError
from .rng import substream
from .tensor import Tensor
from .training import Checkpoint
from .vit import measure_batch, predict

_F32 = np.float32


@dataclass
class SampleRecord:
    id: int
    label: int
    clean_pred: int
    adv_pred: int
    linf: float
    stage: Optional[str] = None
    selected_layers: Optional[Tuple[int, ...]] = None
    atcs_per_layer: Optional[Dict[int, float]] = None

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "label": self.label,
            "clean_pred": self.clean_pred,
            "adv_pred": self.adv_pred,
            "linf": self.linf,
        }
        if self.stage is not None:
            out["stage"] = self.stage
        if self.selected_layers is not None:
            out["selected_layers"] = list(self.selected_layers)
        if self.atcs_per_layer is not None:
            out["atcs_per_layer"] = {str(k): v for k, v in self.atcs_per_layer.items()}
        return out


@dataclass
class EvalReport:
    asr: float
    clean_accuracy: float
    asr_clean_correct: float
    records: List[SampleRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "asr": self.asr,
            "clean_accuracy": self.clean_accuracy,
            "asr_clean_correct": self.asr_clean_correct,
            "records": [r.to_json() for r in self.records],
        }


@dataclass
class CurvePoint:
    layer: int
    step: int
    atcs: float
    asr: float


@dataclass(frozen=True)
class SweepSchedule:
    eps: float = 10.0 / 255.0
    eta: float = 0.02
    steps: int = 20
    seed: int = 0
    kind: str = "atcs"


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=_F32)


def attack_success_rate(downstream: Checkpoint, adv_set: Sequence[Tuple]) -> float:
    """Fraction of (x_adv, y) pairs the model misclassifies."""
    if len(adv_set) == 0:
        raise ContractError("attack_success_rate needs a nonempty sample set")
    xs = np.stack([_as_array(x) for x, _ in adv_set])
    ys = np.asarray([int(y) for _, y in adv_set])
    preds = predict(downstream.backbone, xs)
    return float((preds != ys).mean())


def clean_accuracy(downstream: Checkpoint, dataset: LabeledData) -> float:
    """Fraction of unperturbed samples classified correctly."""
    if len(dataset) == 0:
        raise ContractError("clean_accuracy needs a nonempty dataset")
    preds = predict(downstream.backbone, dataset.images)
    return float((preds == dataset.labels).mean())


def build_eval_report(
    downstream: Checkpoint,
    clean: LabeledData,
    adv_images: np.ndarray,
    eps: float,
    attack_meta: Optional[Sequence[dict]] = None,
) -> EvalReport:
    """Score an adversarial set against its clean counterpart.

    Validates the budget: every perturbation must satisfy ||delta||_inf <= eps.
    """
    if len(clean) == 0:
        raise ContractError("empty evaluation set")
    if adv_images.shape != clean.images.shape:
        raise ContractError(
            f"adversarial set shape {adv_images.shape} does not match clean {clean.images.shape}"
        )
    deltas = adv_images.astype(_F32) - clean.images
    linf = np.abs(deltas).reshape(len(clean), -1).max(axis=1)
    if (linf > _F32(eps)).any():
        worst = int(np.argmax(linf))
        raise ContractError(
            f"sample {worst} exceeds the budget: ||delta||_inf={linf[worst]} > {eps}"
        )
    clean_preds = predict(downstream.backbone, clean.images)
    adv_preds = predict(downstream.backbone, adv_images)
    wrong = adv_preds != clean.labels
    correct_clean = clean_preds == clean.labels
    asr = float(wrong.mean())
    acc = float(correct_clean.mean())
    filtered = float(wrong[correct_clean].mean()) if correct_clean.any() else 0.0
    records = []
    for i in range(len(clean)):
        meta = attack_meta[i] if attack_meta is not None else {}
        records.append(
            SampleRecord(
                id=i,
                label=int(clean.labels[i]),
                clean_pred=int(clean_preds[i]),
                adv_pred=int(adv_preds[i]),
                linf=float(linf[i]),
                stage=meta.get("stage"),
                selected_layers=tuple(meta["selected_layers"]) if "selected_layers" in meta else None,
                atcs_per_layer={int(k): float(v) for k, v in meta["atcs_per_layer"].items()}
                if "atcs_per_layer" in meta
                else None,
            )
        )
    return EvalReport(asr=asr, clean_accuracy=acc, asr_clean_correct=filtered, records=records)


def atcs_asr_sweep(
    pretrained: Checkpoint,
    downstream: Checkpoint,
    samples: LabeledData,
    layers: Sequence[int],
    schedule: SweepSchedule,
    batch_size: int = 16,
) -> List[CurvePoint]:
    """Single-layer attacks logged step by step.

    For every layer, runs the projected descent on that layer alone and
    records (mean ATCS on the pretrained model, transfer ASR on the
    downstream model) after initialization (step 0) and after each step.
    """
    layers = [int(k) for k in layers]
    if not layers:
        raise ContractError("layers must be nonempty")
    if len(samples) == 0:
        raise ContractError("sweep needs samples")
    src = pretrained.backbone
    dst = downstream.backbone
    xs_all = samples.images
    ys_all = samples.labels
    points: List[CurvePoint] = []
    for layer in layers:
        cos_sums = np.zeros(schedule.steps + 1)
        wrong_sums = np.zeros(schedule.steps + 1)
        for start in range(0, len(samples), batch_size):
            xs = np.ascontiguousarray(xs_all[start:start + batch_size])
            ys = ys_all[start:start + batch_size]
            _, clean_feats = measure_batch(src, xs)
            indices = list(range(start, start + xs.shape[0]))
            noise = np.stack([
                attacks._init_noise(
                    substream(schedule.seed, "attack", i, f"sweep-{layer}"),
                    xs.shape[1:], schedule.eps,
                )
                for i in indices
            ])

            def log(step, xa, _clean=clean_feats, _ys=ys, _layer=layer):
                _, feats = measure_batch(src, xa)
                cos = attacks._token_cosines(_clean[_layer - 1], feats[_layer - 1]).mean(axis=-1)
                cos_sums[step] += cos.sum()
                preds = predict(dst, xa)
                wrong_sums[step] += (preds != _ys).sum()

            attacks._pgd_core(
                src, xs, clean_feats,
                {layer: np.ones(xs.shape[0], dtype=_F32)},
                schedule.kind, schedule.eps, schedule.eta, schedule.steps,
                noise, snapshot=log,
            )
        n = float(len(samples))
        for step in range(schedule.steps + 1):
            points.append(
                CurvePoint(
                    layer=layer,
                    step=step,
                    atcs=float(cos_sums[step] / n),
                    asr=float(wrong_sums[step] / n),
                )
            )
    return points


def feature_shift_atcs(
    pretrained: Checkpoint,
    finetuned: Checkpoint,
    samples: LabeledData,
    k: int,
    use_adversarial: bool = False,
    attack_cfg: Optional[attacks.AttackConfig] = None,
) -> Tuple[float, Optional[float]]:
    """Mean ATCS between pre-trained and fine-tuned features at layer k,
    on clean inputs and (optionally) on adversarial inputs crafted on
    the pre-trained model."""
    a, b = pretrained.config, finetuned.config
    same_geometry = (
        a.image_size == b.image_size and a.patch_size == b.patch_size
        and a.embed_dim == b.embed_dim and a.depth == b.depth
        and a.num_heads == b.num_heads and a.mlp_hidden == b.mlp_hidden
        and a.channels == b.channels
    )
    if not same_geometry:
        raise ContractError("checkpoints do not share a backbone geometry")
    if not 1 <= k <= a.depth:
        raise ContractError(f"layer {k} outside 1..{a.depth}")

    def mean_shift(xs: np.ndarray) -> float:
        total, count = 0.0, 0
        for start in range(0, xs.shape[0], 32):
            sub = np.ascontiguousarray(xs[start:start + 32])
            _, f_pre = measure_batch(pretrained.backbone, sub)
            _, f_fin = measure_batch(finetuned.backbone, sub)
            cos = attacks._token_cosines(f_pre[k - 1], f_fin[k - 1]).mean(axis=-1)
            total += cos.sum()
            count += sub.shape[0]
        return float(total / count)

    clean_mean = mean_shift(samples.images)
    adv_mean = None
    if use_adversarial:
        cfg = attack_cfg if attack_cfg is not None else attacks.AttackConfig()
        results = attacks.dta_attack_many(pretrained.backbone, samples.images, cfg)
        adv_mean = mean_shift(np.stack([r.x_adv.data for r in results]))
    return clean_mean, adv_mean


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ContractError("spearman needs two equal-length series of length >= 2")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ContractError("spearman is undefined for a constant series")
    rho = stats.spearmanr(xs, ys).statistic
    return float(rho)
