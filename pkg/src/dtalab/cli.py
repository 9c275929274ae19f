"""Command-line entry point: data generation, training, attacks, reports.

Every command takes ``--config`` (JSON, partial trees allowed),
``--seed`` (defaults to 0, echoed into provenance), ``--out`` and
repeatable ``--override section.key=value`` flags. Outputs carry no
timestamps, so identical invocations produce byte-identical artifacts.

Failures print a machine-readable JSON object on stderr; usage errors
(unknown command/flag/config key) exit with code 2, runtime errors
with 1.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import attacks, evaluation
from .dataset import LabeledData, SyntheticSpec, generate_synthetic, read_dataset, write_dataset
from .errors import ContractError, DataFormatError, NumericError, TrainingError
from .store import load_checkpoint, save_checkpoint
from .tensor import Tensor
from .training import AdversarialSpec, TrainConfig, adversarial_finetune, finetune, pretrain_supervised
from .vit import DESK_CONFIG, ModelConfig

_F32 = np.float32


class UsageError(Exception):
    """Bad command line or config; exits with code 2."""


DEFAULT_CONFIG: Dict[str, Dict] = {
    "model": dict(DESK_CONFIG),
    "data": {
        "role": "pretrain",
        "classes": 10,
        "per_class": 500,
        "image_size": 32,
        "channels": 3,
        "noise_sigma": 0.1,
        "part": "train",
    },
    "train": {
        "epochs": 10,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "weight_decay": 0.0,
    },
    "finetune": {
        "mode": "full",
        "epochs": 10,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "weight_decay": 0.0,
        "lora_rank": 4,
        "lora_alpha": 8.0,
        "adapter_bottleneck": 16,
        "adapter_scale": 0.1,
    },
    "attack": {
        "method": "dta",
        "epsilon": 10.0 / 255.0,
        "eta_shallow": 0.05,
        "steps_shallow": 3,
        "eta_deep": 0.02,
        "steps_deep": 20,
        "gamma": 0.25,
        "n_select": 4,
        "loss_kind": "atcs",
        "nrdm_layer": 0,  # 0 = use the depth-derived default
        "pap_layer": 1,
        "pap_epochs": 1,
        "limit": 0,  # 0 = whole dataset
    },
    "adversarial": {
        "eps_train": 4.0 / 255.0,
        "steps": 10,
        "eta": 0.03,
        "generator": "dta",
    },
    "sweep": {
        "layers": [],  # [] = all layers
        "eps": 10.0 / 255.0,
        "eta": 0.02,
        "steps": 20,
        "loss_kind": "atcs",
        "limit": 100,
    },
    "ablate": {
        "loss_kinds": ["atcs", "l1", "l2", "l3", "l4"],
        "gammas": [0.0, 0.1, 0.2, 0.25, 0.3, 0.5, 0.75, 1.0],
        "layer": 0,  # 0 = depth-derived default for fixed-layer rows
        "eta": 0.03,
        "steps": 10,
        "epsilon": 10.0 / 255.0,
        "limit": 100,
    },
}


@dataclass
class RunSpec:
    command: str
    seed: int = 0
    config_path: Optional[str] = None
    overrides: List[str] = field(default_factory=list)
    out: Optional[str] = None
    paths: Dict[str, str] = field(default_factory=dict)


def _merge_section(base: Dict, update: Dict, section: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise UsageError(
                f"unknown config key '{section}.{key}'; valid keys: {sorted(base)}"
            )
        base[key] = value


def build_config(spec: RunSpec) -> Dict[str, Dict]:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if spec.config_path:
        try:
            user = json.loads(Path(spec.config_path).read_text())
        except FileNotFoundError as err:
            raise UsageError(f"config file not found: {spec.config_path}") from err
        except json.JSONDecodeError as err:
            raise UsageError(f"config file is not valid JSON: {err}") from err
        if not isinstance(user, dict):
            raise UsageError("config root must be a JSON object")
        for section, update in user.items():
            if section not in cfg:
                raise UsageError(
                    f"unknown config section '{section}'; valid sections: {sorted(cfg)}"
                )
            if not isinstance(update, dict):
                raise UsageError(f"config section '{section}' must be an object")
            _merge_section(cfg[section], update, section)
    for item in spec.overrides:
        if "=" not in item:
            raise UsageError(f"override '{item}' is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise UsageError(f"override key '{dotted}' must be section.key")
        section, key = dotted.split(".", 1)
        if section not in cfg:
            raise UsageError(
                f"unknown config section '{section}'; valid sections: {sorted(cfg)}"
            )
        if key not in cfg[section]:
            raise UsageError(
                f"unknown config key '{dotted}'; valid keys: {sorted(cfg[section])}"
            )
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg[section][key] = value
    return cfg


def _model_config(cfg: Dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def _out_dir(spec: RunSpec) -> Path:
    if not spec.out:
        raise UsageError(f"'{spec.command}' requires --out")
    path = Path(spec.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(path: str) -> LabeledData:
    return read_dataset(path)


def _limit(data: LabeledData, n: int) -> LabeledData:
    if n and 0 < n < len(data):
        return data.subset(np.arange(n))
    return data


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(spec: RunSpec, cfg: Dict) -> None:
    d = cfg["data"]
    synth = SyntheticSpec(
        role=d["role"],
        classes=int(d["classes"]),
        per_class=int(d["per_class"]),
        image_size=int(d["image_size"]),
        channels=int(d["channels"]),
        noise_sigma=float(d["noise_sigma"]),
        seed=spec.seed,
        part=d["part"],
    )
    data = generate_synthetic(synth)
    out = _out_dir(spec)
    name = f"{d['role']}_{d['part']}.bin"
    write_dataset(out / name, data)
    print(json.dumps({"written": str(out / name), "samples": len(data)}))


def _train_config(section: Dict, mode: str, seed: int, adversarial=None) -> TrainConfig:
    return TrainConfig(
        mode=mode,
        epochs=int(section["epochs"]),
        batch_size=int(section["batch_size"]),
        learning_rate=float(section["learning_rate"]),
        weight_decay=float(section["weight_decay"]),
        seed=seed,
        adversarial=adversarial,
    )


def cmd_pretrain(spec: RunSpec, cfg: Dict) -> None:
    data = _load_data(spec.paths["data"])
    model_cfg = _model_config(cfg)
    tcfg = _train_config(cfg["train"], "pretrain", spec.seed)
    ckpt = pretrain_supervised(model_cfg, data, tcfg)
    out = _out_dir(spec)
    save_checkpoint(out / "pretrained.ckpt", ckpt)
    print(json.dumps({"written": str(out / "pretrained.ckpt"),
                      "metrics": ckpt.provenance["metrics"]}))


def _finetune_kwargs(section: Dict) -> Dict:
    return dict(
        lora_rank=int(section["lora_rank"]),
        lora_alpha=float(section["lora_alpha"]),
        adapter_bottleneck=int(section["adapter_bottleneck"]),
        adapter_scale=float(section["adapter_scale"]),
    )


def cmd_finetune(spec: RunSpec, cfg: Dict) -> None:
    parent = load_checkpoint(spec.paths["parent"])
    data = _load_data(spec.paths["data"])
    val = _load_data(spec.paths["val_data"]) if spec.paths.get("val_data") else None
    section = cfg["finetune"]
    mode = section["mode"]
    tcfg = _train_config(section, mode, spec.seed)
    ckpt = finetune(parent, mode, data, tcfg, val_data=val, **_finetune_kwargs(section))
    out = _out_dir(spec)
    name = f"finetuned_{mode}.ckpt"
    save_checkpoint(out / name, ckpt)
    print(json.dumps({"written": str(out / name), "metrics": ckpt.provenance["metrics"]}))


def cmd_advtrain(spec: RunSpec, cfg: Dict) -> None:
    parent = load_checkpoint(spec.paths["parent"])
    data = _load_data(spec.paths["data"])
    section = cfg["finetune"]
    adv_section = cfg["adversarial"]
    adv = AdversarialSpec(
        eps_train=float(adv_section["eps_train"]),
        steps=int(adv_section["steps"]),
        eta=float(adv_section["eta"]),
        generator=adv_section["generator"],
    )
    mode = section["mode"]
    tcfg = _train_config(section, mode, spec.seed, adversarial=adv)
    ckpt = adversarial_finetune(parent, mode, data, tcfg, **_finetune_kwargs(section))
    out = _out_dir(spec)
    name = f"advtrained_{mode};{adv.generator}.ckpt".replace(";", "_")
    save_checkpoint(out / name, ckpt)
    print(json.dumps({"written": str(out / name), "metrics": ckpt.provenance["metrics"]}))


def _attack_config(section: Dict, seed: int) -> attacks.AttackConfig:
    return attacks.AttackConfig(
        epsilon=float(section["epsilon"]),
        eta_shallow=float(section["eta_shallow"]),
        steps_shallow=int(section["steps_shallow"]),
        eta_deep=float(section["eta_deep"]),
        steps_deep=int(section["steps_deep"]),
        gamma=float(section["gamma"]),
        n_select=int(section["n_select"]),
        loss_kind=section["loss_kind"],
        seed=seed,
    )


def cmd_attack(spec: RunSpec, cfg: Dict) -> None:
    ckpt = load_checkpoint(spec.paths["ckpt"])
    data = _limit(_load_data(spec.paths["data"]), int(cfg["attack"]["limit"]))
    section = cfg["attack"]
    method = section["method"]
    backbone = ckpt.backbone
    eps = float(section["epsilon"])
    records: List[dict] = []
    if method == "dta":
        acfg = _attack_config(section, spec.seed)
        results = attacks.dta_attack_many(backbone, data.images, acfg)
        adv = np.stack([r.x_adv.data for r in results])
        for i, r in enumerate(results):
            records.append({
                "id": i,
                "stage": r.stage,
                "selected_layers": list(r.selected_layers),
                "stage1_final_atcs": r.stage1_final_atcs,
                "atcs_per_layer": {str(k): v for k, v in r.atcs_per_layer.items()},
                "linf": float(np.abs(r.delta.data).max()),
            })
    elif method == "nrdm":
        layer = int(section["nrdm_layer"]) or attacks.nrdm_default_layer(ckpt.config.depth)
        adv = attacks.nrdm_attack_many(
            backbone, data.images, layer, eps,
            float(section["eta_deep"]), int(section["steps_deep"]), spec.seed,
        )
        records = [{"id": i, "layer": layer} for i in range(len(data))]
    elif method == "pap":
        pap_path = spec.paths.get("pap_data")
        pap_data = _load_data(pap_path) if pap_path else data
        batches = [pap_data.images[i:i + 64] for i in range(0, len(pap_data), 64)]
        delta = attacks.pap_uap(
            backbone, batches, int(section["pap_layer"]), eps,
            float(section["eta_deep"]), int(section["pap_epochs"]), spec.seed,
        )
        adv = attacks.apply_uap(data.images, delta.data)
        records = [{"id": i} for i in range(len(data))]
    elif method == "noise":
        adv = np.stack([
            attacks.uniform_noise_baseline(data.images[i], eps, spec.seed, i)
            for i in range(len(data))
        ])
        records = [{"id": i} for i in range(len(data))]
    else:
        raise UsageError(f"unknown attack method '{method}' (dta|nrdm|pap|noise)")
    out = _out_dir(spec)
    adv_file = out / f"adv_{method}.bin"
    write_dataset(adv_file, LabeledData(adv, data.labels, data.num_classes))
    meta = {
        "method": method,
        "epsilon": eps,
        "seed": spec.seed,
        "config": section,
        "records": records,
    }
    (out / f"attack_{method}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    print(json.dumps({"written": str(adv_file), "samples": len(data)}))


def cmd_eval(spec: RunSpec, cfg: Dict) -> None:
    ckpt = load_checkpoint(spec.paths["ckpt"])
    clean = _load_data(spec.paths["data"])
    adv = _load_data(spec.paths["adv"])
    if len(adv) != len(clean):
        clean = clean.subset(np.arange(len(adv)))
    meta_records: Optional[List[dict]] = None
    eps = float(cfg["attack"]["epsilon"])
    if spec.paths.get("records"):
        meta = json.loads(Path(spec.paths["records"]).read_text())
        meta_records = meta["records"]
        eps = float(meta["epsilon"])
    report = evaluation.build_eval_report(ckpt, clean, adv.images, eps, meta_records)
    out = _out_dir(spec)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    with open(out / "records.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "clean_pred", "adv_pred", "linf", "stage", "selected_layers"])
        for r in report.records:
            writer.writerow([
                r.id, r.label, r.clean_pred, r.adv_pred, f"{r.linf:.8f}",
                r.stage or "", " ".join(map(str, r.selected_layers or ())),
            ])
    print(json.dumps({
        "asr": report.asr,
        "clean_accuracy": report.clean_accuracy,
        "asr_clean_correct": report.asr_clean_correct,
    }))


def cmd_sweep(spec: RunSpec, cfg: Dict) -> None:
    pre = load_checkpoint(spec.paths["pretrained"])
    down = load_checkpoint(spec.paths["downstream"])
    section = cfg["sweep"]
    data = _limit(_load_data(spec.paths["data"]), int(section["limit"]))
    layers = [int(x) for x in section["layers"]] or list(range(1, pre.config.depth + 1))
    schedule = evaluation.SweepSchedule(
        eps=float(section["eps"]),
        eta=float(section["eta"]),
        steps=int(section["steps"]),
        seed=spec.seed,
        kind=section["loss_kind"],
    )
    points = evaluation.atcs_asr_sweep(pre, down, data, layers, schedule)
    out = _out_dir(spec)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "step", "atcs", "asr", "loss_kind", "gamma"])
        for p in points:
            writer.writerow([p.layer, p.step, f"{p.atcs:.6f}", f"{p.asr:.6f}",
                             section["loss_kind"], ""])
    finals = {p.layer: p for p in points if p.step == schedule.steps}
    xs = [finals[k].atcs for k in sorted(finals)]
    ys = [finals[k].asr for k in sorted(finals)]
    summary = {"layers": sorted(finals), "final_atcs": xs, "final_asr": ys}
    try:
        summary["spearman_atcs_asr"] = evaluation.spearman(xs, ys)
    except ContractError as err:
        summary["spearman_atcs_asr"] = None
        summary["spearman_note"] = str(err)
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary))


def cmd_ablate(spec: RunSpec, cfg: Dict) -> None:
    pre = load_checkpoint(spec.paths["pretrained"])
    down = load_checkpoint(spec.paths["downstream"])
    section = cfg["ablate"]
    data = _limit(_load_data(spec.paths["data"]), int(section["limit"]))
    eps = float(section["epsilon"])
    eta = float(section["eta"])
    steps = int(section["steps"])
    fixed_layer = int(section["layer"]) or attacks.nrdm_default_layer(pre.config.depth)
    backbone = pre.backbone
    rows: List[dict] = []

    def asr_of(adv: np.ndarray) -> float:
        return evaluation.attack_success_rate(down, list(zip(adv, data.labels)))

    # loss-kind ablation at a fixed layer
    for kind in section["loss_kinds"]:
        adv = np.empty_like(data.images)
        for i in range(len(data)):
            x_adv, _ = attacks.pgd_minimize(
                backbone, Tensor(data.images[i]),
                [fixed_layer], kind, eps, eta, steps, seed=spec.seed + i,
            )
            adv[i] = x_adv.data
        rows.append({"loss_kind": kind, "gamma": "", "layer": fixed_layer,
                     "strategy": "fixed", "asr": asr_of(adv)})

    # layer strategies: the staged attack vs fixed layer vs all layers
    acfg = _attack_config({**DEFAULT_CONFIG["attack"], "epsilon": eps,
                           "eta_deep": eta, "steps_deep": steps}, spec.seed)
    results = attacks.dta_attack_many(backbone, data.images, acfg)
    rows.append({"loss_kind": "atcs", "gamma": acfg.gamma, "layer": "",
                 "strategy": "staged", "asr": asr_of(np.stack([r.x_adv.data for r in results]))})
    all_layers = list(range(1, pre.config.depth + 1))
    adv_all = np.empty_like(data.images)
    for i in range(len(data)):
        x_adv, _ = attacks.pgd_minimize(
            backbone, Tensor(data.images[i]),
            all_layers, "atcs", eps, eta, steps, seed=spec.seed + i,
        )
        adv_all[i] = x_adv.data
    rows.append({"loss_kind": "atcs", "gamma": "", "layer": "",
                 "strategy": "all-layers", "asr": asr_of(adv_all)})

    # threshold sweep for the staged attack
    for gamma in section["gammas"]:
        gcfg = attacks.AttackConfig(
            epsilon=eps, eta_deep=eta, steps_deep=steps, gamma=float(gamma), seed=spec.seed,
        )
        results = attacks.dta_attack_many(backbone, data.images, gcfg)
        rows.append({"loss_kind": "atcs", "gamma": gamma, "layer": "",
                     "strategy": "staged", "asr": asr_of(np.stack([r.x_adv.data for r in results]))})

    out = _out_dir(spec)
    with open(out / "ablate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "step", "atcs", "asr", "loss_kind", "gamma", "strategy"])
        for row in rows:
            writer.writerow([row["layer"], steps, "", f"{row['asr']:.6f}",
                             row["loss_kind"], row["gamma"], row["strategy"]])
    print(json.dumps({"rows": len(rows), "written": str(out / "ablate.csv")}))


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "advtrain": cmd_advtrain,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtalab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file (partial trees allowed)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--override", action="append", default=[],
                       metavar="SECTION.KEY=VALUE")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p = sub.add_parser("pretrain", help="train a backbone from scratch")
    common(p)
    p.add_argument("--data", required=True)
    p = sub.add_parser("finetune", help="adapt a pretrained checkpoint")
    common(p)
    p.add_argument("--parent", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p = sub.add_parser("advtrain", help="fine-tune on adversarial examples")
    common(p)
    p.add_argument("--parent", required=True)
    p.add_argument("--data", required=True)
    p = sub.add_parser("attack", help="craft adversarial examples on a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pap-data", default=None)
    p = sub.add_parser("eval", help="score an adversarial set on a downstream model")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adv", required=True)
    p.add_argument("--records", default=None)
    p = sub.add_parser("sweep", help="per-layer similarity/ASR trajectories")
    common(p)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--downstream", required=True)
    p.add_argument("--data", required=True)
    p = sub.add_parser("ablate", help="loss-kind / layer-strategy / threshold grids")
    common(p)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--downstream", required=True)
    p.add_argument("--data", required=True)
    return parser


def _run_spec(args: argparse.Namespace) -> RunSpec:
    paths = {}
    for key in ("data", "parent", "val_data", "ckpt", "adv", "records",
                "pretrained", "downstream", "pap_data"):
        val = getattr(args, key, None)
        if val:
            paths[key] = val
    return RunSpec(
        command=args.command,
        seed=args.seed,
        config_path=args.config,
        overrides=list(args.override),
        out=args.out,
        paths=paths,
    )


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run the named command, return the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    spec = _run_spec(args)
    try:
        cfg = build_config(spec)
        _COMMANDS[spec.command](spec, cfg)
        return 0
    except UsageError as err:
        sys.stderr.write(json.dumps({"error": "usage", "message": str(err)}) + "\n")
        return 2
    except (ContractError, DataFormatError, NumericError, TrainingError, OSError) as err:
        sys.stderr.write(json.dumps({"error": type(err).__name__, "message": str(err)}) + "\n")
        return 1


def main() -> None:
    raise SystemExit(cli_dispatch())
