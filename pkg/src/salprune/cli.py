"""End-to-end pipeline orchestration.

Subcommands cover every stage: train-classifier, train-predictor,
train-selector, prune, export, finetune, explain, report. Each stage writes
its checkpoint, a step-trace metrics file, a summary, and the fully-resolved
config it ran under. Checkpoints carry content hashes; a stage refuses to
run against a mismatched upstream artifact.

Exit codes: 0 success, 2 config error, 3 prerequisite error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path

import torch

from salprune import aem, pruning
from salprune.checkpoint import (
    CheckpointError,
    load_checkpoint,
    require_upstream,
    save_checkpoint,
)
from salprune.classifiers import (
    DeskClassifier,
    FlopsModel,
    TrainConfig,
    build_classifier,
    dsnet_desk_spec,
    evaluate,
    resnet_desk_spec,
    spec_from_dict,
    spec_to_dict,
    train_classifier,
)
from salprune.data import DataError, Dataset, load_cifar10, make_synthetic
from salprune.reporting import (
    collect_report_rows,
    denormalize,
    explanation_figure,
    format_report_table,
    write_json,
    write_metrics,
)

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class NumericError(Exception):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs/default",
    "arch": "resnet",
    "dataset": {
        "kind": "synthetic",
        "root": None,
        "n": 20000,
        "num_classes": 10,
        "image": 32,
        "patch": 8,
        "noise_std": 0.35,
        "seed": 0,
    },
    "classifier": {
        "epochs": 10,
        "batch_size": 128,
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "augment": False,
    },
    "aem": {
        "lambda1": 0.2,
        "lambda2": 0.001,
        "tau_selector": 1.0,
        "predictor_epochs": 300,
        "predictor_batch": 128,
        "selector_epochs": 10,
        "selector_batch": 16,
        "lr": 1e-4,
        "betas": [0.9, 0.999],
        "weight_decay": 1e-4,
        "mask_family": "rbf",
        "sigma_bias": 10.0,
    },
    "prune": {
        "gamma1": 0.5,
        "gamma2": 2.0,
        "target_rate": 0.5,
        "epochs": 200,
        "batch_size": 128,
        "lr": 0.01,
        "gate_bias": 3.0,
        "tau": 0.4,
        "use_class_loss": True,
    },
    "finetune": {
        "epochs": 200,
        "batch_size": 128,
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "augment": False,
    },
    "explain": {"split": "test", "samples": [0, 1, 2, 3]},
}


# ---------------------------------------------------------------------------
# Config plumbing


def _deep_update(base: dict, override: dict, path: str = "") -> dict:
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' expects a section")
            _deep_update(base[key], value, where)
        else:
            base[key] = value
    return base


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got '{assignment}'")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section '{part}' in '{key}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        _deep_update(cfg, file_cfg)
    for assignment in args.set or []:
        _apply_set(cfg, assignment)
    if args.out:
        cfg["out_dir"] = args.out
    if cfg["arch"] not in ("resnet", "dsnet"):
        raise ConfigError(f"unknown arch '{cfg['arch']}'")
    return cfg


def build_dataset(cfg: dict) -> Dataset:
    d = cfg["dataset"]
    if d["kind"] == "synthetic":
        return make_synthetic(
            n=int(d["n"]),
            num_classes=int(d["num_classes"]),
            image_hw=(int(d["image"]), int(d["image"])),
            patch_hw=(int(d["patch"]), int(d["patch"])),
            seed=int(d["seed"]),
            noise_std=float(d["noise_std"]),
        )
    if d["kind"] == "cifar10":
        if not d.get("root"):
            raise ConfigError("dataset.root is required for cifar10")
        return load_cifar10(d["root"], seed=int(d["seed"]))
    raise ConfigError(f"unknown dataset kind '{d['kind']}'")


def make_spec(cfg: dict, dataset: Dataset):
    hw = dataset.image_hw
    if cfg["arch"] == "resnet":
        return resnet_desk_spec(num_classes=dataset.num_classes, input_hw=hw)
    return dsnet_desk_spec(num_classes=dataset.num_classes, input_hw=hw)


def aem_config(cfg: dict) -> aem.AemConfig:
    a = cfg["aem"]
    try:
        return aem.AemConfig(
            lambda1=float(a["lambda1"]),
            lambda2=float(a["lambda2"]),
            tau_selector=float(a["tau_selector"]),
            predictor_epochs=int(a["predictor_epochs"]),
            predictor_batch=int(a["predictor_batch"]),
            selector_epochs=int(a["selector_epochs"]),
            selector_batch=int(a["selector_batch"]),
            lr=float(a["lr"]),
            betas=tuple(a["betas"]),
            weight_decay=float(a["weight_decay"]),
            mask_family=a["mask_family"],
            sigma_bias=float(a["sigma_bias"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def prune_config(cfg: dict) -> pruning.PruneConfig:
    p = cfg["prune"]
    try:
        return pruning.PruneConfig(
            gamma1=float(p["gamma1"]),
            gamma2=float(p["gamma2"]),
            target_rate=float(p["target_rate"]),
            epochs=int(p["epochs"]),
            batch_size=int(p["batch_size"]),
            lr=float(p["lr"]),
            gate_bias=float(p["gate_bias"]),
            tau=float(p["tau"]),
            use_class_loss=bool(p["use_class_loss"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(section: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=int(section["epochs"]),
        batch_size=int(section["batch_size"]),
        lr=float(section["lr"]),
        momentum=float(section["momentum"]),
        weight_decay=float(section["weight_decay"]),
        augment=bool(section["augment"]),
        seed=seed,
    )


def ckpt_path(cfg: dict, name: str) -> Path:
    return Path(cfg["out_dir"]) / f"{name}.pt"


def _check_finite(values, stage: str) -> None:
    for v in values:
        if isinstance(v, float) and not math.isfinite(v):
            raise NumericError(f"{stage} produced a non-finite value")


def _write_stage_files(cfg: dict, stage: str, metrics: list[dict], summary: dict) -> None:
    out = Path(cfg["out_dir"])
    write_json(out / f"{stage}_config.json", cfg)
    write_metrics(out / "metrics" / f"{stage}.jsonl", metrics)
    write_json(out / f"{stage}_summary.json", summary)


def _load_classifier(cfg: dict, dataset: Dataset) -> tuple[DeskClassifier, dict]:
    blob = load_checkpoint(ckpt_path(cfg, "classifier"), expect_kind="classifier")
    if blob["meta"]["dataset_fingerprint"] != dataset.fingerprint:
        raise CheckpointError(
            "classifier checkpoint was trained on a different dataset "
            f"(fingerprint {blob['meta']['dataset_fingerprint']}, "
            f"current {dataset.fingerprint})"
        )
    model = DeskClassifier(spec_from_dict(blob["meta"]["spec"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model, blob


# ---------------------------------------------------------------------------
# Stage commands


def cmd_train_classifier(cfg: dict) -> int:
    ds = build_dataset(cfg)
    spec = make_spec(cfg, ds)
    model = build_classifier(spec, seed=cfg["seed"])
    tcfg = train_config(cfg["classifier"], cfg["seed"])
    train_x, train_y = ds.split_tensors("train")
    val_x, val_y = ds.split_tensors("val")
    history = train_classifier(model, train_x, train_y, val_x, val_y, tcfg)
    _check_finite(history["train_loss"], "train-classifier")
    test_x, test_y = ds.split_tensors("test")
    val_acc = evaluate(model, val_x, val_y)
    test_acc = evaluate(model, test_x, test_y)
    content = save_checkpoint(
        ckpt_path(cfg, "classifier"),
        kind="classifier",
        state=model.state_dict(),
        config={"classifier": cfg["classifier"], "arch": cfg["arch"], "dataset": cfg["dataset"]},
        seed=cfg["seed"],
        meta={"spec": spec_to_dict(spec), "dataset_fingerprint": ds.fingerprint,
              "val_acc": val_acc, "test_acc": test_acc},
    )
    metrics = [
        {"epoch": i, "train_loss": tl, "val_acc": va}
        for i, (tl, va) in enumerate(zip(history["train_loss"], history["val_acc"]))
    ]
    summary = {"stage": "classifier", "val_acc": val_acc, "test_acc": test_acc,
               "checkpoint": content}
    _write_stage_files(cfg, "classifier", metrics, summary)
    print(f"classifier: val_acc={val_acc:.4f} test_acc={test_acc:.4f}")
    return EXIT_OK


def cmd_train_predictor(cfg: dict) -> int:
    ds = build_dataset(cfg)
    classifier, clf_blob = _load_classifier(cfg, ds)
    acfg = aem_config(cfg)
    predictor, history = aem.train_predictor(classifier, ds, acfg, seed=cfg["seed"])
    _check_finite(history["train_kl"] + history["val_kl"], "train-predictor")
    content = save_checkpoint(
        ckpt_path(cfg, "predictor"),
        kind="predictor",
        state=predictor.state_dict(),
        config={"aem": cfg["aem"]},
        seed=cfg["seed"],
        upstream={"classifier": clf_blob["content_hash"]},
        meta={"mask_family": acfg.mask_family, "spec": clf_blob["meta"]["spec"]},
    )
    metrics = [
        {"epoch": i, "train_kl": t, "val_kl": v}
        for i, (t, v) in enumerate(zip(history["train_kl"], history["val_kl"]))
    ]
    final_kl = history["val_kl"][-1] if history["val_kl"] else None
    summary = {"stage": "predictor", "val_kl": final_kl, "checkpoint": content,
               "mask_family": acfg.mask_family}
    _write_stage_files(cfg, "predictor", metrics, summary)
    print(f"predictor: val_kl={final_kl}")
    return EXIT_OK


def cmd_train_selector(cfg: dict) -> int:
    ds = build_dataset(cfg)
    classifier, clf_blob = _load_classifier(cfg, ds)
    pred_blob = load_checkpoint(ckpt_path(cfg, "predictor"), expect_kind="predictor")
    require_upstream(pred_blob, "classifier", clf_blob["content_hash"], "predictor")
    acfg = aem_config(cfg)
    if pred_blob["meta"]["mask_family"] != acfg.mask_family:
        raise CheckpointError(
            f"predictor was trained with '{pred_blob['meta']['mask_family']}' masks "
            f"but the selector stage is configured for '{acfg.mask_family}'"
        )
    predictor = DeskClassifier(spec_from_dict(pred_blob["meta"]["spec"]))
    predictor.load_state_dict(pred_blob["state"])
    if acfg.mask_family == "independent":
        selector, history = aem.train_selector_realx(classifier, predictor, ds, acfg,
                                                     seed=cfg["seed"])
    else:
        selector, history = aem.train_selector(classifier, predictor, ds, acfg,
                                               seed=cfg["seed"])
    _check_finite(history["train_loss"] + history["val_kl"], "train-selector")
    content = save_checkpoint(
        ckpt_path(cfg, "selector"),
        kind="selector",
        state=selector.state_dict(),
        config={"aem": cfg["aem"]},
        seed=cfg["seed"],
        upstream={"classifier": clf_blob["content_hash"],
                  "predictor": pred_blob["content_hash"]},
        meta={"mask_family": acfg.mask_family, "sigma_bias": acfg.sigma_bias},
    )
    metrics = [
        {"epoch": i, "train_loss": t, "val_kl": v, "val_l0": l}
        for i, (t, v, l) in enumerate(zip(history["train_loss"], history["val_kl"],
                                          history["val_l0"]))
    ]
    summary = {"stage": "selector", "val_kl": history["val_kl"][-1] if history["val_kl"] else None,
               "checkpoint": content, "mask_family": acfg.mask_family}
    _write_stage_files(cfg, "selector", metrics, summary)
    print(f"selector[{acfg.mask_family}]: val_kl={summary['val_kl']}")
    return EXIT_OK


def _load_selector(cfg: dict, classifier: DeskClassifier, clf_hash: str):
    sel_blob = load_checkpoint(ckpt_path(cfg, "selector"), expect_kind="selector")
    require_upstream(sel_blob, "classifier", clf_hash, "selector")
    selector = aem.SelectorNet(
        classifier,
        head=sel_blob["meta"]["mask_family"],
        sigma_bias=sel_blob["meta"]["sigma_bias"],
    )
    selector.load_state_dict(sel_blob["state"])
    selector.eval()
    return selector, sel_blob


def cmd_prune(cfg: dict) -> int:
    pcfg = prune_config(cfg)
    ds = build_dataset(cfg)
    classifier, clf_blob = _load_classifier(cfg, ds)
    selector, sel_blob = _load_selector(cfg, classifier, clf_blob["content_hash"])
    if sel_blob["meta"]["mask_family"] != "rbf":
        raise ConfigError("pruning requires an RBF selector (3-parameter explanations)")
    fm = FlopsModel.from_spec(classifier.spec)
    pairs = pruning.build_pruning_pairs(classifier, selector, ds)
    result = pruning.prune(classifier, selector, pairs, fm, pcfg, ds)
    _check_finite(
        [r["class_loss"] + r["interp_loss"] + r["resource_loss"] for r in result.trace],
        "prune",
    )
    hard = pruning.effective_hard_vector(result.gates)
    hard_rate = float(pruning.current_flops(hard, fm)) / fm.t_all
    content = save_checkpoint(
        ckpt_path(cfg, "gates"),
        kind="gates",
        state=result.gates.state_dict(),
        config={"prune": cfg["prune"]},
        seed=cfg["seed"],
        upstream={"classifier": clf_blob["content_hash"],
                  "selector": sel_blob["content_hash"]},
        meta={"final_rate": result.final_rate(),
              "final_resource_loss": result.final_resource_loss(),
              "hard_rate": hard_rate,
              "active_counts": hard.active_counts()},
    )
    summary = {"stage": "prune", "final_resource_loss": result.final_resource_loss(),
               "soft_rate": result.final_rate(), "hard_rate": hard_rate,
               "checkpoint": content}
    _write_stage_files(cfg, "prune", result.trace, summary)
    print(f"prune: resource_loss={result.final_resource_loss():.5f} hard_rate={hard_rate:.4f}")
    return EXIT_OK


def cmd_export(cfg: dict) -> int:
    ds = build_dataset(cfg)
    classifier, clf_blob = _load_classifier(cfg, ds)
    gate_blob = load_checkpoint(ckpt_path(cfg, "gates"), expect_kind="gates")
    require_upstream(gate_blob, "classifier", clf_blob["content_hash"], "gates")
    fm = FlopsModel.from_spec(classifier.spec)
    gates = pruning.GateSet(fm.group_sizes,
                            gate_bias=float(gate_blob["config"]["prune"]["gate_bias"]),
                            tau=float(gate_blob["config"]["prune"]["tau"]))
    gates.load_state_dict(gate_blob["state"])
    exported, hard = pruning.export_subnetwork(classifier, gates)
    rate = float(pruning.current_flops(hard, fm)) / fm.t_all
    pruned_pct = 100.0 * (1.0 - rate)
    content = save_checkpoint(
        ckpt_path(cfg, "exported"),
        kind="exported",
        state=exported.state_dict(),
        config={"prune": cfg["prune"]},
        seed=cfg["seed"],
        upstream={"classifier": clf_blob["content_hash"],
                  "gates": gate_blob["content_hash"]},
        meta={"spec": spec_to_dict(exported.spec), "flops_rate": rate,
              "pruned_flops_pct": pruned_pct,
              "dataset_fingerprint": ds.fingerprint},
    )
    summary = {"stage": "export", "flops_rate": rate, "pruned_flops_pct": pruned_pct,
               "checkpoint": content}
    _write_stage_files(cfg, "export", [], summary)
    print(f"export: flops_rate={rate:.4f} pruned={pruned_pct:.2f}%")
    return EXIT_OK


def cmd_finetune(cfg: dict) -> int:
    ds = build_dataset(cfg)
    classifier, clf_blob = _load_classifier(cfg, ds)
    exp_blob = load_checkpoint(ckpt_path(cfg, "exported"), expect_kind="exported")
    require_upstream(exp_blob, "classifier", clf_blob["content_hash"], "exported")
    model = DeskClassifier(spec_from_dict(exp_blob["meta"]["spec"]))
    model.load_state_dict(exp_blob["state"])
    tcfg = train_config(cfg["finetune"], cfg["seed"])
    train_x, train_y = ds.split_tensors("train")
    val_x, val_y = ds.split_tensors("val")
    history = pruning.finetune(model, train_x, train_y, val_x, val_y, tcfg)
    _check_finite(history["train_loss"], "finetune")
    test_x, test_y = ds.split_tensors("test")
    finetuned_acc = evaluate(model, test_x, test_y)
    baseline_acc = clf_blob["meta"]["test_acc"]
    delta_acc = finetuned_acc - baseline_acc
    content = save_checkpoint(
        ckpt_path(cfg, "finetuned"),
        kind="finetuned",
        state=model.state_dict(),
        config={"finetune": cfg["finetune"]},
        seed=cfg["seed"],
        upstream={"classifier": clf_blob["content_hash"],
                  "exported": exp_blob["content_hash"]},
        meta={"spec": exp_blob["meta"]["spec"], "baseline_acc": baseline_acc,
              "finetuned_acc": finetuned_acc, "delta_acc": delta_acc},
    )
    metrics = [
        {"epoch": i, "train_loss": tl, "val_acc": va}
        for i, (tl, va) in enumerate(zip(history["train_loss"], history["val_acc"]))
    ]
    summary = {"stage": "finetune", "baseline_acc": baseline_acc,
               "finetuned_acc": finetuned_acc, "delta_acc": delta_acc,
               "pruned_flops_pct": exp_blob["meta"]["pruned_flops_pct"],
               "checkpoint": content}
    _write_stage_files(cfg, "finetune", metrics, summary)
    print(f"finetune: acc={finetuned_acc:.4f} delta={delta_acc:+.4f} "
          f"pruned_flops={exp_blob['meta']['pruned_flops_pct']:.2f}%")
    return EXIT_OK


def cmd_explain(cfg: dict) -> int:
    ds = build_dataset(cfg)
    classifier, clf_blob = _load_classifier(cfg, ds)
    selector, _ = _load_selector(cfg, classifier, clf_blob["content_hash"])
    split = cfg["explain"]["split"]
    split_ids = ds.prune_ids if split == "prune" else ds.splits[split]
    sample_ids = [int(s) for s in cfg["explain"]["samples"]]
    for s in sample_ids:
        if s < 0 or s >= len(split_ids):
            raise ConfigError(f"sample index {s} out of range for split '{split}'")
    ids = split_ids[torch.tensor(sample_ids, dtype=torch.long)]
    x = ds.images[ids]
    out, grids, hard, masked = aem.explain(selector, x)
    out_dir = Path(cfg["out_dir"]) / "explain"
    lines = []
    records = []
    for i, sid in enumerate(ids.tolist()):
        img = denormalize(x[i], ds.mean, ds.std)
        msk = img * hard[i].numpy()[..., None]
        if selector.head_kind == "rbf":
            c_z, c_t, sigma = (float(v) for v in out[i])
            title = f"sample {sid}: c_z={c_z:.2f} c_t={c_t:.2f} sigma={sigma:.2f}"
            lines.append(f"{sid}\t{c_z:.6f}\t{c_t:.6f}\t{sigma:.6f}")
            records.append({"sample": sid, "c_z": c_z, "c_t": c_t, "sigma": sigma})
        else:
            title = f"sample {sid}"
            lines.append(f"{sid}\t-\t-\t-")
            records.append({"sample": sid})
        explanation_figure(out_dir / f"sample_{sid}.png", img, grids[i].numpy(),
                           hard[i].numpy(), msk, title)
    (out_dir / "params.txt").write_text(
        "sample\tc_z\tc_t\tsigma\n" + "\n".join(lines) + "\n"
    )
    _write_stage_files(cfg, "explain", records,
                       {"stage": "explain", "samples": sample_ids, "split": split})
    print(f"explain: wrote {len(sample_ids)} figures to {out_dir}")
    return EXIT_OK


def cmd_report(cfg: dict, run_dir: str) -> int:
    rows = collect_report_rows(run_dir)
    write_json(Path(run_dir) / "report.json", {"rows": rows})
    print(format_report_table(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="salprune",
                                     description="saliency-steered channel pruning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    stages = ["train-classifier", "train-predictor", "train-selector", "prune",
              "export", "finetune", "explain"]
    for name in stages:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (JSON-parsed value)")
        p.add_argument("--out", help="output directory (overrides config)")
    rp = sub.add_parser("report")
    rp.add_argument("run_dir", help="directory containing completed runs")

    args = parser.parse_args(argv)
    handlers = {
        "train-classifier": cmd_train_classifier,
        "train-predictor": cmd_train_predictor,
        "train-selector": cmd_train_selector,
        "prune": cmd_prune,
        "export": cmd_export,
        "finetune": cmd_finetune,
        "explain": cmd_explain,
    }
    try:
        if args.command == "report":
            return cmd_report({}, args.run_dir)
        cfg = resolve_config(args)
        return handlers[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except DataError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
