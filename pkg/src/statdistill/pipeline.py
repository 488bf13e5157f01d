"""Stage implementations behind the CLI: each stage reads its predecessors'
artifacts from the output root, validates fingerprints, writes its own
artifact, and appends a replayable entry to the run log.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .artifacts import dir_content_hash, load_distilled, read_manifest, save_distilled, write_manifest
from .config import stage_seed
from .data import Dataset, toy_datasets
from .engine import Array
from .errors import ArtifactError
from .evaluate import EvalConfig, diversity_metric, save_report, train_eval_model
from .nets import BackbonePool, build_backbone, load_model, make_spec, save_model
from .pretrain import PretrainConfig, pretrain
from .relabel import load_store, relabel_dataset, save_store
from .statbank import capture_conv_stats, load_bank, save_bank
from .synth import (BatchPlan, SynthesisConfig, SyntheticDataset,
                    init_synthetic, run_synthesis)

STAGES = ("pretrain", "capture-stats", "synthesize", "relabel", "evaluate")


def _log(out: Path, stage: str, cfg: dict, payload: dict) -> None:
    log_dir = out / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(log_dir / f"{stage}.json", {
        "stage": stage,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seed": cfg["seed"],
        "stage_seed": stage_seed(cfg["seed"], stage),
        "config": cfg,
        **payload,
    })


def build_dataset(cfg: dict) -> Dataset:
    params = dict(cfg["dataset"])
    name = params.pop("name")
    return toy_datasets(name, seed=stage_seed(cfg["seed"], "dataset"), **params)


def _require(path: Path, producer: str, what: str) -> None:
    if not path.exists():
        raise ArtifactError(f"missing {what} at {path}; run the {producer} stage first")


def _load_pool(cfg: dict, out: Path, requesting_stage: str) -> BackbonePool:
    models = []
    for name in cfg["pool"]:
        mdir = out / "models" / name
        _require(mdir / "manifest", "pretrain", f"backbone {name}")
        models.append(load_model(mdir))
    return BackbonePool(models, seed=stage_seed(cfg["seed"], "pool-draw"))


def stage_pretrain(cfg: dict, out: Path) -> dict:
    dataset = build_dataset(cfg)
    pcfg = PretrainConfig(**cfg["pretrain"])
    results = {}
    for i, name in enumerate(cfg["pool"]):
        spec = make_spec(name, dataset.image_shape, dataset.classes)
        model = build_backbone(spec, seed=stage_seed(cfg["seed"], f"init-{name}"))
        model.init_seed = stage_seed(cfg["seed"], f"init-{name}")
        model, acc = pretrain(model, dataset, config=pcfg,
                              seed=stage_seed(cfg["seed"], f"pretrain-{name}"))
        save_model(model, out / "models" / name)
        results[name] = acc
    _log(out, "pretrain", cfg, {"train_accuracy": results,
                                "dataset_fingerprint": dataset.fingerprint()})
    return results


def stage_capture(cfg: dict, out: Path) -> dict:
    dataset = build_dataset(cfg)
    hashes = {}
    for name in cfg["pool"]:
        mdir = out / "models" / name
        _require(mdir / "manifest", "pretrain", f"backbone {name}")
        model = load_model(mdir)
        bank = capture_conv_stats(model, dataset, n_p=cfg["capture"]["n_p"],
                                  batch_size=cfg["capture"]["batch_size"])
        save_bank(bank, out / "banks" / name)
        hashes[name] = dir_content_hash(out / "banks" / name)
    _log(out, "capture-stats", cfg, {"bank_hashes": hashes,
                                     "dataset_fingerprint": dataset.fingerprint()})
    return hashes


def stage_synthesize(cfg: dict, out: Path) -> Path:
    dataset = build_dataset(cfg)
    pool = _load_pool(cfg, out, "synthesize")
    banks = {}
    for name in cfg["pool"]:
        bdir = out / "banks" / name
        _require(bdir / "manifest", "capture-stats", f"statistics bank for {name}")
        bank = load_bank(bdir, backbone=name, fingerprint=dataset.fingerprint())
        if bank.extra.get("fingerprint_mismatch"):
            raise ArtifactError(
                f"bank {bdir} was captured on a different dataset; re-run capture-stats")
        banks[name] = bank
    scfg = dict(cfg["synthesis"])
    plan = BatchPlan(**scfg.pop("batch_plan"))
    scfg["adam_betas"] = tuple(scfg["adam_betas"])
    synth_cfg = SynthesisConfig(batch_plan=plan, seed=stage_seed(cfg["seed"], "synthesize"),
                                **scfg)
    synthetic = run_synthesis(pool, banks, synth_cfg, dataset=dataset)
    dest = out / "distilled"
    save_distilled(dest, synthetic.images.data, synthetic.labels,
                   ipc=synth_cfg.ipc, classes=dataset.classes,
                   extra={"pool": cfg["pool"]},
                   previews=cfg.get("previews", False))
    _log(out, "synthesize", cfg, {"distilled_hash": dir_content_hash(dest)})
    return dest


def stage_relabel(cfg: dict, out: Path) -> Path:
    pool = _load_pool(cfg, out, "relabel")
    dist_dir = out / "distilled"
    _require(dist_dir / "manifest", "synthesize", "distilled dataset")
    images, labels, manifest = load_distilled(dist_dir)
    synthetic = SyntheticDataset(Array(images), labels,
                                 ipc=manifest["ipc"], classes=manifest["classes"])
    rcfg = cfg["relabel"]
    store = relabel_dataset(synthetic, pool, epochs=rcfg["epochs"],
                            seed=stage_seed(cfg["seed"], "relabel"),
                            use_ln=rcfg["use_ln"], tau=rcfg["tau"],
                            augment=rcfg["augment"])
    dest = out / "labels.store"
    save_store(store, dest)
    _log(out, "relabel", cfg, {"records": len(store.records),
                               "store_hash": dir_content_hash_file(dest)})
    return dest


def dir_content_hash_file(path: Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_evaluate(cfg: dict, out: Path) -> dict:
    dataset = build_dataset(cfg)
    dist_dir = out / "distilled"
    _require(dist_dir / "manifest", "synthesize", "distilled dataset")
    store_path = out / "labels.store"
    _require(store_path, "relabel", "soft label store")
    images, labels, manifest = load_distilled(dist_dir)
    synthetic = SyntheticDataset(Array(images), labels,
                                 ipc=manifest["ipc"], classes=manifest["classes"])
    store = load_store(store_path)
    ecfg = cfg["evaluate"]
    eval_cfg = EvalConfig(epochs=ecfg["epochs"], optimizer=ecfg["optimizer"],
                          lr=ecfg["lr"], momentum=ecfg["momentum"],
                          gamma=ecfg["gamma"], batch_size=ecfg["batch_size"])
    spec = make_spec(ecfg["model"], dataset.image_shape, dataset.classes)
    report = train_eval_model(spec, synthetic, store, dataset, eval_cfg,
                              seed=stage_seed(cfg["seed"], "evaluate"))
    save_report(report, out / "eval")
    _log(out, "evaluate", cfg, {"accuracy": report.accuracy, "model": report.model})
    return {"accuracy": report.accuracy, "model": report.model}


def stage_diag(distilled_path: Path) -> dict:
    _require(Path(distilled_path) / "manifest", "synthesize", "distilled dataset")
    images, labels, manifest = load_distilled(distilled_path)
    synthetic = SyntheticDataset(Array(images), labels,
                                 ipc=manifest["ipc"], classes=manifest["classes"])
    return diversity_metric(synthetic)


def run_pipeline(cfg: dict, out: Path) -> dict:
    stage_pretrain(cfg, out)
    stage_capture(cfg, out)
    stage_synthesize(cfg, out)
    stage_relabel(cfg, out)
    return stage_evaluate(cfg, out)
