"""Command-line pipeline: teach -> score -> distill, plus eval and ablation sweeps.

Stages communicate through files in the output directory so an expensive
teacher and score set can be reused across many distillation runs::

    lrds teach   --config exp.json --out runs/a
    lrds score   --config exp.json --teacher runs/a/teacher.json --out runs/a
    lrds distill --config exp.json --teacher runs/a/teacher.json --scores runs/a/scores.csv --out runs/a
    lrds eval    --config exp.json --model runs/a/student.json
    lrds ablate  --config exp.json --ablation sweep.json --out runs/sweep

Exit codes: 0 success, 2 usage or config error, 3 validation error,
4 numerical error. Set LRDS_LOG_LEVEL to change log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import BlobSpec, Dataset, circle_centers, gen_blobs, load_csv, load_idx
from .errors import CapacityError, ConfigError, InvalidArgument, LRDSError, NumericalError, ValidationError
from .influence import (InfluenceConfig, InfluenceReport, SplitPlan, rank_and_split, read_scores_csv,
                        score_dataset, write_scores_csv, write_split_json)
from .losses import LossSpec
from .model import MeanModel, ModelSpec, load_checkpoint, params_checksum, save_checkpoint
from .numcore import derive_seed
from .revision import EtaMode, write_revised_csv
from .trainer import DistillConfig, TrainLog, distill, evaluate, prepare_supervision, train_teacher

logger = logging.getLogger("lrds")

ABLATION_PARAMETERS = ("lambda1", "lambda2", "eta", "pct", "order", "right_part_loss", "method")
METHODS = ("ce", "kd", "kd_mse", "lr", "ds", "lrds")


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path
    seed: int
    dataset: dict
    teacher: dict
    student_spec: ModelSpec
    distill: DistillConfig
    teacher_train: DistillConfig
    influence: InfluenceConfig
    output_dir: Path

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def header(self) -> str:
        return f"# config_hash={self.config_hash}\n"

    def teacher_spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.teacher["layer_dims"]), init_scale=float(self.teacher.get("init_scale", 1.0)),
                         seed=derive_seed(self.seed, "teacher-init"))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = dict(self.raw, seed=int(seed))
        return parse_config(raw, self.base_dir)


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    try:
        seed = int(raw.get("seed", 0))
        dataset = dict(raw["dataset"])
        teacher = dict(raw["teacher"])
        student = dict(raw["student"])
        dsec = dict(raw.get("distill", {}))
        dsec["seed"] = derive_seed(seed, "distill")
        dcfg = DistillConfig.from_dict(dsec)
        tsec = {k: v for k, v in dcfg.to_dict().items() if k in ("epochs", "batch_size", "lr0", "lr_decay_epochs",
                                                                   "lr_decay_factor", "momentum")}
        tsec.update(teacher.get("train", {}))
        tsec["seed"] = derive_seed(seed, "teacher-train")
        tcfg = DistillConfig.from_dict(tsec)
        student_spec = ModelSpec(tuple(student["layer_dims"]), init_scale=float(student.get("init_scale", 1.0)),
                                 seed=derive_seed(seed, "student-init"))
        icfg = InfluenceConfig.from_dict(raw.get("influence", {}))
        teacher.setdefault("model", "mlp")
        if teacher["model"] not in ("mlp", "mean"):
            raise ConfigError(f"unknown teacher model {teacher['model']!r}")
        if teacher["model"] == "mlp":
            ModelSpec(tuple(teacher["layer_dims"]))
    except KeyError as exc:
        raise ConfigError(f"config is missing required key {exc}") from exc
    except (TypeError, InvalidArgument) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    source = dataset.get("source")
    if source not in ("blobs", "csv", "idx"):
        raise ConfigError(f"dataset.source must be blobs, csv or idx, got {source!r}")
    for key in ("train", "test", "train_images", "train_labels", "test_images", "test_labels"):
        if key in dataset and dataset[key] is not None:
            path = (base_dir / dataset[key]).resolve()
            if not path.exists():
                raise ConfigError(f"dataset file not found: {path}")
            dataset[key] = str(path)
    out = Path(raw.get("output_dir", "runs"))
    return ExperimentConfig(raw, base_dir, seed, dataset, teacher, student_spec, dcfg, tcfg, icfg,
                            out if out.is_absolute() else base_dir / out)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if seed is not None:
        raw["seed"] = int(seed)
    return parse_config(raw, path.parent)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    d = cfg.dataset
    if d["source"] == "blobs":
        c = int(d.get("class_count", 3))
        centers = d.get("centers")
        if centers is None:
            centers = circle_centers(c, float(d.get("radius", 2.0)), int(d.get("dim", 2)))
        seed = int(d["seed"]) if d.get("seed") is not None else derive_seed(cfg.seed, "data")
        spread = d.get("spread", 1.0)
        spread = tuple(spread) if isinstance(spread, list) else spread
        train = gen_blobs(BlobSpec(c, int(d["samples_per_class"]), centers, spread,
                                   float(d.get("label_noise_rate", 0.0)), seed), "train")
        test = None
        if d.get("test_samples_per_class"):
            test_seed = int(d.get("test_seed", seed + 1))
            test = gen_blobs(BlobSpec(c, int(d["test_samples_per_class"]), centers, spread, 0.0, test_seed), "test")
        return train, test
    if d["source"] == "csv":
        cc = d.get("class_count")
        train = load_csv(d["train"], cc, "train")
        test = load_csv(d["test"], cc or train.class_count, "test") if d.get("test") else None
        return train, test
    cc = d.get("class_count")
    train = load_idx(d["train_images"], d["train_labels"], cc, "train")
    test = None
    if d.get("test_images"):
        test = load_idx(d["test_images"], d["test_labels"], cc or train.class_count, "test")
    return train, test


# ---------------------------------------------------------------------------
# stages (in-memory)


def teach(cfg: ExperimentConfig, train: Dataset, test: Dataset | None = None):
    if cfg.teacher["model"] == "mean":
        return MeanModel.fit(train.features), TrainLog()
    log = TrainLog()
    model = train_teacher(cfg.teacher_spec(), train, cfg.teacher_train, test=test, log=log,
                          l2=cfg.influence.l2)
    return model, log


def _check_fits(model, data: Dataset, what: str):
    if model.n_inputs != data.n_features:
        raise ValidationError(f"{what} expects {model.n_inputs} features, dataset has {data.n_features}")
    if not isinstance(model, MeanModel) and model.n_classes != data.class_count:
        raise ValidationError(f"{what} has {model.n_classes} classes, dataset has {data.class_count}")


def score(cfg: ExperimentConfig, teacher, train: Dataset) -> InfluenceReport:
    _check_fits(teacher, train, "teacher")
    return score_dataset(teacher, train, cfg.influence)


def plan_for(cfg: ExperimentConfig, report: InfluenceReport) -> SplitPlan:
    return rank_and_split(report, cfg.distill.pct, cfg.distill.order, derive_seed(cfg.seed, "split"))


def run_distill(cfg: ExperimentConfig, teacher, report: InfluenceReport, train: Dataset, test: Dataset | None):
    plan = plan_for(cfg, report)
    sup = prepare_supervision(teacher, train, plan, cfg.distill)
    student, log = distill(teacher, cfg.student_spec, train, plan, cfg.distill, test=test, supervision=sup)
    return student, log, plan, sup


# ---------------------------------------------------------------------------
# subcommands (file based)


def _out_dir(cfg: ExperimentConfig, out: str | None) -> Path:
    path = Path(out) if out else cfg.output_dir
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_teach(cfg: ExperimentConfig, out: str | None = None) -> Path:
    out_dir = _out_dir(cfg, out)
    train, test = load_datasets(cfg)
    model, log = teach(cfg, train, test)
    ckpt = out_dir / "teacher.json"
    save_checkpoint(model, ckpt, {"config_hash": cfg.config_hash, "dataset_checksum": train.checksum,
                                  "train_acc": evaluate(model, train) if not isinstance(model, MeanModel) else None})
    log.write_csv(out_dir / "teacher_log.csv", cfg.header)
    logger.info("teacher written to %s", ckpt)
    return ckpt


def cmd_score(cfg: ExperimentConfig, teacher_path, out: str | None = None) -> Path:
    out_dir = _out_dir(cfg, out)
    train, _ = load_datasets(cfg)
    teacher = load_checkpoint(teacher_path)
    report = score(cfg, teacher, train)
    path = out_dir / "scores.csv"
    write_scores_csv(path, report, cfg.header)
    return path


def cmd_distill(cfg: ExperimentConfig, teacher_path, scores_path, out: str | None = None) -> Path:
    out_dir = _out_dir(cfg, out)
    train, test = load_datasets(cfg)
    teacher = load_checkpoint(teacher_path)
    _check_fits(teacher, train, "teacher")
    report = read_scores_csv(scores_path)
    if report.scores.size != len(train):
        raise ValidationError(f"scores cover {report.scores.size} samples, dataset has {len(train)}")
    if report.dataset_checksum and report.dataset_checksum != train.checksum:
        raise ValidationError("stale scores: dataset checksum does not match the scores file")
    if report.teacher_checksum and report.teacher_checksum != params_checksum(teacher):
        raise ValidationError("stale scores: teacher checksum does not match the scores file")
    student, log, plan, sup = run_distill(cfg, teacher, report, train, test)
    write_split_json(out_dir / "split.json", plan, {"config_hash": cfg.config_hash})
    write_revised_csv(out_dir / "revised_labels.csv", sup.revised, train.class_count, cfg.header)
    log.write_csv(out_dir / "student_log.csv", cfg.header)
    ckpt = out_dir / "student.json"
    save_checkpoint(student, ckpt, {"config_hash": cfg.config_hash})
    return ckpt


def cmd_eval(cfg: ExperimentConfig, model_path) -> dict:
    train, test = load_datasets(cfg)
    model = load_checkpoint(model_path)
    _check_fits(model, train, "model")
    result = {"model": str(model_path), "train_acc": evaluate(model, train)}
    if test is not None:
        result["test_acc"] = evaluate(model, test)
    return result


# ---------------------------------------------------------------------------
# ablations


def apply_setting(cfg: ExperimentConfig, name: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one swept hyper-parameter replaced."""
    d, loss = cfg.distill, cfg.distill.loss
    if name == "lambda1":
        d = replace(d, loss=replace(loss, lambda1=float(value)))
    elif name == "lambda2":
        d = replace(d, loss=replace(loss, lambda2=float(value)))
    elif name == "eta":
        if isinstance(value, str):
            d = replace(d, eta_mode=EtaMode(value))
        else:
            d = replace(d, eta_mode=EtaMode("fixed", float(value)))
    elif name == "pct":
        d = replace(d, pct=float(value))
    elif name == "order":
        d = replace(d, order=str(value))
    elif name == "right_part_loss":
        d = replace(d, loss=replace(loss, right_part_loss=str(value)))
    elif name == "method":
        d = method_config(d, str(value))
    else:
        raise ConfigError(f"cannot ablate {name!r}; choose from {ABLATION_PARAMETERS}")
    raw = dict(cfg.raw, ablation={**cfg.raw.get("ablation", {}), name: value})
    return replace(cfg, distill=d, raw=raw)


def method_config(d: DistillConfig, method: str) -> DistillConfig:
    """Preset rows of the method comparison table."""
    loss = d.loss
    if method == "ce":
        return replace(d, pct=0.0, loss=replace(loss, lambda1=0.0, lambda2=0.0))
    if method == "kd":
        return replace(d, pct=1.0, revise=False, loss=replace(loss, right_part_loss="kl_distill"))
    if method == "kd_mse":
        return replace(d, pct=1.0, revise=False, loss=replace(loss, right_part_loss="mse_logits"))
    if method == "lr":
        return replace(d, pct=1.0, revise=True)
    if method == "ds":
        return replace(d, revise=False, loss=replace(loss, right_part_loss="kl_distill"))
    if method == "lrds":
        return replace(d, revise=True)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def parse_ablation(doc: dict) -> tuple[list[str], list[tuple], list[int], bool]:
    if "grid" in doc:
        grid = doc["grid"]
        names = list(grid)
        cells = list(itertools.product(*(grid[n] for n in names)))
    else:
        names = [doc.get("parameter")]
        cells = [(v,) for v in doc.get("values", [])]
    seeds = [int(s) for s in doc.get("seeds", [])]
    for n in names:
        if n not in ABLATION_PARAMETERS:
            raise ConfigError(f"cannot ablate {n!r}; choose from {ABLATION_PARAMETERS}")
    if not cells or not seeds:
        raise ConfigError("ablation needs non-empty value and seed lists")
    return names, cells, seeds, bool(doc.get("share_teacher", True))


def _cell_label(cell) -> str:
    return ";".join(str(v) for v in cell)


def run_ablation(cfg: ExperimentConfig, doc: dict, out_dir: Path, teacher=None, report=None) -> list[dict]:
    """Run every (cell, seed) pair; returns result rows followed by summary rows."""
    names, cells, seeds, shared = parse_ablation(doc)
    param = ";".join(names)
    runs = {}
    prepared = {}

    def context(seed):
        key = None if shared else seed
        if key not in prepared:
            base = cfg if shared else cfg.with_seed(seed)
            train, test = load_datasets(base)
            t = teacher if (shared and teacher is not None) else teach(base, train)[0]
            r = report if (shared and report is not None) else score(base, t, train)
            prepared[key] = (train, test, t, r)
        return prepared[key]

    for seed in seeds:
        train, test, t, r = context(seed)
        for cell in cells:
            run_cfg = cfg.with_seed(seed)
            for n, v in zip(names, cell):
                run_cfg = apply_setting(run_cfg, n, v)
            row = {"row_type": "run", "parameter": param, "value": _cell_label(cell), "seed": seed,
                   "test_acc": None, "test_acc_std": None, "dt_size": None, "ds_size": None, "error": ""}
            run_dir = out_dir / "runs" / f"{param}={_cell_label(cell)}".replace(";", "_") / f"seed_{seed}"
            try:
                student, log, plan, _ = run_distill(run_cfg, t, r, train, test)
                run_dir.mkdir(parents=True, exist_ok=True)
                write_split_json(run_dir / "split.json", plan, {"config_hash": run_cfg.config_hash})
                log.write_csv(run_dir / "student_log.csv", run_cfg.header)
                row.update(test_acc=evaluate(student, test if test is not None else train),
                           dt_size=len(plan.dt_indices), ds_size=len(plan.ds_indices))
            except LRDSError as exc:
                logger.error("run %s=%s seed %d failed: %s", param, _cell_label(cell), seed, exc)
                row["error"] = str(exc)
            runs.setdefault(cell, []).append(row)

    rows, summary = [], []
    for cell in cells:
        rows.extend(runs[cell])
        accs = [x["test_acc"] for x in runs[cell] if x["test_acc"] is not None]
        summary.append({"row_type": "summary", "parameter": param, "value": _cell_label(cell), "seed": "",
                        "test_acc": float(np.mean(accs)) if accs else None,
                        "test_acc_std": float(np.std(accs, ddof=1)) if len(accs) > 1 else (0.0 if accs else None),
                        "dt_size": None, "ds_size": None, "error": "" if accs else "all runs failed"})
    return rows + summary


SUMMARY_COLUMNS = ("row_type", "parameter", "value", "seed", "test_acc", "test_acc_std", "dt_size", "ds_size",
                   "error")


def write_summary_csv(path, rows: list[dict], header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in SUMMARY_COLUMNS])


def cmd_ablate(cfg: ExperimentConfig, ablation_path, out: str | None = None, teacher_path=None,
               scores_path=None) -> Path:
    path = Path(ablation_path)
    if not path.is_file():
        raise ConfigError(f"ablation file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    out_dir = _out_dir(cfg, out)
    teacher = load_checkpoint(teacher_path) if teacher_path else None
    report = read_scores_csv(scores_path) if scores_path else None
    rows = run_ablation(cfg, doc, out_dir, teacher, report)
    summary = out_dir / "ablation_summary.csv"
    write_summary_csv(summary, rows, cfg.header)
    if all(r["error"] for r in rows if r["row_type"] == "run"):
        raise NumericalError("every ablation run failed")
    return summary


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrds", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")

    common(sub.add_parser("teach", help="train the teacher"))
    p = sub.add_parser("score", help="influence-score the training set")
    common(p)
    p.add_argument("--teacher", required=True)
    p = sub.add_parser("distill", help="train a student with LR and DS")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--scores", required=True)
    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    common(p)
    p.add_argument("--model", required=True)
    p = sub.add_parser("ablate", help="hyper-parameter sweep")
    common(p)
    p.add_argument("--ablation", required=True, help="ablation spec JSON")
    p.add_argument("--teacher", help="reuse this teacher checkpoint")
    p.add_argument("--scores", help="reuse this scores file")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LRDS_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "teach":
            print(cmd_teach(cfg, args.out))
        elif args.command == "score":
            print(cmd_score(cfg, args.teacher, args.out))
        elif args.command == "distill":
            print(cmd_distill(cfg, args.teacher, args.scores, args.out))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(cfg, args.model)))
        else:
            print(cmd_ablate(cfg, args.ablation, args.out, args.teacher, args.scores))
    except (ConfigError, InvalidArgument, CapacityError) as exc:
        print(f"lrds: error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"lrds: validation error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"lrds: numerical error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"lrds: error: {exc}", file=sys.stderr)
        return 2
    return 0
