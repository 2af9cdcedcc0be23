"""Command-line entry point: ``vibmil {generate,corrupt,train,eval,report}``.

Experiments are described by an INI file with the sections below.  Every key
has a default; unknown sections or keys are rejected so typos never pass
silently.

    [dataset]     synthetic bag generator (see ``DatasetConfig``)
    [split]       ratios = 0.6, 0.1, 0.3 ; seed = 0
    [model]       starting encoder shape (see ``ModelConfig``)
    [stage1] [stage2] [stage3] [optimizer]
                  training hyperparameters (see ``TrainConfig``)
    [evaluation]  knn_k, v_score, v_score_clusters, topk_recall
    [experiment]  seed (applied to every seed above when set), out

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training divergence.
The log level comes from ``VIBMIL_LOG_LEVEL`` (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics, nn
from . import pipeline as pl
from . import synthgen as sg

log = logging.getLogger("vibmil")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
HEAD_CHOICES = ("attention", "mean", "max", "knn-mean", "knn-max")
REPORT_NAMES = ("report.csv", "eval.csv")
CONSOLIDATED = "consolidated.csv"


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    ratios: list[float] = field(default_factory=lambda: [0.6, 0.1, 0.3])
    seed: int = 0


@dataclass
class EvaluationConfig:
    knn_k: int = 5
    v_score: bool = True
    v_score_clusters: int = 0  # 0: number of latent classes
    v_score_instances: int = 4000
    topk_recall: bool = True


@dataclass
class ExperimentSection:
    seed: int | None = None
    out: str = "runs"


@dataclass
class ExperimentConfig:
    dataset: sg.DatasetConfig = field(default_factory=sg.DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: pl.TrainConfig = field(default_factory=pl.TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def apply_seed(self, seed: int | None) -> None:
        """Use one global seed for data generation, splitting and every training stage."""
        if seed is None:
            return
        self.experiment.seed = seed
        self.dataset.seed = seed
        self.split.seed = seed
        for stage in (self.train.stage1, self.train.stage2, self.train.stage3):
            stage.seed = seed


_TRAIN_SECTIONS = ("model", "stage1", "stage2", "stage3", "optimizer")


def _sections(cfg: ExperimentConfig) -> dict[str, object]:
    out = {"dataset": cfg.dataset, "split": cfg.split, "evaluation": cfg.evaluation,
           "experiment": cfg.experiment}
    out.update({name: getattr(cfg.train, name) for name in _TRAIN_SECTIONS})
    return out


def _coerce(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            kind = type(default[0]) if default else float
            return [kind(v) for v in raw.replace(",", " ").split()]
        if default is None:
            return None if raw.lower() in ("", "none") else int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def load_config(path: str | os.PathLike | None, seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config {path}: {exc}") from exc
        targets = _sections(cfg)
        for section in parser.sections():
            if section not in targets:
                raise ConfigError(f"unknown config section [{section}]")
            obj = targets[section]
            known = {f.name: f for f in dataclasses.fields(obj)}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                setattr(obj, key, _coerce(raw, getattr(obj, key), f"[{section}] {key}"))
    cfg.apply_seed(cfg.experiment.seed if seed is None else seed)
    try:
        cfg.dataset.validate()
        cfg.train.validate()
    except (ValueError, sg.DatasetError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def config_to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, obj in _sections(cfg).items():
        values = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            values[f.name] = ", ".join(str(x) for x in v) if isinstance(v, list) else ("" if v is None else str(v))
        parser[name] = values
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# ----------------------------------------------------------------------------
# helpers


def _load(path) -> sg.Dataset:
    if not (Path(path) / sg.MANIFEST_NAME).is_file():
        raise FileNotFoundError(f"no dataset at {path}")
    return sg.load_dataset(path)


def _splits(dataset: sg.Dataset, cfg: ExperimentConfig) -> tuple[sg.Dataset, sg.Dataset, sg.Dataset]:
    ratios = list(cfg.split.ratios)
    if len(ratios) != 3:
        raise ConfigError("[split] ratios needs three values (train, val, test)")
    tr, va, te = sg.split(dataset, ratios, seed=cfg.split.seed)
    return tr, va, te


def _balance(dataset: sg.Dataset) -> str:
    counts = np.bincount(dataset.bag_labels, minlength=2)
    return ", ".join(f"class {c}: {n}" for c, n in enumerate(counts))


def _summary(rows: list[dict]) -> str:
    """Best beta, best K and the frozen-vs-fine-tuned AUC delta from consolidated rows."""

    def auc(r):
        try:
            return float(r["macro_auc"])
        except ValueError:
            return float("nan")

    lines = [f"rows: {len(rows)}"]
    test = [r for r in rows if r["split"] == "test" and r["status"] == "completed" and np.isfinite(auc(r))]
    for sweep, label in (("beta", "best beta"), ("k", "best K"), ("lr_backbone", "best lr_backbone")):
        cells = [r for r in test if r["sweep"] == sweep]
        if cells:
            best = max(cells, key=auc)
            lines.append(f"{label}: {best['sweep_value']} (test macro_auc {auc(best):.4f})")
    ft = [auc(r) for r in test if r["stage"] == "stage3" and not r["sweep"]]
    frozen = [auc(r) for r in test if r["stage"] == "frozen_baseline"]
    if ft and frozen:
        delta = float(np.mean(ft) - np.mean(frozen))
        lines.append(f"fine-tuned test macro_auc {np.mean(ft):.4f}, frozen {np.mean(frozen):.4f}, delta {delta:+.4f}")
    diverged = [r for r in rows if r["status"] == "diverged"]
    if diverged:
        lines.append("diverged: " + ", ".join(r["run_id"] or "?" for r in diverged if r["split"] == "test"))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds = sg.generate_dataset(cfg.dataset)
    sg.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} bags to {args.out} ({_balance(ds)}); sha256 {sg.dataset_checksum(args.out)}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    try:
        spec = sg.CorruptionSpec(args.kind, args.severity, args.seed or 0)
    except sg.DatasetError as exc:
        raise ConfigError(str(exc)) from exc
    ds = _load(args.data)
    out = sg.apply_corruption(ds, spec)
    sg.save_dataset(out, args.out)
    print(f"wrote {len(out)} bags to {args.out} ({out.corruption})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out or cfg.experiment.out)
    data = _load(args.data)
    tr, va, te = _splits(data, cfg)
    tc = cfg.train
    md = {"dataset_id": sg.dataset_checksum(args.data)[:12]}
    encoder = pl.pretrained_encoder(tc.model, tr)
    pl.write_atomic(out / "config.ini", config_to_ini(cfg).encode())
    stage = args.stage
    if stage.startswith("ablation:"):
        name = stage.split(":", 1)[1]
        rows = pl.run_ablation(name, tr, va, te, tc, encoder=encoder)
        for r in rows:
            r.metadata.update(md)
        pl.write_atomic(out / "report.csv", metrics.reports_to_csv(rows).encode())
        text = metrics.reports_to_csv(rows)
        summary = _summary(list(csv.DictReader(io.StringIO(text))))
        pl.write_atomic(out / "summary.txt", summary.encode())
        print(summary, end="")
        return EXIT_OK
    stages = {"1": (1,), "2": (1, 2), "3": (1, 2, 3), "all": (1, 2, 3)}[stage]
    res = pl.run_pipeline(tr, va, te, tc, out_dir=out, encoder=encoder, run_id=f"seed{tc.stage1.seed}",
                          stages=stages, extra_md=md)
    reports = list(res.reports)
    if res.status == "completed" and 3 in stages:
        _, base = pl.train_frozen_baseline(tr, va, te, tc, encoder, run_id=f"seed{tc.stage1.seed}")
        for r in base:
            r.metadata.update(md)
        reports += base
    text = metrics.reports_to_csv(reports)
    pl.write_atomic(out / "report.csv", text.encode())
    summary = _summary(list(csv.DictReader(io.StringIO(text))))
    pl.write_atomic(out / "summary.txt", summary.encode())
    print(summary, end="")
    if res.status == "diverged":
        log.error("training diverged; partial report written to %s", out / "report.csv")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"no checkpoint at {args.checkpoint}")
    ck = pl.load_checkpoint(args.checkpoint)
    data = _load(args.data)
    tr, va, te = _splits(data, cfg)
    target = {"train": tr, "val": va, "test": te, "all": data}[args.split]
    encoder, ev = ck.encoder, cfg.evaluation
    n_cls = max(ck.head.n_classes, pl.n_classes_of(data))
    tc = pl.TrainConfig.from_dict(ck.config) if "stage1" in ck.config else cfg.train
    md = {"run_id": Path(args.checkpoint).stem, "split": args.split, "corruption": data.corruption,
          "dataset_id": sg.dataset_checksum(args.data)[:12], "stage": "eval", "seed": tc.stage3.seed}
    feats = pl.extract_features(target, encoder)
    train_feats = None
    reports = []
    for head_name in args.head or [ck.head.variant]:
        hmd = {**md, "head": head_name}
        if head_name.startswith("knn-"):
            train_feats = train_feats or pl.extract_features(tr, encoder)
            rep = metrics.knn_eval(train_feats, tr.bag_labels, feats, target.bag_labels, ev.knn_k,
                                   head_name.split("-", 1)[1], n_cls, hmd)
        else:
            head = ck.head
            if head.variant != head_name:
                train_feats = train_feats or pl.extract_features(tr, encoder)
                head = nn.MILHead.build(head_name, encoder.out_dim, n_cls, tc.model.attn_dim, seed=tc.stage3.seed + 2)
                pl.stage3_train(tr, encoder, head, tc, features=train_feats)
            rep = pl.evaluate(target, head, features=feats, n_classes=n_cls, metadata=hmd)
        if ev.v_score:
            rep.v_score = _instance_v_score(target, feats, ev, tc.stage3.seed)
        if ev.topk_recall:
            rep.topk_recall = metrics.topk_recall(target, encoder, ck.gate, tc.stage2.k)
            rep.topk_k = tc.stage2.k
        reports.append(rep)
    out = Path(args.out or cfg.experiment.out)
    text = metrics.reports_to_csv(reports)
    pl.write_atomic(out / "eval.csv", text.encode())
    pl.write_atomic(out / "eval.txt", "\n".join(r.to_text() for r in reports).encode())
    sys.stdout.write(text)
    return EXIT_OK


def _instance_v_score(dataset, feats, ev: EvaluationConfig, seed: int) -> float:
    return metrics.dataset_v_score(dataset, feats, n_clusters=ev.v_score_clusters or None,
                                   max_instances=ev.v_score_instances, seed=seed)


def cmd_report(args) -> int:
    root = Path(args.dir)
    files = sorted(p for name in REPORT_NAMES for p in root.rglob(name))
    if not files:
        raise FileNotFoundError(f"no reports under {root}")
    rows = []
    for p in files:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != metrics.CSV_COLUMNS:
                log.warning("skipping %s: unexpected columns", p)
                continue
            rows += list(reader)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=metrics.CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    pl.write_atomic(root / CONSOLIDATED, buf.getvalue().encode())
    summary = _summary(rows)
    pl.write_atomic(root / "summary.txt", summary.encode())
    print(summary, end="")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


def _stage(value: str) -> str:
    ok = {"1", "2", "3", "all"} | {f"ablation:{n}" for n in ("beta", "topk", "lr", "randomk")}
    if value not in ok:
        raise argparse.ArgumentTypeError(f"expected one of {sorted(ok)}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="vibmil", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate a synthetic bag dataset")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("corrupt", parents=[common], help="write a corrupted copy of a dataset")
    c.add_argument("data")
    c.add_argument("--kind", required=True)
    c.add_argument("--severity", type=int, default=2)
    c.set_defaults(func=cmd_corrupt)

    t = sub.add_parser("train", parents=[common], help="run training stages or an ablation sweep")
    t.add_argument("data")
    t.add_argument("--stage", type=_stage, default="all", help="1, 2, 3, all or ablation:{beta,topk,lr,randomk}")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--head", choices=HEAD_CHOICES, action="append",
                   help="repeatable; defaults to the checkpoint's own head")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="merge every report under a directory")
    r.add_argument("dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("VIBMIL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "generate" and not args.out:
        print("vibmil generate: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "corrupt" and not args.out:
        print("vibmil corrupt: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, sg.DatasetError, pl.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
