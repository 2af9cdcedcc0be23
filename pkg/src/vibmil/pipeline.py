"""Three-stage weakly supervised fine-tuning.

1. Learn a Bernoulli instance gate on frozen features with the VIB loss.
2. Distill every bag to its top-K gated instances and fine-tune the deeper
   encoder layers plus a fresh head end-to-end on the distilled bags.
3. Freeze the fine-tuned encoder, extract features for all instances and
   train a fresh MIL head on the full bags.

Every stage is a pure function of (data, config, seed).  Randomness is drawn
from generators keyed on ``(seed, epoch)`` and ``(seed, epoch, bag_id)``, so a
run resumed from a checkpoint replays exactly.

Training code never looks at latent instance labels.  Anything that needs
them (top-K recall) goes through :mod:`vibmil.metrics`.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from . import nn
from .optim import AdamW, OptimizerState, adamw_step, clip_grad_norm
from .synthgen import Dataset

__all__ = ["adamw_step", "AdamW", "OptimizerState"]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"VIBMILCK"


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, epoch: int, state: "TrainState"):
        super().__init__(f"{stage}: non-finite loss in epoch {epoch + 1}")
        self.stage = stage
        self.epoch = epoch
        self.state = state


class StageError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [64])
    feature_dim: int = 8
    activation: str = "tanh"
    norm: bool = True
    attn_dim: int = 16
    seed: int = 7


@dataclass
class Stage1Config:
    epochs: int = 25
    lr_gate: float = 1e-3
    lr_head: float = 1e-3
    beta: float = 0.1
    prior_rate: float = 0.05
    head_variant: str = "attention"
    seed: int = 0


@dataclass
class Stage2Config:
    epochs: int = 25
    lr_backbone: float = 1e-5
    lr_head: float = 1e-3
    k: int = 512
    frozen_layer_count: int = 1
    reuse_stage1_head: bool = False
    seed: int = 0


@dataclass
class Stage3Config:
    epochs: int = 25
    lr_head: float = 1e-3
    head_variant: str = "attention"
    seed: int = 0


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    clip_grad_norm: float = 5.0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def validate(self) -> None:
        for name, lr in [("stage1.lr_gate", self.stage1.lr_gate), ("stage1.lr_head", self.stage1.lr_head),
                         ("stage2.lr_backbone", self.stage2.lr_backbone), ("stage2.lr_head", self.stage2.lr_head),
                         ("stage3.lr_head", self.stage3.lr_head)]:
            if not lr > 0:
                raise ValueError(f"{name} must be > 0")
        for name, ep in [("stage1", self.stage1.epochs), ("stage2", self.stage2.epochs),
                         ("stage3", self.stage3.epochs)]:
            if ep < 1:
                raise ValueError(f"{name}.epochs must be >= 1")
        if self.stage2.k < 1:
            raise ValueError("stage2.k must be >= 1")
        if not 0 < self.stage1.prior_rate < 1:
            raise ValueError("stage1.prior_rate must lie in (0, 1)")
        if self.stage1.beta < 0:
            raise ValueError("stage1.beta must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            model=ModelConfig(**d.get("model", {})),
            stage1=Stage1Config(**d.get("stage1", {})),
            stage2=Stage2Config(**d.get("stage2", {})),
            stage3=Stage3Config(**d.get("stage3", {})),
            optimizer=OptimizerConfig(**d.get("optimizer", {})),
        )

    def replace(self, **sections) -> "TrainConfig":
        """Copy with fields overridden, e.g. ``replace(stage1={"beta": 1.0})``."""
        new = copy.deepcopy(self)
        for sec, values in sections.items():
            setattr(new, sec, dataclasses.replace(getattr(new, sec), **values))
        return new

    def with_seed(self, seed: int) -> "TrainConfig":
        return self.replace(stage1={"seed": seed}, stage2={"seed": seed}, stage3={"seed": seed})


def desk_config(seed: int = 0) -> TrainConfig:
    """Settings for the default synthetic bags (N of 512 to 2048 instead of tens of thousands).

    K keeps roughly the same fraction of each bag as 512 of a gigapixel slide,
    the small encoder needs a larger backbone step to move within 25 epochs,
    and the stage-3 attention head needs a larger step to leave its
    uniform-attention plateau when witnesses are this rare.
    """
    return TrainConfig().replace(stage2={"k": 64, "lr_backbone": 1e-4}, stage3={"lr_head": 3e-3}).with_seed(seed)


# ----------------------------------------------------------------------------
# model construction


def pretrained_encoder(model_cfg: ModelConfig, calibration: Dataset | None = None,
                       max_instances: int = 20000) -> nn.EncoderModel:
    """Task-agnostic starting encoder.

    Weights are seeded random; normalisation statistics are estimated once from
    unlabeled instances of ``calibration`` and then frozen.  It stands in for a
    frozen pretrained backbone: informative, but not shaped by the task.
    """
    if calibration is None or not len(calibration):
        raise StageError("pretrained_encoder needs calibration instances")
    in_dim = calibration[0].instances.shape[1]
    dims = [in_dim, *model_cfg.hidden_dims, model_cfg.feature_dim]
    enc = nn.EncoderModel.build(dims, model_cfg.activation, norm=model_cfg.norm, seed=model_cfg.seed)
    x = np.concatenate([b.instances for b in calibration])
    if x.shape[0] > max_instances:
        x = x[np.random.default_rng([model_cfg.seed, 0xCA1]).choice(x.shape[0], max_instances, replace=False)]
    enc.calibrate(x)
    enc.freeze()
    enc.freeze_stats(True)
    return enc


def n_classes_of(*datasets: Dataset) -> int:
    top = max(int(d.bag_labels.max()) for d in datasets if len(d))
    return max(2, top + 1)


# ----------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    stage: str
    epoch: int = 0
    losses: list[float] = field(default_factory=list)
    optimizers: dict[str, AdamW] = field(default_factory=dict)
    diverged: bool = False


def _optimizer(params, lr: float, oc: OptimizerConfig) -> AdamW:
    return AdamW(params, lr, (oc.beta1, oc.beta2), oc.eps, oc.weight_decay)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5F]).permutation(n)


def _zero(opts: dict[str, AdamW]) -> None:
    for o in opts.values():
        o.zero_grad()


def _step(opts: dict[str, AdamW], clip: float) -> None:
    if clip > 0:
        clip_grad_norm([p for o in opts.values() for p in o.params], clip)
    for o in opts.values():
        o.step()


def extract_features(dataset, encoder: nn.EncoderModel) -> list[np.ndarray]:
    """Features of every bag under a frozen ``encoder``, in dataset order."""
    return [nn.encode_array(encoder, bag.instances) for bag in dataset]


# ----------------------------------------------------------------------------
# stage 1


def stage1_train(dataset: Dataset, encoder: nn.EncoderModel, gate: nn.IBGate, head: nn.MILHead,
                 config: TrainConfig, state: TrainState | None = None, *, features=None,
                 until_epoch: int | None = None) -> TrainState:
    """Learn the gate and head with the VIB loss on frozen features (batch = one bag)."""
    if not len(dataset):
        raise StageError("stage 1: empty dataset")
    if encoder.parameters(trainable_only=True):
        raise StageError("stage 1 needs a fully frozen encoder")
    c1, oc = config.stage1, config.optimizer
    if state is None:
        state = TrainState("stage1", optimizers={
            "gate": _optimizer(gate.parameters(), c1.lr_gate, oc),
            "head": _optimizer(head.parameters(), c1.lr_head, oc),
        })
    if features is None:
        features = extract_features(dataset, encoder)
    labels = [bag.bag_label for bag in dataset]
    ids = [bag.bag_id for bag in dataset]
    last = c1.epochs if until_epoch is None else min(until_epoch, c1.epochs)
    while state.epoch < last:
        e = state.epoch
        total = 0.0
        for i in _epoch_order(len(dataset), c1.seed, e):
            z = ad.Tensor(features[i])
            probs = nn.gate_probs(gate, z)
            _, blended = nn.sample_mask(probs, np.random.default_rng([c1.seed, e, ids[i]]))
            logits, _ = nn.mil_forward(head, nn.apply_mask(z, blended))
            loss = nn.vib_loss(logits, labels[i], probs, gate)
            if not np.isfinite(loss.item()):
                state.diverged = True
                raise TrainingDiverged("stage1", e, state)
            _zero(state.optimizers)
            ad.backward(loss)
            _step(state.optimizers, oc.clip_grad_norm)
            total += loss.item()
        state.losses.append(total / len(dataset))
        state.epoch += 1
        log.debug("stage1 epoch %d loss %.5f", state.epoch, state.losses[-1])
    return state


# ----------------------------------------------------------------------------
# distillation


@dataclass
class DistilledBag:
    bag_id: int
    instances: np.ndarray
    bag_label: int
    source_indices: np.ndarray
    gate_probs: np.ndarray | None = None

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]


def distill(dataset: Dataset, encoder: nn.EncoderModel, gate: nn.IBGate, k: int,
            features=None) -> Dataset:
    """Replace each bag by its top-``k`` instances (raw features) by gate probability."""
    if features is None:
        features = extract_features(dataset, encoder)
    bags = []
    with ad.no_grad():
        for bag, z in zip(dataset, features):
            p = nn.gate_probs(gate, z).data
            idx = nn.top_k_select(p, k)
            bags.append(DistilledBag(bag.bag_id, bag.instances[idx], bag.bag_label, idx, p[idx]))
    return dataset.with_bags(bags)


def random_distill(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Control: keep ``k`` uniformly sampled instances per bag instead of the gated top-K."""
    bags = []
    for bag in dataset:
        n = bag.instances.shape[0]
        idx = np.random.default_rng([seed, 0xD0, bag.bag_id]).permutation(n)[:k]
        bags.append(DistilledBag(bag.bag_id, bag.instances[idx], bag.bag_label, idx))
    return dataset.with_bags(bags)


# ----------------------------------------------------------------------------
# stage 2


def prepare_finetune_encoder(encoder: nn.EncoderModel, frozen_layer_count: int) -> nn.EncoderModel:
    enc = encoder.copy()
    enc.freeze(frozen_layer_count)
    enc.freeze_stats(True)
    enc.training = True
    enc.instances_forwarded = 0
    return enc


def stage2_finetune(distilled: Dataset, encoder: nn.EncoderModel, head: nn.MILHead, config: TrainConfig,
                    state: TrainState | None = None, *, until_epoch: int | None = None,
                    max_bag_size: int | None = None) -> TrainState:
    """Fine-tune the unfrozen encoder layers and ``head`` on distilled bags, cross-entropy only.

    ``encoder`` is updated in place; call :func:`prepare_finetune_encoder`
    first to set the freeze flags.
    """
    if not len(distilled):
        raise StageError("stage 2: empty dataset")
    if head.in_dim != encoder.out_dim:
        raise StageError(f"stage 2: head expects {head.in_dim}-dim features, encoder emits {encoder.out_dim}")
    if max_bag_size is not None and any(b.instances.shape[0] > max_bag_size for b in distilled):
        raise StageError(f"stage 2: bags must hold at most {max_bag_size} instances")
    c2, oc = config.stage2, config.optimizer
    if state is None:
        opts = {"head": _optimizer(head.parameters(), c2.lr_head, oc)}
        backbone = encoder.parameters(trainable_only=True)
        if backbone:
            opts["backbone"] = _optimizer(backbone, c2.lr_backbone, oc)
        state = TrainState("stage2", optimizers=opts)
    last = c2.epochs if until_epoch is None else min(until_epoch, c2.epochs)
    while state.epoch < last:
        e = state.epoch
        total = 0.0
        for i in _epoch_order(len(distilled), c2.seed, e):
            bag = distilled[i]
            logits, _ = nn.mil_forward(head, nn.encode(encoder, bag.instances))
            loss = ad.cross_entropy(logits, bag.bag_label)
            if not np.isfinite(loss.item()):
                state.diverged = True
                raise TrainingDiverged("stage2", e, state)
            _zero(state.optimizers)
            ad.backward(loss)
            _step(state.optimizers, oc.clip_grad_norm)
            total += loss.item()
        state.losses.append(total / len(distilled))
        state.epoch += 1
        if not np.all([np.all(np.isfinite(p.data)) for p in encoder.parameters()]):
            state.diverged = True
            raise TrainingDiverged("stage2", e, state)
        log.debug("stage2 epoch %d loss %.5f", state.epoch, state.losses[-1])
    return state


# ----------------------------------------------------------------------------
# stage 3


def stage3_train(dataset: Dataset, encoder: nn.EncoderModel, head: nn.MILHead, config: TrainConfig,
                 state: TrainState | None = None, *, features=None,
                 until_epoch: int | None = None) -> TrainState:
    """Train ``head`` on full bags of frozen ``encoder`` features."""
    if not len(dataset):
        raise StageError("stage 3: empty dataset")
    if encoder.parameters(trainable_only=True):
        raise StageError("stage 3 needs a fully frozen encoder")
    c3, oc = config.stage3, config.optimizer
    if state is None:
        state = TrainState("stage3", optimizers={"head": _optimizer(head.parameters(), c3.lr_head, oc)})
    if features is None:
        features = extract_features(dataset, encoder)
    labels = [bag.bag_label for bag in dataset]
    last = c3.epochs if until_epoch is None else min(until_epoch, c3.epochs)
    while state.epoch < last:
        e = state.epoch
        total = 0.0
        for i in _epoch_order(len(dataset), c3.seed, e):
            logits, _ = nn.mil_forward(head, ad.Tensor(features[i]))
            loss = ad.cross_entropy(logits, labels[i])
            if not np.isfinite(loss.item()):
                state.diverged = True
                raise TrainingDiverged("stage3", e, state)
            _zero(state.optimizers)
            ad.backward(loss)
            _step(state.optimizers, 0.0)
            total += loss.item()
        state.losses.append(total / len(dataset))
        state.epoch += 1
    return state


# ----------------------------------------------------------------------------
# evaluation


def bag_scores(features: Sequence[np.ndarray], head: nn.MILHead, gate: nn.IBGate | None = None) -> np.ndarray:
    """Softmax class scores per bag.  With a gate, instances are scaled by their keep-probability."""
    out = []
    with ad.no_grad():
        for z in features:
            zt = ad.Tensor(z)
            if gate is not None:
                zt = nn.apply_mask(zt, nn.gate_probs(gate, zt))
            logits, _ = nn.mil_forward(head, zt)
            out.append(ad.softmax(logits).data)
    return np.array(out)


def evaluate(dataset, head: nn.MILHead, *, encoder: nn.EncoderModel | None = None, features=None,
             gate: nn.IBGate | None = None, metadata: dict | None = None, n_classes: int | None = None):
    if features is None:
        features = extract_features(dataset, encoder)
    scores = bag_scores(features, head, gate)
    labels = np.array([b.bag_label for b in dataset])
    md = dict(metadata or {})
    md.setdefault("corruption", getattr(dataset, "corruption", ""))
    return metrics.evaluate_scores(scores, labels, n_classes or head.n_classes, md)


# ----------------------------------------------------------------------------
# whole pipeline


@dataclass
class PipelineResult:
    encoder_frozen: nn.EncoderModel
    gate: nn.IBGate
    stage1_head: nn.MILHead
    encoder_ft: nn.EncoderModel | None = None
    stage2_head: nn.MILHead | None = None
    stage3_head: nn.MILHead | None = None
    states: dict[str, TrainState] = field(default_factory=dict)
    reports: list = field(default_factory=list)
    status: str = "completed"
    instance_forwards: dict[str, int] = field(default_factory=dict)


def _stage_guard(stage: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except TrainingDiverged:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(f"{stage} failed: {exc}") from exc


def run_pipeline(train: Dataset, val: Dataset, test: Dataset, config: TrainConfig, *,
                 out_dir: str | os.PathLike | None = None, encoder: nn.EncoderModel | None = None,
                 run_id: str = "run", random_k: bool = False, stages: Sequence[int] = (1, 2, 3),
                 extra_md: dict | None = None) -> PipelineResult:
    """Run stages 1 -> 2 -> 3, evaluating on val and test after each.

    With ``random_k`` the stage-2 distillation keeps random instances instead
    of the gated top-K.  Checkpoints and reports go to ``out_dir`` when given.
    A diverged stage-2 run is recorded in the reports with status
    ``diverged`` and stage 3 is skipped.
    """
    config.validate()
    c1, c2, c3 = config.stage1, config.stage2, config.stage3
    n_cls = n_classes_of(train, val, test)
    md = {"run_id": run_id, "seed": c1.seed, "dataset_id": train.config.get("seed", ""), **(extra_md or {})}
    if encoder is None:
        encoder = pretrained_encoder(config.model, train)
    out = Path(out_dir) if out_dir is not None else None

    gate = nn.IBGate.build(encoder.out_dim, c1.prior_rate, c1.beta, seed=c1.seed)
    head1 = nn.MILHead.build(c1.head_variant, encoder.out_dim, n_cls, config.model.attn_dim, seed=c1.seed)
    res = PipelineResult(encoder, gate, head1)
    feats = {name: extract_features(ds, encoder) for name, ds in (("train", train), ("val", val), ("test", test))}

    res.states["stage1"] = _stage_guard("stage1", stage1_train, train, encoder, gate, head1, config,
                                        features=feats["train"])
    probs = {name: [nn.gate_probs(gate, z).data for z in feats[name]] for name in ("val", "test")}
    for split, ds in (("val", val), ("test", test)):
        if not len(ds):
            continue
        rep = evaluate(ds, head1, features=feats[split], gate=gate, n_classes=n_cls,
                       metadata={**md, "stage": "stage1", "split": split, "head": c1.head_variant})
        rep.topk_recall = metrics.topk_recall(ds, encoder, gate, c2.k, probs=probs[split])
        rep.topk_k = c2.k
        res.reports.append(rep)
    if out is not None:
        save_checkpoint(out / "stage1.ckpt", encoder, gate, head1, res.states["stage1"], config)
    if 2 not in stages:
        _write_reports(out, res)
        return res

    def make_distilled(ds, name):
        if random_k:
            return random_distill(ds, c2.k, c2.seed)
        return distill(ds, encoder, gate, c2.k, features=feats[name])

    dtrain = make_distilled(train, "train")
    enc_ft = prepare_finetune_encoder(encoder, c2.frozen_layer_count)
    if c2.reuse_stage1_head:
        head2 = copy.deepcopy(head1)
    else:
        head2 = nn.MILHead.build(c3.head_variant, encoder.out_dim, n_cls, config.model.attn_dim, seed=c2.seed + 1)
    res.encoder_ft, res.stage2_head = enc_ft, head2
    stage2_md = {**md, "stage": "stage2", "head": head2.variant}
    try:
        res.states["stage2"] = _stage_guard("stage2", stage2_finetune, dtrain, enc_ft, head2, config)
    except TrainingDiverged as exc:
        res.states["stage2"] = exc.state
        res.status = "diverged"
        for split in ("val", "test"):
            res.reports.append(metrics.failed_report({**stage2_md, "split": split}))
        _write_reports(out, res)
        return res
    res.instance_forwards["stage2"] = enc_ft.instances_forwarded
    enc_ft.training = False
    enc_ft.freeze()
    for split, ds in (("val", val), ("test", test)):
        if len(ds):
            res.reports.append(evaluate(make_distilled(ds, split), head2, encoder=enc_ft, n_classes=n_cls,
                                        metadata={**stage2_md, "split": split}))
    if out is not None:
        save_checkpoint(out / "stage2.ckpt", enc_ft, gate, head2, res.states["stage2"], config)
    if 3 not in stages:
        _write_reports(out, res)
        return res

    head3 = nn.MILHead.build(c3.head_variant, enc_ft.out_dim, n_cls, config.model.attn_dim, seed=c3.seed + 2)
    res.stage3_head = head3
    ft_train = extract_features(train, enc_ft)
    res.states["stage3"] = _stage_guard("stage3", stage3_train, train, enc_ft, head3, config, features=ft_train)
    for split, ds in (("val", val), ("test", test)):
        if len(ds):
            res.reports.append(evaluate(ds, head3, encoder=enc_ft, n_classes=n_cls,
                                        metadata={**md, "stage": "stage3", "split": split, "head": c3.head_variant}))
    if out is not None:
        save_checkpoint(out / "stage3.ckpt", enc_ft, gate, head3, res.states["stage3"], config)
    _write_reports(out, res)
    return res


def train_frozen_baseline(train: Dataset, val: Dataset, test: Dataset, config: TrainConfig,
                          encoder: nn.EncoderModel, *, run_id: str = "run",
                          variant: str | None = None) -> tuple[nn.MILHead, list]:
    """Stage-3 head on the frozen starting encoder (no fine-tuning): the linear-probing baseline."""
    c3 = config.stage3
    n_cls = n_classes_of(train, val, test)
    variant = variant or c3.head_variant
    head = nn.MILHead.build(variant, encoder.out_dim, n_cls, config.model.attn_dim, seed=c3.seed + 2)
    stage3_train(train, encoder, head, config)
    reports = []
    for split, ds in (("val", val), ("test", test)):
        if len(ds):
            reports.append(evaluate(ds, head, encoder=encoder, n_classes=n_cls,
                                    metadata={"run_id": run_id, "seed": c3.seed, "stage": "frozen_baseline",
                                              "split": split, "head": variant}))
    return head, reports


def _write_reports(out: Path | None, res: PipelineResult) -> None:
    if out is None:
        return
    write_atomic(out / "report.csv", metrics.reports_to_csv(res.reports).encode())


# ----------------------------------------------------------------------------
# ablations


BETA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
TOPK_GRID = (128, 256, 512, 1024, 2048)
LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6)


def run_ablation(name: str, train: Dataset, val: Dataset, test: Dataset, config: TrainConfig, *,
                 grid: Sequence | None = None, encoder: nn.EncoderModel | None = None,
                 clip: bool = False) -> list:
    """One report row per grid cell (test split).

    Gradient clipping is off unless ``clip`` is set, so high learning rates
    can diverge as they would without the safeguard.

    ``beta`` rows are stage-1 results with top-K recall; ``topk``, ``lr`` and
    ``randomk`` rows are final stage-3 results (or ``diverged``).
    """
    if encoder is None:
        encoder = pretrained_encoder(config.model, train)
    if not clip:
        config = config.replace(optimizer={"clip_grad_norm": 0.0})
    rows = []
    if name == "beta":
        grid = grid or BETA_GRID
        for b in grid:
            res = run_pipeline(train, val, test, config.replace(stage1={"beta": float(b)}), encoder=encoder,
                               run_id=f"beta={b:g}", stages=(1,), extra_md={"sweep": "beta", "sweep_value": b})
            rows.append(_pick(res.reports, "stage1", "test"))
        return rows
    if name in ("topk", "lr", "randomk"):
        cells = {"topk": [("k", {"stage2": {"k": int(v)}}, v, False) for v in (grid or TOPK_GRID)],
                 "lr": [("lr_backbone", {"stage2": {"lr_backbone": float(v)}}, v, False) for v in (grid or LR_GRID)],
                 "randomk": [("random_k", {}, "topk", False), ("random_k", {}, "random", True)]}[name]
        for sweep, override, value, rk in cells:
            cfg = config.replace(**override) if override else config
            res = run_pipeline(train, val, test, cfg, encoder=encoder, run_id=f"{name}={value}", random_k=rk,
                               extra_md={"sweep": sweep, "sweep_value": value})
            if res.status == "diverged":
                rows.append(_pick(res.reports, "stage2", "test"))
            else:
                rows.append(_pick(res.reports, "stage3", "test"))
        return rows
    raise ValueError(f"unknown ablation {name!r}; expected beta, topk, lr or randomk")


def _pick(reports, stage: str, split: str):
    for r in reports:
        if r.metadata.get("stage") == stage and r.metadata.get("split") == split:
            return r
    raise StageError(f"no {stage}/{split} report")


# ----------------------------------------------------------------------------
# checkpoints


def write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _model_params(encoder: nn.EncoderModel, gate: nn.IBGate, head: nn.MILHead) -> dict[str, ad.Tensor]:
    params = {}
    for i, layer in enumerate(encoder.layers):
        params[f"enc{i}.w"] = layer.weight
        params[f"enc{i}.b"] = layer.bias
    params["gate.w"] = gate.weight
    params["gate.b"] = gate.bias
    for p in head.parameters():
        params[p.name] = p
    return params


def save_checkpoint(path, encoder: nn.EncoderModel, gate: nn.IBGate, head: nn.MILHead,
                    state: TrainState | None, config: TrainConfig | dict) -> None:
    params = _model_params(encoder, gate, head)
    name_of = {id(t): n for n, t in params.items()}
    records: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.items()]
    for i, layer in enumerate(encoder.layers):
        if layer.norm is not None:
            records += [(f"enc{i}.norm_mean", layer.norm.running_mean), (f"enc{i}.norm_var", layer.norm.running_var)]
    opt_meta = {}
    if state is not None:
        for key, opt in state.optimizers.items():
            opt_meta[key] = {"params": [name_of[id(p)] for p in opt.params], "lr": opt.lr,
                             "betas": list(opt.betas), "eps": opt.eps, "weight_decay": opt.weight_decay,
                             "step": opt.state.step, "initialised": bool(opt.state.m)}
            for j, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
                records += [(f"opt.{key}.{j}.m", m), (f"opt.{key}.{j}.v", v)]
    header = {
        "config": config.to_dict() if isinstance(config, TrainConfig) else config,
        "encoder": [{"activation": l.activation, "frozen": l.frozen, "norm": l.norm is not None,
                     "stats_frozen": bool(l.norm and l.norm.stats_frozen)} for l in encoder.layers],
        "gate": {"prior_rate": gate.prior_rate, "beta": gate.beta},
        "head": head.config,
        "state": None if state is None else {"stage": state.stage, "epoch": state.epoch, "losses": state.losses,
                                             "diverged": state.diverged, "optimizers": opt_meta},
    }
    text = json.dumps(header, sort_keys=True).encode()
    body = bytearray(struct.pack("<I", CHECKPOINT_VERSION))
    body += _CKPT_MAGIC + struct.pack("<Q", len(text)) + text + struct.pack("<Q", len(records))
    for name, arr in records:
        nb = name.encode()
        body += struct.pack("<Q", len(nb)) + nb + ad.tensor_to_bytes(arr)
    body += hashlib.sha256(bytes(body)).digest()
    write_atomic(Path(path), bytes(body))


@dataclass
class Checkpoint:
    encoder: nn.EncoderModel
    gate: nn.IBGate
    head: nn.MILHead
    state: TrainState | None
    config: dict


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 4 + len(_CKPT_MAGIC) + 32:
        raise CheckpointError("checkpoint too short")
    (version,) = struct.unpack_from("<I", buf, 0)
    if version != CHECKPOINT_VERSION or buf[4:4 + len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    off = 4 + len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", body, off)
    off += 8
    header = json.loads(body[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<Q", body, off)
    off += 8
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", body, off)
        off += 8
        name = body[off:off + nlen].decode()
        off += nlen
        arrays[name], off = ad.tensor_from_bytes(body, off)

    layers = []
    for i, spec in enumerate(header["encoder"]):
        norm = None
        if spec["norm"]:
            norm = nn.Norm(arrays[f"enc{i}.norm_mean"].copy(), arrays[f"enc{i}.norm_var"].copy(), spec["stats_frozen"])
        layers.append(nn.Layer(ad.Tensor(arrays[f"enc{i}.w"], name=f"enc{i}.w"),
                               ad.Tensor(arrays[f"enc{i}.b"], name=f"enc{i}.b"),
                               spec["activation"], norm, spec["frozen"]))
    encoder = nn.EncoderModel(layers)
    gate = nn.IBGate(ad.parameter(arrays["gate.w"], "gate.w"), ad.parameter(arrays["gate.b"], "gate.b"),
                     header["gate"]["prior_rate"], header["gate"]["beta"])
    hc = header["head"]
    head = nn.MILHead.build(hc["variant"], hc["dim"], hc["n_classes"], hc["attn_dim"])
    for p in head.parameters():
        p.data = arrays[p.name].copy()
    state = None
    if header["state"] is not None:
        hs = header["state"]
        params = _model_params(encoder, gate, head)
        opts = {}
        for key, meta in hs["optimizers"].items():
            opt = AdamW([params[n] for n in meta["params"]], meta["lr"], tuple(meta["betas"]), meta["eps"],
                        meta["weight_decay"])
            opt.state.step = meta["step"]
            if meta["initialised"]:
                opt.state.m = [arrays[f"opt.{key}.{j}.m"].copy() for j in range(len(meta["params"]))]
                opt.state.v = [arrays[f"opt.{key}.{j}.v"].copy() for j in range(len(meta["params"]))]
            opts[key] = opt
        state = TrainState(hs["stage"], hs["epoch"], list(hs["losses"]), opts, hs["diverged"])
    return Checkpoint(encoder, gate, head, state, header["config"])
