"""Two-stage training: alternating source/target batches, per-group learning
rates, best-validation checkpointing, then pseudo-label self-training.

Randomness is split into named streams derived from the run seed: parameter
init, dropout masks, and batch order draw from independent generators, so
ablations that share a seed also share whatever streams their variants have
in common. Determinism is guaranteed for single-threaded runs.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import metrics
from .losses import LossWeights, PredictionSet, pseudo_labels, stage1_objective, stage2_objective
from .model import (ModelConfig, PreparedBatch, ThreeBranchModel, load_checkpoint,
                    merge_batches, prepare_sample, save_checkpoint)
from .synthio import SyntheticDataset

AGGREGATION_MODES = ("fuse+3d", "vfm+3d")


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, sample_ids: list[str], terms: dict[str, float]):
        super().__init__(f"non-finite loss at iteration {iteration}; offending batch: {sample_ids}; "
                         f"terms: {terms}")
        self.iteration = iteration
        self.sample_ids = sample_ids


class PseudoLabelError(RuntimeError):
    """Stage 2 was started without pseudo labels for a target sample."""


@dataclass
class TrainConfig:
    batch_size: int = 24
    max_iterations: int = 3000
    lr_2d_head: float = 1e-3
    lr_fusion: float = 1e-3
    lr_3d: float = 3e-3
    lr_milestones: tuple[float, ...] = (0.7, 0.9)  # fractions of max_iterations
    lr_gamma: float = 0.1
    seed: int = 0
    eval_every: int = 100
    single_thread: bool = True
    stage2_init: str = "scratch"  # or "finetune" from the stage-1 weights
    pl_threshold: float | None = None  # optional pseudo-label confidence cutoff

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_2d_head", "lr_fusion", "lr_3d"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.stage2_init not in ("scratch", "finetune"):
            raise ValueError("stage2_init must be 'scratch' or 'finetune'")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)


@dataclass
class RunState:
    iteration: int = 0
    best_val_miou: float = float("-inf")
    best_checkpoint_path: str | None = None
    stream_seeds: dict[str, int] = field(default_factory=dict)


def named_stream_seeds(seed: int) -> dict[str, int]:
    """Independent integer seeds for the init, dropout, and data-order streams."""
    names = ("init", "dropout", "order", "stage2_init")
    return {name: int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) % (2 ** 31)
            for i, name in enumerate(names)}


class SceneCache:
    """Lazily prepared per-scene model inputs (lifting, kNN); read-only reuse."""

    def __init__(self, dataset: SyntheticDataset, config: ModelConfig,
                 dtype: torch.dtype = torch.float32):
        self.dataset = dataset
        self.config = config
        self.dtype = dtype
        self._cache: dict[str, PreparedBatch] = {}

    def get(self, sample_id: str) -> PreparedBatch:
        if sample_id not in self._cache:
            self._cache[sample_id] = prepare_sample(
                self.dataset.samples[sample_id], self.config, self.dtype)
        return self._cache[sample_id]

    def batch(self, sample_ids: list[str], with_labels: bool) -> PreparedBatch:
        return merge_batches([self.get(s) for s in sample_ids], with_labels=with_labels)


class _EpochCycler:
    """Yields shuffled fixed-size id batches, reshuffling each epoch."""

    def __init__(self, ids: list[str], batch_size: int, rng: np.random.Generator):
        if not ids:
            raise ValueError("cannot cycle over an empty id list")
        self.ids = list(ids)
        self.batch_size = min(batch_size, len(ids))
        self.rng = rng
        self._queue: list[str] = []

    def next(self) -> list[str]:
        while len(self._queue) < self.batch_size:
            order = self.rng.permutation(len(self.ids))
            self._queue.extend(self.ids[i] for i in order)
        out, self._queue = self._queue[:self.batch_size], self._queue[self.batch_size:]
        return out


def build_optimizer(model: ThreeBranchModel, config: TrainConfig) -> torch.optim.Optimizer:
    """Adaptive momentum-free updates (Adam with a zero first moment)."""
    groups = model.trainable_parameters()
    return torch.optim.Adam([
        {"params": groups["2d_head"], "lr": config.lr_2d_head},
        {"params": groups["3d"], "lr": config.lr_3d},
        {"params": groups["fusion"], "lr": config.lr_fusion},
    ], betas=(0.0, 0.999))


@dataclass
class EvalReport:
    """Per-branch IoU results; "fusion" backs the reported 2D column."""
    branches: dict[str, metrics.IouResult]
    aggregation_mode: str

    def miou(self, branch: str) -> float:
        return self.branches[branch].miou


def _eval_forward(model: ThreeBranchModel, cache: SceneCache, sample_id: str):
    batch = cache.get(sample_id)
    with torch.no_grad():
        outputs = model(batch)
    return batch, outputs


def evaluate(model: ThreeBranchModel, cache: SceneCache, split_ids: list[str],
             aggregation_mode: str = "fuse+3d") -> EvalReport:
    """Per-class IoU and mIoU for each branch over every point of a split.

    The aggregate branch averages the softmax of the 3D main head with either
    the fusion main head ("fuse+3d") or the frozen-2D linear head ("vfm+3d").
    """
    if aggregation_mode not in AGGREGATION_MODES:
        raise ValueError(f"aggregation_mode must be one of {AGGREGATION_MODES}")
    if not split_ids:
        raise ValueError("split is empty")
    k = model.config.num_classes
    cms = {name: metrics.ConfusionMatrix(k) for name in ("vfm", "3d", "fusion", "aggregate")}
    model.eval()
    for sid in split_ids:
        batch, out = _eval_forward(model, cache, sid)
        labels = batch.labels.numpy()
        p3d = torch.softmax(out.logits_3d_main, dim=1).numpy()
        pfuse = torch.softmax(out.logits_fuse_main, dim=1).numpy()
        pvfm = torch.softmax(out.logits_2d_main, dim=1).numpy()
        cms["vfm"].update(labels, pvfm.argmax(axis=1))
        cms["3d"].update(labels, p3d.argmax(axis=1))
        cms["fusion"].update(labels, pfuse.argmax(axis=1))
        partner = pfuse if aggregation_mode == "fuse+3d" else pvfm
        _, agg_pred = metrics.aggregate(partner, p3d)
        cms["aggregate"].update(labels, agg_pred)
    return EvalReport({name: metrics.iou(cm) for name, cm in cms.items()}, aggregation_mode)


class _JsonlLogger:
    def __init__(self, path: str):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self.path = path
        self._fh = open(path, "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _train_loop(model: ThreeBranchModel, dataset: SyntheticDataset, config: TrainConfig,
                weights: LossWeights, guide_mode: str, out_dir: str,
                pseudo: dict[str, np.ndarray] | None,
                pl_masks: dict[str, np.ndarray] | None,
                order_seed: int, checkpoint_meta: dict | None = None) -> tuple[str, RunState]:
    os.makedirs(out_dir, exist_ok=True)
    if config.single_thread:
        torch.set_num_threads(1)
    cache = SceneCache(dataset, model.config)
    order_rng = np.random.Generator(np.random.PCG64(order_seed))
    src_cycler = _EpochCycler(dataset.splits.source_train, config.batch_size, order_rng)
    tgt_cycler = _EpochCycler(dataset.splits.target_train, config.batch_size, order_rng)
    optimizer = build_optimizer(model, config)
    milestones = sorted({max(1, int(f * config.max_iterations)) for f in config.lr_milestones})
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones, gamma=config.lr_gamma)
    log = _JsonlLogger(os.path.join(out_dir, "train_log.jsonl"))
    state = RunState(stream_seeds=named_stream_seeds(config.seed))
    ckpt_path = os.path.join(out_dir, "best.ckpt.npz")

    try:
        for it in range(1, config.max_iterations + 1):
            src_ids = src_cycler.next()
            tgt_ids = tgt_cycler.next()
            src_batch = cache.batch(src_ids, with_labels=True)
            tgt_batch = cache.batch(tgt_ids, with_labels=False)
            model.train()
            src_pred = PredictionSet(model(src_batch), "source")
            tgt_pred = PredictionSet(model(tgt_batch), "target")
            if pseudo is None:
                loss, terms = stage1_objective(src_pred, tgt_pred, src_batch.labels,
                                               weights, guide_mode)
            else:
                try:
                    pl = torch.from_numpy(np.concatenate([pseudo[s] for s in tgt_ids]))
                except KeyError as exc:
                    raise PseudoLabelError(f"no pseudo labels for target sample {exc}") from exc
                pl_mask = None
                if pl_masks is not None:
                    pl_mask = torch.from_numpy(np.concatenate([pl_masks[s] for s in tgt_ids]))
                loss, terms = stage2_objective(src_pred, tgt_pred, src_batch.labels, pl,
                                               weights, guide_mode, pl_confidence_mask=pl_mask)
            term_floats = {k: float(v.detach()) for k, v in terms.items()}
            if not np.isfinite(term_floats["total"]):
                raise NonFiniteLossError(it, src_batch.sample_ids + tgt_batch.sample_ids, term_floats)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            state.iteration = it
            log.write({"iteration": it, "losses": term_floats,
                       "lr": [g["lr"] for g in optimizer.param_groups]})

            if it % config.eval_every == 0 or it == config.max_iterations:
                report = evaluate(model, cache, dataset.splits.target_val)
                miou = report.miou("aggregate")
                improved = miou > state.best_val_miou
                if improved:
                    state.best_val_miou = miou
                    state.best_checkpoint_path = ckpt_path
                    save_checkpoint(model, ckpt_path, meta={
                        **(checkpoint_meta or {}),
                        "iteration": it, "val_miou": miou,
                        "train_config": config.to_dict(),
                    })
                log.write({"iteration": it, "event": "val", "aggregation": report.aggregation_mode,
                           "miou": {b: report.miou(b) for b in report.branches},
                           "best_val_miou": state.best_val_miou, "new_best": improved})
    finally:
        log.close()
    if state.best_checkpoint_path is None:
        raise RuntimeError("training finished without a validation event; lower eval_every")
    return state.best_checkpoint_path, state


def train_stage1(model: ThreeBranchModel, dataset: SyntheticDataset, config: TrainConfig,
                 weights: LossWeights, guide_mode: str = "mg",
                 out_dir: str = "run_stage1",
                 checkpoint_meta: dict | None = None) -> tuple[str, RunState]:
    """Optimize the stage-1 objective; returns the best-validation checkpoint path."""
    seeds = named_stream_seeds(config.seed)
    model.init_parameters(seeds["init"])
    _seed_dropout(model, seeds["dropout"])
    return _train_loop(model, dataset, config, weights, guide_mode, out_dir,
                       pseudo=None, pl_masks=None, order_seed=seeds["order"],
                       checkpoint_meta=checkpoint_meta)


def _seed_dropout(model: ThreeBranchModel, seed: int) -> None:
    from .model import SeededDropout
    for i, module in enumerate(m for m in model.modules() if isinstance(m, SeededDropout)):
        module.generator.manual_seed(seed + 7919 * (i + 1))


def generate_pseudo_labels(checkpoint_path: str, dataset: SyntheticDataset,
                           out_path: str | None = None,
                           ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Eval-mode soft/hard pseudo labels for every target-train sample."""
    model, _ = load_checkpoint(checkpoint_path)
    model.eval()
    cache = SceneCache(dataset, model.config)
    hard: dict[str, np.ndarray] = {}
    soft: dict[str, np.ndarray] = {}
    for sid in dataset.splits.target_train:
        batch, out = _eval_forward(model, cache, sid)
        s, h = pseudo_labels(PredictionSet(out, "target"))
        soft[sid], hard[sid] = s, h
    if out_path is not None:
        from . import containers
        arrays = {}
        for sid in hard:
            arrays[f"hard/{sid}"] = hard[sid]
            arrays[f"soft/{sid}"] = soft[sid]
        containers.save_arrays(out_path, arrays, meta={"checkpoint": os.path.basename(checkpoint_path)})
    return soft, hard


def load_pseudo_labels(path: str) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    from . import containers
    if not os.path.exists(path):
        raise PseudoLabelError(f"pseudo-label file {path} does not exist")
    arrays, _ = containers.load_arrays(path)
    soft = {k[len("soft/"):]: v for k, v in arrays.items() if k.startswith("soft/")}
    hard = {k[len("hard/"):]: v for k, v in arrays.items() if k.startswith("hard/")}
    if not hard:
        raise PseudoLabelError(f"{path} holds no pseudo labels")
    return soft, hard


def run_stage2(stage1_checkpoint: str, dataset: SyntheticDataset, config: TrainConfig,
               weights: LossWeights, guide_mode: str = "mg",
               out_dir: str = "run_stage2",
               pseudo_override: dict[str, np.ndarray] | None = None,
               checkpoint_meta: dict | None = None) -> tuple[str, RunState]:
    """Self-training stage: pseudo labels from the frozen stage-1 checkpoint,
    then a fresh optimization of the stage-2 objective.

    ``pseudo_override`` substitutes the generated hard labels (used by oracle
    experiments); soft scores are still stored for inspection.
    """
    os.makedirs(out_dir, exist_ok=True)
    soft, hard = generate_pseudo_labels(stage1_checkpoint, dataset,
                                        out_path=os.path.join(out_dir, "pseudo_labels.npz"))
    if pseudo_override is not None:
        missing = [s for s in dataset.splits.target_train if s not in pseudo_override]
        if missing:
            raise PseudoLabelError(f"pseudo override misses target samples {missing[:3]}")
        hard = {k: np.asarray(v, dtype=np.int64) for k, v in pseudo_override.items()}
    pl_masks = None
    if config.pl_threshold is not None:
        pl_masks = {sid: (soft[sid].max(axis=1) >= config.pl_threshold) for sid in soft}

    seeds = named_stream_seeds(config.seed)
    if config.stage2_init == "scratch":
        stage1_model, _ = load_checkpoint(stage1_checkpoint)
        model = ThreeBranchModel(stage1_model.config)
        model.init_parameters(seeds["stage2_init"])
    else:
        model, _ = load_checkpoint(stage1_checkpoint)
    _seed_dropout(model, seeds["dropout"])
    return _train_loop(model, dataset, config, weights, guide_mode, out_dir,
                       pseudo=hard, pl_masks=pl_masks, order_seed=seeds["order"],
                       checkpoint_meta=checkpoint_meta)


def evaluate_checkpoint(checkpoint_path: str, dataset: SyntheticDataset, split_ids: list[str],
                        aggregation_mode: str = "fuse+3d") -> EvalReport:
    model, _ = load_checkpoint(checkpoint_path)
    cache = SceneCache(dataset, model.config)
    return evaluate(model, cache, split_ids, aggregation_mode)
