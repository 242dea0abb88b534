"""Experiment execution: datasets, per-cell training, results assembly.

A "cell" is one (variant, seed, stage) unit of work. Every cell writes a
result file carrying its resolved-config fingerprint; re-running a config
skips cells whose result file matches, so interrupted grids resume cheaply.
"""
from __future__ import annotations

import json
import os
import traceback
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, output_root
from .synthio import SyntheticDataset, build_dataset, load_dataset, save_dataset
from .trainer import TrainConfig, evaluate_checkpoint, run_stage2, train_stage1
from .model import ThreeBranchModel

RESULT_SCHEMA_VERSION = 1


class FingerprintError(RuntimeError):
    """An artifact was produced under a different resolved config."""


@dataclass
class CellResult:
    variant: str
    seed: int
    stage: int
    miou_2d: float  # fusion main head (the reported 2D column)
    miou_3d: float
    miou_2d3d: float  # softmax average of the fusion and 3D heads
    miou_vfm: float  # frozen-2D linear head, for the aggregation study
    checkpoint: str = ""
    status: str = "ok"  # or "failed"
    error: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ResultsTable:
    rows: list[CellResult] = field(default_factory=list)

    def filter(self, variant: str | None = None, stage: int | None = None) -> list[CellResult]:
        out = self.rows
        if variant is not None:
            out = [r for r in out if r.variant == variant]
        if stage is not None:
            out = [r for r in out if r.stage == stage]
        return out

    def summary(self) -> list[dict]:
        """Per (variant, stage) mean and std of each mIoU column over seeds."""
        keys = sorted({(r.variant, r.stage) for r in self.rows if r.status == "ok"})
        out = []
        for variant, stage in keys:
            rows = [r for r in self.rows if r.status == "ok"
                    and r.variant == variant and r.stage == stage]
            entry = {"variant": variant, "stage": stage, "seeds": len(rows)}
            for col in ("miou_2d", "miou_3d", "miou_2d3d"):
                vals = np.array([getattr(r, col) for r in rows])
                entry[f"{col}_mean"] = float(vals.mean())
                entry[f"{col}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out.append(entry)
        return out

    def to_markdown(self) -> str:
        lines = ["| variant | seed | stage | 2D | 3D | 2D3D |",
                 "|---|---|---|---|---|---|"]
        for r in sorted(self.rows, key=lambda r: (r.variant, r.stage, r.seed)):
            if r.status == "ok":
                lines.append(f"| {r.variant} | {r.seed} | {r.stage} "
                             f"| {100 * r.miou_2d:.1f} | {100 * r.miou_3d:.1f} | {100 * r.miou_2d3d:.1f} |")
            else:
                lines.append(f"| {r.variant} | {r.seed} | {r.stage} | failed | failed | failed |")
        lines.append("")
        lines.append("| variant | stage | seeds | 2D3D mean ± std |")
        lines.append("|---|---|---|---|")
        for s in self.summary():
            lines.append(f"| {s['variant']} | {s['stage']} | {s['seeds']} "
                         f"| {100 * s['miou_2d3d_mean']:.1f} ± {100 * s['miou_2d3d_std']:.1f} |")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"schema_version": RESULT_SCHEMA_VERSION,
                "rows": [r.to_dict() for r in self.rows],
                "summary": self.summary()}


@dataclass
class RunOutcome:
    table: ResultsTable
    trained_cells: list[str] = field(default_factory=list)
    skipped_cells: list[str] = field(default_factory=list)
    failed_cells: list[str] = field(default_factory=list)


def _dataset_for(config: ExperimentConfig, seed: int, root: str) -> tuple[SyntheticDataset, str]:
    fp = config.dataset_fingerprint(seed)
    path = os.path.join(root, "datasets", f"{config.dataset.preset}_{fp}")
    fp_file = os.path.join(path, "fingerprint.json")
    if os.path.exists(fp_file):
        with open(fp_file) as f:
            stored = json.load(f)["fingerprint"]
        if stored != fp:
            raise FingerprintError(f"dataset at {path} was built from a different config")
        return load_dataset(path), path
    from .config import preset_domains
    source, target = preset_domains(config.dataset)
    ds = build_dataset(
        config.dataset.scene_spec(), source, target,
        num_source=config.dataset.num_source, num_target=config.dataset.num_target,
        seed=config.dataset.seed + seed,
        val_fraction=config.dataset.val_fraction, test_fraction=config.dataset.test_fraction)
    save_dataset(ds, path)
    with open(fp_file, "w") as f:
        json.dump({"fingerprint": fp}, f)
    return ds, path


def generate_datasets(config: ExperimentConfig) -> list[str]:
    """The ``gen-data`` verb: materialize every dataset the config will need."""
    root = output_root(config)
    paths = []
    for seed in config.seeds:
        _, path = _dataset_for(config, seed, root)
        paths.append(path)
    return paths


def _cell_dir(root: str, variant: str, seed: int, stage: int) -> str:
    return os.path.join(root, "runs", variant.replace("+", "_"), f"seed{seed}", f"stage{stage}")


def _load_cell(path: str, expected_fp: str, force: bool) -> CellResult | None:
    result_file = os.path.join(path, "result.json")
    if force or not os.path.exists(result_file):
        return None
    with open(result_file) as f:
        stored = json.load(f)
    if stored.get("fingerprint") != expected_fp:
        raise FingerprintError(
            f"{result_file} was produced by a different config "
            f"({stored.get('fingerprint')} != {expected_fp}); pass --force to redo it")
    return CellResult(**stored["result"])


def _write_cell(path: str, fp: str, result: CellResult) -> None:
    with open(os.path.join(path, "result.json"), "w") as f:
        json.dump({"schema_version": RESULT_SCHEMA_VERSION, "fingerprint": fp,
                   "result": result.to_dict()}, f, indent=1, sort_keys=True)


def _evaluate_cell(config: ExperimentConfig, checkpoint: str, dataset: SyntheticDataset,
                   variant: str, seed: int, stage: int) -> CellResult:
    report = evaluate_checkpoint(checkpoint, dataset, dataset.splits.target_test, "fuse+3d")
    return CellResult(
        variant=variant, seed=seed, stage=stage,
        miou_2d=report.miou("fusion"), miou_3d=report.miou("3d"),
        miou_2d3d=report.miou("aggregate"), miou_vfm=report.miou("vfm"),
        checkpoint=checkpoint)


def _run_cell(config: ExperimentConfig, dataset: SyntheticDataset, dataset_path: str,
              seed: int, stage: int, root: str, stage1_checkpoint: str | None) -> CellResult:
    cell_dir = _cell_dir(root, config.variant, seed, stage)
    os.makedirs(cell_dir, exist_ok=True)
    train = TrainConfig.from_dict({**config.train.to_dict(), "seed": seed})
    meta = {"fingerprint": config.cell_fingerprint(seed, stage),
            "dataset_path": os.path.abspath(dataset_path)}
    if stage == 1:
        model = ThreeBranchModel(config.model_config())
        ckpt, _ = train_stage1(model, dataset, train, config.weights,
                               config.guide_mode, out_dir=cell_dir, checkpoint_meta=meta)
    else:
        if stage1_checkpoint is None:
            raise RuntimeError("stage 2 requested without a stage-1 checkpoint")
        ckpt, _ = run_stage2(stage1_checkpoint, dataset, train, config.weights,
                             config.guide_mode, out_dir=cell_dir, checkpoint_meta=meta)
    return _evaluate_cell(config, ckpt, dataset, config.variant, seed, stage)


def run(config: ExperimentConfig, force: bool = False) -> RunOutcome:
    """Execute every (seed, stage) cell of a single-variant config."""
    root = output_root(config)
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, f"config_{config.name}_{config.variant.replace('+', '_')}.json"),
              "w") as f:
        json.dump({"fingerprint": config.fingerprint(),
                   "config": config.to_canonical_dict()}, f, indent=1, sort_keys=True)
    outcome = RunOutcome(ResultsTable())
    stages = [1] if config.stages == "1" else [1, 2]
    for seed in config.seeds:
        dataset, dataset_path = _dataset_for(config, seed, root)
        stage1_ckpt = None
        for stage in stages:
            cell_name = f"{config.variant}/seed{seed}/stage{stage}"
            cell_dir = _cell_dir(root, config.variant, seed, stage)
            fp = config.cell_fingerprint(seed, stage)
            cached = _load_cell(cell_dir, fp, force)
            if cached is not None:
                outcome.skipped_cells.append(cell_name)
                result = cached
            else:
                result = _run_cell(config, dataset, dataset_path, seed, stage, root, stage1_ckpt)
                _write_cell(cell_dir, fp, result)
                outcome.trained_cells.append(cell_name)
            outcome.table.rows.append(result)
            if stage == 1:
                stage1_ckpt = result.checkpoint
    _write_table(root, outcome.table)
    return outcome


def ablate(configs: list[ExperimentConfig], force: bool = False) -> RunOutcome:
    """Run a variant grid; per-cell failures are recorded, not fatal."""
    if not configs:
        raise ValueError("empty ablation grid")
    combined = RunOutcome(ResultsTable())
    for config in configs:
        try:
            outcome = run(config, force=force)
            combined.table.rows.extend(outcome.table.rows)
            combined.trained_cells.extend(outcome.trained_cells)
            combined.skipped_cells.extend(outcome.skipped_cells)
        except Exception as exc:  # noqa: BLE001 - grid cells must not abort siblings
            for seed in config.seeds:
                combined.table.rows.append(CellResult(
                    variant=config.variant, seed=seed, stage=1,
                    miou_2d=float("nan"), miou_3d=float("nan"), miou_2d3d=float("nan"),
                    miou_vfm=float("nan"), status="failed",
                    error=f"{type(exc).__name__}: {exc}"))
                combined.failed_cells.append(f"{config.variant}/seed{seed}")
            traceback.print_exc()
    root = output_root(configs[0])
    _write_table(root, combined.table)
    _bar_chart(combined.table, os.path.join(root, "ablation.png"))
    return combined


def _write_table(root: str, table: ResultsTable) -> None:
    with open(os.path.join(root, "results.json"), "w") as f:
        json.dump(table.to_dict(), f, indent=1, sort_keys=True)
    with open(os.path.join(root, "results.md"), "w") as f:
        f.write(table.to_markdown())


def _bar_chart(table: ResultsTable, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = [s for s in table.summary()]
    if not summary:
        return
    labels = [f"{s['variant']} (s{s['stage']})" for s in summary]
    means = [100 * s["miou_2d3d_mean"] for s in summary]
    stds = [100 * s["miou_2d3d_std"] for s in summary]
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(labels), 3.6))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=4, color="#6a51a3")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("target 2D3D mIoU (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def report(root: str) -> ResultsTable:
    """Reassemble the results table from per-cell files under ``root``."""
    table = ResultsTable()
    runs_dir = os.path.join(root, "runs")
    if not os.path.isdir(runs_dir):
        raise FileNotFoundError(f"no runs directory under {root}")
    for dirpath, _, files in sorted(os.walk(runs_dir)):
        if "result.json" in files:
            with open(os.path.join(dirpath, "result.json")) as f:
                table.rows.append(CellResult(**json.load(f)["result"]))
    _write_table(root, table)
    return table
