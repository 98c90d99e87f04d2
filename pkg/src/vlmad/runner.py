"""Experiment orchestration: run configs, category evaluation, sweeps, comparisons.

Every run directory receives the resolved config that produced it, the
evaluation report (text + JSON, written atomically), and per-image score
archives, so a (config, seed) pair fully determines all artifacts on the toy
backbone. Plots are always accompanied by the plotted data as CSV so tests
and downstream tooling assert on data, not rasters.
"""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import anomalyclip, winclip
from .dataset import DatasetIndex, load_image, load_index, load_mask
from .encoder import EncoderConfig, ToyBackbone, load_external_backbone
from .errors import ConfigurationError, IngestionError, InputError, VlmadError
from .metrics import (
    CategoryMetrics,
    DEFAULT_FPR_CAP,
    EvalReport,
    ScoreRecord,
    build_report,
    evaluate_category,
    report_to_json,
    report_to_text,
)
from .scoring import DEFAULT_TEMPERATURE

DATA_ROOT_ENV = "VLMAD_DATA_ROOT"
METHODS = ("winclip", "anomalyclip")


@dataclass(frozen=True)
class RunConfig:
    """Everything a reproducible evaluation run needs."""

    method: str = "winclip"
    data_root: str | None = None
    categories: tuple[str, ...] | None = None
    shots: int = 0
    shot_seed: int | None = None  # None = first-k lexicographic reference selection
    window_sizes: tuple[int, ...] = winclip.DEFAULT_WINDOW_SIZES
    stride: int = 1
    embed_dim: int = 32
    patch_grid: tuple[int, int] = (8, 8)
    text_layers: int = 3
    vis_layers: int = 2
    dpam_gamma: float = 0.1
    dpam_enabled: bool = True
    backbone: str = "toy"
    backbone_factory: str | None = None
    checkpoint: str | None = None
    prompt_file: str | None = None
    prompt_k: int = 12
    temperature: float = DEFAULT_TEMPERATURE
    aupro_cap: float = DEFAULT_FPR_CAP
    out_dir: str = "runs/run"
    seed: int = 0
    workers: int = 1
    loss: anomalyclip.LossConfig = field(default_factory=anomalyclip.LossConfig)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.shots < 0:
            raise ConfigurationError(f"shots must be >= 0, got {self.shots}")
        if self.shots > 0 and self.method != "winclip":
            raise ConfigurationError("k-shot references are only valid with method=winclip")
        if self.backbone not in ("toy", "external"):
            raise ConfigurationError(f"backbone must be 'toy' or 'external', got {self.backbone!r}")
        if self.backbone == "external" and not self.backbone_factory:
            raise ConfigurationError("backbone=external requires backbone_factory")
        if not 0 < self.aupro_cap <= 1:
            raise ConfigurationError(f"aupro_cap must lie in (0, 1], got {self.aupro_cap}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")

    def resolved_root(self) -> Path:
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigurationError(
                f"no data root: pass data_root or set ${DATA_ROOT_ENV}"
            )
        return Path(root)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            embed_dim=self.embed_dim,
            patch_grid=self.patch_grid,
            text_layers=self.text_layers,
            vis_layers=self.vis_layers,
            dpam_gamma=self.dpam_gamma,
            dpam_enabled=self.dpam_enabled,
            seed=self.seed,
        )

    def to_mapping(self) -> dict:
        data = asdict(self)
        data["loss"] = asdict(self.loss)
        return data


_TUPLE_KEYS = {"categories", "window_sizes", "patch_grid"}


def config_from_mapping(data: dict) -> RunConfig:
    """Build a RunConfig from a plain mapping (e.g. parsed YAML); strict on keys."""
    known = {f.name for f in RunConfig.__dataclass_fields__.values()}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(data)
    for key in _TUPLE_KEYS & set(kwargs):
        if kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    if "loss" in kwargs and isinstance(kwargs["loss"], dict):
        kwargs["loss"] = anomalyclip.LossConfig(**kwargs["loss"])
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a mapping of keys to values")
    return config_from_mapping(data)


def atomic_write_text(path: Path, text: str) -> None:
    """Write-then-rename so an aborted run never leaves a half-written file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def build_backbone(config: RunConfig):
    if config.backbone == "toy":
        return ToyBackbone(config.encoder_config())
    return load_external_backbone(config.backbone_factory, config.encoder_config())


def select_references(index: DatasetIndex, category: str, k: int, shot_seed: int | None) -> list[Path]:
    """First k lexicographic train/good images, or a seeded sample when asked."""
    pool = index.categories[category].train_good
    if len(pool) < k:
        raise IngestionError(
            f"category {category!r} has {len(pool)} training images, need {k} references"
        )
    if shot_seed is None:
        return list(pool[:k])
    rng = np.random.default_rng(shot_seed)
    chosen = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(int(i) for i in chosen)]


@dataclass
class RunArtifacts:
    out_dir: Path
    report: EvalReport
    report_text_path: Path
    report_json_path: Path
    config_path: Path
    score_paths: dict[str, Path]
    failures: dict[str, str]


def _object_name(category: str) -> str:
    return category.replace("_", " ")


def _iter_test_images(index: DatasetIndex, category: str):
    cat = index.categories[category]
    for defect in sorted(cat.test):
        for i, img_path in enumerate(cat.test[defect]):
            mask_path = cat.ground_truth[defect][i] if defect != "good" else None
            yield defect, img_path, mask_path


def _score_category(config: RunConfig, index: DatasetIndex, category: str, encoder, state):
    prompt_lists = None
    ensemble = None
    memory = None
    if config.method == "winclip":
        prompt_lists = winclip.load_prompt_file(config.prompt_file)
        ensemble = winclip.build_prompt_ensemble(
            _object_name(category),
            prompt_lists.normal_states,
            prompt_lists.anomaly_states,
            prompt_lists.templates,
            encoder,
        )
        if config.shots > 0:
            paths = select_references(index, category, config.shots, config.shot_seed)
            memory = winclip.ReferenceMemory.from_images([load_image(p) for p in paths], encoder)
        spec = winclip.WindowSpec(sizes=config.window_sizes, stride=config.stride)
    records = []
    for defect, img_path, mask_path in _iter_test_images(index, category):
        image = load_image(img_path)
        mask = load_mask(mask_path) if mask_path else np.zeros(image.shape[:2], dtype=bool)
        if config.method == "winclip":
            smap = winclip.run_winclip(image, ensemble, spec, encoder, memory, config.temperature)
        else:
            smap = anomalyclip.score_image(image, state, encoder, config.temperature)
        records.append(
            ScoreRecord(
                image_id=f"{category}/{defect}/{img_path.stem}",
                image_score=smap.image_score,
                image_label=0 if defect == "good" else 1,
                pixel_scores=smap.pixel_scores,
                pixel_mask=mask,
                category=category,
                defect=defect,
            )
        )
    return records


def _save_scores(out_dir: Path, category: str, records: list[ScoreRecord]) -> Path:
    """Persist per-image maps as .npy plus a JSON manifest (byte-stable)."""
    score_dir = out_dir / "scores" / category
    score_dir.mkdir(parents=True, exist_ok=True)
    stacked = np.stack([r.pixel_scores for r in records]).astype(np.float32)
    masks = np.stack([r.pixel_mask for r in records]).astype(np.uint8)
    np.save(score_dir / "pixel_scores.npy", stacked)
    np.save(score_dir / "masks.npy", masks)
    manifest = {
        "image_ids": [r.image_id for r in records],
        "image_scores": [round(float(r.image_score), 9) for r in records],
        "labels": [int(r.image_label) for r in records],
        "defects": [r.defect for r in records],
    }
    atomic_write_text(score_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return score_dir


def run_eval(config: RunConfig) -> RunArtifacts:
    """Evaluate one method over the configured categories and persist artifacts.

    A component failure aborts only its category: the failure is recorded and
    the run continues. Deterministic given (config, seed).
    """
    index = load_index(config.resolved_root())
    categories = sorted(index.categories)
    if config.categories is not None:
        missing = set(config.categories) - set(categories)
        if missing:
            raise IngestionError(f"categories not in dataset: {sorted(missing)}")
        categories = sorted(config.categories)
    if not categories:
        raise IngestionError("dataset contains no categories")
    encoder = build_backbone(config)
    state = None
    if config.method == "anomalyclip":
        if config.checkpoint:
            state, gamma, _ = anomalyclip.load_checkpoint(config.checkpoint)
            if hasattr(encoder, "gamma"):
                with torch.no_grad():
                    encoder.gamma.copy_(torch.tensor(float(gamma), dtype=torch.float64))
        else:
            state = anomalyclip.init_prompts(
                anomalyclip.PromptConfig(k=config.prompt_k, seed=config.seed),
                config.encoder_config(),
            )

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = out_dir / "config.resolved.yaml"
    atomic_write_text(config_path, yaml.safe_dump(config.to_mapping(), sort_keys=True))

    def evaluate_one(category: str) -> tuple[str, CategoryMetrics, Path]:
        records = _score_category(config, index, category, encoder, state)
        metrics = evaluate_category(records, aupro_cap=config.aupro_cap)
        score_path = _save_scores(out_dir, category, records)
        return category, metrics, score_path

    per_category: dict[str, CategoryMetrics] = {}
    score_paths: dict[str, Path] = {}
    failures: dict[str, str] = {}
    if config.workers == 1:
        results = []
        for category in categories:
            try:
                results.append(evaluate_one(category))
            except VlmadError as exc:
                failures[category] = f"{type(exc).__name__}: {exc}"
    else:
        results = []
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = {cat: pool.submit(evaluate_one, cat) for cat in categories}
        for category in categories:
            try:
                results.append(futures[category].result())
            except VlmadError as exc:
                failures[category] = f"{type(exc).__name__}: {exc}"
    for category, metrics, score_path in sorted(results):
        per_category[category] = metrics
        score_paths[category] = score_path

    if failures:
        atomic_write_text(out_dir / "failures.json", json.dumps(failures, indent=2, sort_keys=True))
    if not per_category:
        raise VlmadError(f"every category failed: {failures}")
    report = build_report(
        per_category,
        meta={"method": config.method, "shots": config.shots, "seed": config.seed,
              "aupro_cap": config.aupro_cap},
    )
    text_path = out_dir / "report.txt"
    json_path = out_dir / "report.json"
    atomic_write_text(text_path, report_to_text(report))
    atomic_write_text(json_path, report_to_json(report))
    return RunArtifacts(
        out_dir=out_dir,
        report=report,
        report_text_path=text_path,
        report_json_path=json_path,
        config_path=config_path,
        score_paths=score_paths,
        failures=failures,
    )


# ----- sweeps -------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _bar_plot(path: Path, categories: list[str], series: dict[str, list[float]],
              averages: dict[str, float], title: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.arange(len(categories))
    width = 0.8 / max(1, len(series))
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(categories) + 2), 4))
    for i, (label, values) in enumerate(series.items()):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, values, width, label=label)
    for label, avg in averages.items():
        ax.axhline(avg, linestyle="--", linewidth=1, label=f"{label} avg {avg:.3f}")
    ax.set_xticks(x)
    ax.set_xticklabels(categories, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def sweep_shots(config: RunConfig, k_list: list[int]) -> dict[int, RunArtifacts]:
    """Evaluate winclip at several shot counts; emit a delta table and plot."""
    if config.method != "winclip":
        raise ConfigurationError("shot sweeps only apply to method=winclip")
    if not k_list:
        raise ConfigurationError("k_list must be non-empty")
    out_root = Path(config.out_dir)
    artifacts: dict[int, RunArtifacts] = {}
    for k in k_list:
        sub = replace(config, shots=k, out_dir=str(out_root / f"shots_{k}"))
        artifacts[k] = run_eval(sub)
    categories = sorted(next(iter(artifacts.values())).report.per_category)
    baseline = artifacts.get(0)
    header = ["category"] + [f"k={k}" for k in k_list] + (
        [f"delta_k={k}" for k in k_list if k != 0] if baseline else []
    )
    rows = []
    for cat in categories:
        row = [cat] + [round(artifacts[k].report.per_category[cat].cls_auroc, 6) for k in k_list]
        if baseline:
            base = baseline.report.per_category[cat].cls_auroc
            row += [
                round(artifacts[k].report.per_category[cat].cls_auroc - base, 6)
                for k in k_list
                if k != 0
            ]
        rows.append(row)
    avg_row = ["average"] + [round(artifacts[k].report.averages.cls_auroc, 6) for k in k_list]
    if baseline:
        base = baseline.report.averages.cls_auroc
        avg_row += [round(artifacts[k].report.averages.cls_auroc - base, 6) for k in k_list if k != 0]
    rows.append(avg_row)
    _write_csv(out_root / "shot_sweep.csv", header, rows)
    _bar_plot(
        out_root / "shot_sweep.png",
        categories,
        {f"k={k}": [artifacts[k].report.per_category[c].cls_auroc for c in categories] for k in k_list},
        {f"k={k}": artifacts[k].report.averages.cls_auroc for k in k_list},
        "Classification AUROC by shot count",
        "image AUROC",
    )
    return artifacts


def sweep_window_sizes(config: RunConfig, sizes: list[int]) -> dict[int, RunArtifacts]:
    """One full evaluation per single-size window spec; emits table and line plot."""
    if config.method != "winclip":
        raise ConfigurationError("window sweeps only apply to method=winclip")
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigurationError("window sizes must be >= 1")
    out_root = Path(config.out_dir)
    max_size = min(config.patch_grid)
    artifacts: dict[int, RunArtifacts] = {}
    for s in sizes:
        if s > max_size:
            warnings.warn(f"skipping window size {s}: exceeds patch grid {config.patch_grid}")
            continue
        sub = replace(config, window_sizes=(s,), out_dir=str(out_root / f"window_{s}"))
        artifacts[s] = run_eval(sub)
    if not artifacts:
        raise ConfigurationError("every requested window size exceeded the patch grid")
    categories = sorted(next(iter(artifacts.values())).report.per_category)
    header = ["category"] + [f"size={s}" for s in artifacts]
    rows = [
        [cat] + [round(artifacts[s].report.per_category[cat].cls_auroc, 6) for s in artifacts]
        for cat in categories
    ]
    rows.append(["average"] + [round(artifacts[s].report.averages.cls_auroc, 6) for s in artifacts])
    _write_csv(out_root / "window_sweep.csv", header, rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for cat in categories:
        ax.plot(
            list(artifacts),
            [artifacts[s].report.per_category[cat].cls_auroc for s in artifacts],
            marker="o",
            label=cat,
        )
    ax.set_xlabel("window size (patches)")
    ax.set_ylabel("image AUROC")
    ax.set_title("Window size sweep")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_root / "window_sweep.png")
    plt.close(fig)
    return artifacts


def emit_comparison(reports: dict[str, EvalReport], out_dir: str | Path) -> Path:
    """Side-by-side per-category table and grouped bars with dashed average lines."""
    if len(reports) < 2:
        raise InputError("comparison needs at least two reports")
    category_sets = {name: set(r.per_category) for name, r in reports.items()}
    reference = next(iter(category_sets.values()))
    for name, cats in category_sets.items():
        if cats != reference:
            raise InputError(
                f"report {name!r} categories differ: only_in={sorted(cats - reference)}, "
                f"missing={sorted(reference - cats)}"
            )
    out_dir = Path(out_dir)
    categories = sorted(reference)
    header = ["category"]
    for name in reports:
        header += [f"{name}_cls_auroc", f"{name}_seg_auroc"]
    rows = []
    for cat in categories:
        row = [cat]
        for report in reports.values():
            m = report.per_category[cat]
            row += [round(m.cls_auroc, 6), round(m.seg_auroc, 6) if m.seg_auroc is not None else ""]
        rows.append(row)
    avg_row = ["average"]
    for report in reports.values():
        avg = report.averages
        avg_row += [
            round(avg.cls_auroc, 6),
            round(avg.seg_auroc, 6) if avg.seg_auroc is not None else "",
        ]
    rows.append(avg_row)
    table_path = out_dir / "comparison.csv"
    _write_csv(table_path, header, rows)
    _bar_plot(
        out_dir / "comparison_cls.png",
        categories,
        {name: [r.per_category[c].cls_auroc for c in categories] for name, r in reports.items()},
        {name: r.averages.cls_auroc for name, r in reports.items()},
        "Classification AUROC",
        "image AUROC",
    )
    if all(r.averages.seg_auroc is not None for r in reports.values()):
        _bar_plot(
            out_dir / "comparison_seg.png",
            categories,
            {name: [r.per_category[c].seg_auroc for c in categories] for name, r in reports.items()},
            {name: r.averages.seg_auroc for name, r in reports.items()},
            "Segmentation AUROC",
            "pixel AUROC",
        )
    return table_path
