"""Window-ensemble zero-/few-shot pipeline.

Overlapping multi-scale windows over the patch grid are scored against a
compositional prompt ensemble (max cosine per side, two-way softmax), the
per-window scores are folded back into a per-patch map (harmonic mean within
each window size, arithmetic mean across sizes) and bilinearly upsampled to
image resolution. A k-shot memory of normal reference patch embeddings adds a
distance-based score fused with the prompt map by a pixel-wise mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .encoder import image_size
from .errors import ConfigurationError, InputError
from .scoring import DEFAULT_TEMPERATURE, ScoreMap, anomaly_probability, upsample_bilinear

DEFAULT_WINDOW_SIZES = (2, 3, 5)

# Snap reference scores this close to zero down to exact zero: a test patch
# that reappears bitwise in the memory must score exactly 0.
_SELF_MATCH_EPS = 1e-12


@dataclass(frozen=True)
class WindowSpec:
    """Window side lengths (in patches) and stride for window generation."""

    sizes: tuple[int, ...] = DEFAULT_WINDOW_SIZES
    stride: int = 1

    def __post_init__(self) -> None:
        sizes = tuple(sorted(set(int(s) for s in self.sizes)))
        if not sizes:
            raise ConfigurationError("WindowSpec requires at least one window size")
        if sizes[0] < 1:
            raise ConfigurationError(f"window sizes must be >= 1, got {self.sizes}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "sizes", sizes)


@dataclass
class WindowRecord:
    size: int
    top_left: tuple[int, int]
    members: np.ndarray  # flat patch indices, row-major


@dataclass
class WindowGrid:
    """Enumerated windows per size plus per-patch coverage bookkeeping."""

    patch_grid: tuple[int, int]
    sizes: tuple[int, ...]
    top_lefts: dict[int, np.ndarray]  # size -> (n, 2) int
    members: dict[int, np.ndarray]  # size -> (n, size*size) int
    coverage_count: np.ndarray  # (rows, cols) int, summed over all sizes

    @property
    def n_windows(self) -> int:
        return sum(m.shape[0] for m in self.members.values())

    def count(self, size: int) -> int:
        return self.members[size].shape[0]

    def score_slice(self, size: int) -> slice:
        """Slice of the flat window-score vector belonging to ``size``."""
        start = 0
        for s in self.sizes:
            n = self.count(s)
            if s == size:
                return slice(start, start + n)
            start += n
        raise InputError(f"size {size} not part of this grid")

    @property
    def windows(self) -> list[WindowRecord]:
        records = []
        for s in self.sizes:
            for tl, mem in zip(self.top_lefts[s], self.members[s]):
                records.append(WindowRecord(size=s, top_left=(int(tl[0]), int(tl[1])), members=mem))
        return records


def generate_windows(patch_grid: tuple[int, int], spec: WindowSpec) -> WindowGrid:
    """Enumerate overlapping windows in row-major order for every size.

    For size s on an R x C grid with stride 1 this yields (R-s+1)(C-s+1)
    windows; windows never extend past the grid (no padding).
    """
    rows, cols = patch_grid
    if rows < 1 or cols < 1:
        raise ConfigurationError(f"patch grid must be positive, got {patch_grid}")
    for s in spec.sizes:
        if s > min(rows, cols):
            raise ConfigurationError(
                f"window size {s} exceeds patch grid {patch_grid}"
            )
    top_lefts: dict[int, np.ndarray] = {}
    members: dict[int, np.ndarray] = {}
    coverage = np.zeros(rows * cols, dtype=np.int64)
    for s in spec.sizes:
        rr = np.arange(0, rows - s + 1, spec.stride)
        cc = np.arange(0, cols - s + 1, spec.stride)
        grid_r, grid_c = np.meshgrid(rr, cc, indexing="ij")
        tls = np.stack([grid_r.ravel(), grid_c.ravel()], axis=1)
        offsets = (np.arange(s)[:, None] * cols + np.arange(s)[None, :]).ravel()
        mem = (tls[:, 0] * cols + tls[:, 1])[:, None] + offsets[None, :]
        top_lefts[s] = tls
        members[s] = mem
        coverage += np.bincount(mem.ravel(), minlength=rows * cols)
    return WindowGrid(
        patch_grid=(rows, cols),
        sizes=spec.sizes,
        top_lefts=top_lefts,
        members=members,
        coverage_count=coverage.reshape(rows, cols),
    )


# ----- prompt ensemble ----------------------------------------------------


@dataclass
class PromptLists:
    normal_states: list[str]
    anomaly_states: list[str]
    templates: list[str]


_SECTIONS = {
    "[normal_states]": "normal_states",
    "[anomaly_states]": "anomaly_states",
    "[templates]": "templates",
}


def load_prompt_file(path: str | Path | None = None) -> PromptLists:
    """Parse a prompt data file: one entry per line under section headers.

    Sections are ``[normal_states]``, ``[anomaly_states]`` and ``[templates]``;
    blank lines and ``#`` comments are ignored. ``[object]`` and ``[state]``
    are the literal substitution slots inside entries.
    """
    if path is None:
        text = resources.files("vlmad.data").joinpath("prompts_default.txt").read_text()
    else:
        text = Path(path).read_text()
    lists: dict[str, list[str]] = {name: [] for name in _SECTIONS.values()}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line in _SECTIONS:
            current = _SECTIONS[line]
            continue
        if current is None:
            raise ConfigurationError(f"prompt file line {lineno} appears before any section header")
        lists[current].append(line)
    for name, entries in lists.items():
        if not entries:
            raise ConfigurationError(f"prompt file is missing entries for section {name}")
    return PromptLists(lists["normal_states"], lists["anomaly_states"], lists["templates"])


@dataclass
class PromptEnsemble:
    """Expanded prompt strings and their text embeddings for one object."""

    object_name: str
    normal_states: list[str]
    anomaly_states: list[str]
    templates: list[str]
    normal_prompts: list[str]
    anomaly_prompts: list[str]
    normal_embeds: Tensor  # (|states| * |templates|, D)
    anomaly_embeds: Tensor
    normal_mean: Tensor
    anomaly_mean: Tensor


def expand_prompts(object_name: str, states: list[str], templates: list[str]) -> list[str]:
    prompts = []
    for state in states:
        state_text = state.replace("[object]", object_name)
        for template in templates:
            prompts.append(template.replace("[state]", state_text))
    return prompts


def build_prompt_ensemble(
    object_name: str,
    normal_states: list[str],
    anomaly_states: list[str],
    templates: list[str],
    encoder,
) -> PromptEnsemble:
    """Expand every (state, template) pair, encode, and store per-side means."""
    if not normal_states or not anomaly_states or not templates:
        raise ConfigurationError("state and template lists must be non-empty")
    for template in templates:
        if template.count("[state]") != 1:
            raise ConfigurationError(
                f"template must contain exactly one [state] slot: {template!r}"
            )
    normal_prompts = expand_prompts(object_name, normal_states, templates)
    anomaly_prompts = expand_prompts(object_name, anomaly_states, templates)
    normal_embeds = torch.stack([encoder.encode_text(p) for p in normal_prompts])
    anomaly_embeds = torch.stack([encoder.encode_text(p) for p in anomaly_prompts])

    def renorm_mean(embeds: Tensor) -> Tensor:
        mean = embeds.mean(dim=0)
        return mean / mean.norm()

    return PromptEnsemble(
        object_name=object_name,
        normal_states=list(normal_states),
        anomaly_states=list(anomaly_states),
        templates=list(templates),
        normal_prompts=normal_prompts,
        anomaly_prompts=anomaly_prompts,
        normal_embeds=normal_embeds.detach(),
        anomaly_embeds=anomaly_embeds.detach(),
        normal_mean=renorm_mean(normal_embeds).detach(),
        anomaly_mean=renorm_mean(anomaly_embeds).detach(),
    )


# ----- window scoring ------------------------------------------------------


def score_windows(
    patch_embeds: Tensor,
    grid: WindowGrid,
    ensemble: PromptEnsemble,
    temperature: float = DEFAULT_TEMPERATURE,
) -> np.ndarray:
    """Raw anomaly score per window, ordered like ``grid.windows``.

    Each window embedding is the renormalized mean of its member patch
    embeddings; the score is the two-way softmax over (max cosine to the
    normal side, max cosine to the anomaly side) at the anomaly coordinate.
    """
    rows, cols = grid.patch_grid
    if tuple(patch_embeds.shape[:2]) != (rows, cols):
        raise InputError(
            f"patch embeddings {tuple(patch_embeds.shape)} do not match grid {grid.patch_grid}"
        )
    flat = patch_embeds.reshape(rows * cols, -1)
    pieces = []
    with torch.no_grad():
        for s in grid.sizes:
            mem = grid.members[s]
            if mem.shape[1] == 0:
                raise RuntimeError(f"window generator produced empty membership for size {s}")
            window_embeds = flat[torch.as_tensor(mem)].mean(dim=1)
            window_embeds = window_embeds / window_embeds.norm(dim=-1, keepdim=True)
            sim_normal = (window_embeds @ ensemble.normal_embeds.T).max(dim=1).values
            sim_anomaly = (window_embeds @ ensemble.anomaly_embeds.T).max(dim=1).values
            pieces.append(anomaly_probability(sim_normal, sim_anomaly, temperature))
    return torch.cat(pieces).numpy().astype(np.float64)


def aggregate_to_map(
    window_scores: np.ndarray, grid: WindowGrid, image_size: tuple[int, int]
) -> ScoreMap:
    """Fold window scores into a pixel map.

    Per patch and window size: harmonic mean of the scores of every window of
    that size containing the patch (a zero vote drives the mean to zero);
    per-size maps are averaged arithmetically across sizes, then bilinearly
    upsampled to image resolution. The image score is the pixel maximum.
    """
    scores = np.asarray(window_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] != grid.n_windows:
        raise InputError(
            f"expected {grid.n_windows} window scores, got shape {scores.shape}"
        )
    rows, cols = grid.patch_grid
    n_patches = rows * cols
    per_size = np.full((len(grid.sizes), n_patches), np.nan)
    for idx, s in enumerate(grid.sizes):
        mem = grid.members[s]
        size_scores = scores[grid.score_slice(s)]
        with np.errstate(divide="ignore"):
            recip = np.repeat(1.0 / size_scores, mem.shape[1])
        recip_sum = np.bincount(mem.ravel(), weights=recip, minlength=n_patches)
        counts = np.bincount(mem.ravel(), minlength=n_patches)
        covered = counts > 0
        with np.errstate(invalid="ignore"):
            per_size[idx, covered] = counts[covered] / recip_sum[covered]
        per_size[idx, covered & ~np.isfinite(per_size[idx])] = 0.0
    if np.isnan(per_size).all(axis=0).any():
        raise InputError("some patches are covered by no window; use stride 1 or smaller sizes")
    patch_map = np.nanmean(per_size, axis=0).reshape(rows, cols)
    pixel = np.clip(upsample_bilinear(patch_map, image_size), 0.0, 1.0)
    return ScoreMap(pixel_scores=pixel, image_score=float(pixel.max()))


# ----- few-shot reference memory -------------------------------------------


@dataclass
class ReferenceMemory:
    """Patch-embedding grids of k normal reference images; immutable after build."""

    entries: tuple[Tensor, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        shapes = {tuple(e.shape) for e in self.entries}
        if len(shapes) > 1:
            raise InputError(f"reference entries disagree on patch grid shape: {shapes}")

    @property
    def k(self) -> int:
        return len(self.entries)

    @classmethod
    def from_images(cls, images, encoder) -> "ReferenceMemory":
        with torch.no_grad():
            entries = tuple(encoder.encode_image(img).patch_embeds.detach() for img in images)
        return cls(entries=entries)


def score_with_references(patch_embeds: Tensor, memory: ReferenceMemory) -> np.ndarray:
    """Per-patch score: 1 - max cosine to any reference patch, clamped to [0, 1].

    Computed as half the squared distance between unit vectors, which equals
    1 - cosine but is exactly zero when a test patch reappears bitwise in the
    memory.
    """
    if memory is None or memory.k < 1:
        raise InputError("reference scoring requires a memory with k >= 1 (use the zero-shot path)")
    rows, cols, dim = patch_embeds.shape
    if tuple(memory.entries[0].shape) != (rows, cols, dim):
        raise InputError(
            f"reference grid {tuple(memory.entries[0].shape)} does not match test grid {(rows, cols, dim)}"
        )
    with torch.no_grad():
        test = patch_embeds.reshape(-1, dim)
        refs = torch.cat([e.reshape(-1, dim) for e in memory.entries])
        best = torch.empty(test.shape[0], dtype=torch.float64)
        chunk = max(1, int(2**22 // max(1, refs.shape[0] * dim)))
        for start in range(0, test.shape[0], chunk):
            block = test[start : start + chunk]
            d2 = 0.5 * ((block[:, None, :] - refs[None, :, :]) ** 2).sum(dim=-1)
            best[start : start + chunk] = d2.min(dim=1).values
    out = best.numpy().astype(np.float64)
    out[out < _SELF_MATCH_EPS] = 0.0
    return np.clip(out, 0.0, 1.0).reshape(rows, cols)


def run_winclip(
    image: np.ndarray,
    ensemble: PromptEnsemble,
    spec: WindowSpec,
    encoder,
    memory: ReferenceMemory | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ScoreMap:
    """Full pipeline for one image: window scoring, aggregation, optional fusion.

    Zero-shot uses prompt scores only; with a reference memory the prompt map
    and the reference map are fused by a pixel-wise arithmetic mean. The image
    score is the maximum of the final map.
    """
    size = image_size(image)
    with torch.no_grad():
        patch_embeds = encoder.encode_image(image).patch_embeds
    grid = generate_windows(tuple(patch_embeds.shape[:2]), spec)
    window_scores = score_windows(patch_embeds, grid, ensemble, temperature)
    prompt_map = aggregate_to_map(window_scores, grid, size)
    if memory is None:
        return prompt_map
    ref_patch = score_with_references(patch_embeds, memory)
    ref_map = np.clip(upsample_bilinear(ref_patch, size), 0.0, 1.0)
    fused = 0.5 * (prompt_map.pixel_scores + ref_map)
    return ScoreMap(pixel_scores=fused, image_score=float(fused.max()))
