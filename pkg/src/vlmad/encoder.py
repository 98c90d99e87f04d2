"""Frozen image-text backbone contract plus a deterministic toy implementation.

Both scoring pipelines consume the same three operations: dense patch
embeddings for an image, a prompt embedding for a string (optionally with
per-layer injected tokens), and diagonal attention amplification on an
attention matrix. ``ToyBackbone`` implements them with fixed pseudo-random
weights so every downstream computation is testable without pretrained
checkpoints; ``ExternalBackbone`` adapts any real image-text model that
exposes patch tokens and attention.
"""

from __future__ import annotations

import hashlib
import importlib
import math
import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigurationError, InputError

# Words the toy backbone treats as carrying normal/anomalous meaning. They
# give synthetic fixtures a text-image alignment to detect; a real backbone
# gets this from pretraining instead. The learnable-prompt carrier anchors
# ("normal", "damaged") are deliberately absent so prompt training starts
# cold instead of inheriting the lexicon shortcut.
NORMAL_WORDS = frozenset(
    {"flawless", "perfect", "unblemished", "pristine", "intact", "undamaged", "spotless"}
)
ANOMALY_WORDS = frozenset(
    {
        "defect",
        "defective",
        "broken",
        "flaw",
        "flawed",
        "crack",
        "cracked",
        "blemish",
        "blemished",
        "anomaly",
        "anomalous",
        "abnormal",
        "scratched",
    }
)

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class EncoderConfig:
    """Backbone geometry and DPAM settings shared by image and text sides."""

    embed_dim: int = 32
    patch_grid: tuple[int, int] = (8, 8)
    text_layers: int = 3
    dpam_gamma: float = 0.1
    dpam_enabled: bool = True
    dpam_layers: tuple[int, ...] | None = None  # None = every intercepted visual layer
    vis_layers: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim <= 0:
            raise ConfigurationError(f"embed_dim must be positive, got {self.embed_dim}")
        rows, cols = self.patch_grid
        if rows <= 0 or cols <= 0:
            raise ConfigurationError(f"patch_grid must be positive, got {self.patch_grid}")
        if self.text_layers < 1:
            raise ConfigurationError(f"text_layers must be >= 1, got {self.text_layers}")
        if self.vis_layers < 1:
            raise ConfigurationError(f"vis_layers must be >= 1, got {self.vis_layers}")
        if self.dpam_gamma < 0:
            raise ConfigurationError(f"dpam_gamma must be >= 0, got {self.dpam_gamma}")


@dataclass
class EncoderOutput:
    """Unit-norm global embedding, unit-norm patch grid, and optional attention maps."""

    global_embed: Tensor
    patch_embeds: Tensor  # (rows, cols, embed_dim)
    attention_maps: tuple[Tensor, ...] | None = None


@dataclass
class TokenInjection:
    """Learnable tokens appended to the text sequence, one fresh group per layer.

    Layer l's input is the previous hidden states with layer l-1's injected
    tokens removed and this layer's tokens appended, so the sequence length
    entering every layer is constant (base tokens + k).
    """

    per_layer_tokens: tuple[Tensor, ...]

    def __post_init__(self) -> None:
        if not self.per_layer_tokens:
            raise ConfigurationError("TokenInjection requires at least one layer of tokens")
        shapes = {tuple(t.shape) for t in self.per_layer_tokens}
        if len(shapes) != 1:
            raise ConfigurationError(f"all layers must carry identically shaped tokens, got {shapes}")
        k, _ = self.per_layer_tokens[0].shape
        if k < 1:
            raise ConfigurationError("token count per layer must be >= 1")

    @property
    def k(self) -> int:
        return self.per_layer_tokens[0].shape[0]

    @property
    def width(self) -> int:
        return self.per_layer_tokens[0].shape[1]

    @property
    def layers(self) -> int:
        return len(self.per_layer_tokens)


def apply_dpam(attention: Tensor, gamma: float | Tensor) -> Tensor:
    """Amplify each token's self-attention and renormalize rows.

    Adds gamma times the diagonal onto the diagonal, then divides every row
    by its new sum so the result is again row-stochastic. ``gamma = 0``
    returns the input unchanged (and exactly, not just approximately).

    Args:
        attention: square matrix with non-negative entries, rows summing to 1.
        gamma: non-negative scaling factor; may be a trainable scalar tensor.
    """
    if not torch.is_tensor(attention) or attention.ndim != 2:
        raise InputError("attention must be a 2-D tensor")
    n, m = attention.shape
    if n != m:
        raise InputError(f"attention must be square, got {tuple(attention.shape)}")
    if bool((attention < 0).any()):
        raise InputError("attention entries must be non-negative")
    row_sums = attention.sum(dim=-1)
    if bool((row_sums - 1.0).abs().max() > 1e-4):
        raise InputError("attention rows must sum to 1")
    gamma_value = float(gamma.detach() if torch.is_tensor(gamma) else gamma)
    if gamma_value < 0:
        raise InputError(f"gamma must be >= 0, got {gamma_value}")
    # gamma = 0 is the exact identity; keep the graph only when gradients are
    # actually being tracked through gamma (training at gamma == 0).
    tracking = torch.is_tensor(gamma) and gamma.requires_grad and torch.is_grad_enabled()
    if gamma_value == 0.0 and not tracking:
        return attention
    amplified = attention + gamma * torch.diag_embed(torch.diagonal(attention))
    return amplified / amplified.sum(dim=-1, keepdim=True)


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def _normalize(t: Tensor) -> Tensor:
    return t / t.norm(dim=-1, keepdim=True)


def _to_gray(image: np.ndarray) -> np.ndarray:
    """Validate a raster and convert it to float64 grayscale in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        elif arr.shape[2] == 3:
            pass
        else:
            raise InputError(f"expected 1 or 3 channels, got shape {arr.shape}")
    elif arr.ndim != 2:
        raise InputError(f"expected a 2-D or 3-D raster, got shape {arr.shape}")
    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InputError("raster has zero area")
    arr = arr.astype(np.float64)
    if np.issubdtype(np.asarray(image).dtype, np.integer):
        arr = arr / 255.0
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr


def image_size(image: np.ndarray) -> tuple[int, int]:
    """(H, W) of a raster accepted by ``encode_image``."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise InputError(f"expected a 2-D or 3-D raster, got shape {arr.shape}")
    return int(arr.shape[0]), int(arr.shape[1])


def tokenize(prompt: str) -> list[str]:
    return _WORD_RE.findall(prompt.lower())


class ToyBackbone(nn.Module):
    """Deterministic, differentiable stand-in for a pretrained image-text model.

    Images: per-patch brightness statistics pass through a fixed random
    projection and a small attention stack (where DPAM intercepts). Text:
    hash-seeded word vectors pass through fixed mixing layers with per-layer
    token injection. A fixed unit direction (``anomaly_axis``) ties
    high-contrast / off-level patches to anomaly-flavored words, so synthetic
    fixtures are separable end to end without any learned weights.

    All fixed weights are registered as buffers; the only trainable parameter
    is ``gamma`` (the DPAM scaling factor). Instances are immutable after
    construction and safe to call from multiple workers.
    """

    STAT_DIM = 4  # mean, std, min, max per patch

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        rng = np.random.default_rng(config.seed)

        def buf(name: str, arr: np.ndarray) -> None:
            self.register_buffer(name, torch.as_tensor(arr, dtype=torch.float64))

        buf("w_stats", rng.standard_normal((self.STAT_DIM, d)) * (0.8 / math.sqrt(self.STAT_DIM)))
        buf("b_stats", _unit(rng.standard_normal(d)) * 0.8)
        buf("anomaly_axis", _unit(rng.standard_normal(d)))
        for i in range(config.vis_layers):
            buf(f"w_q{i}", rng.standard_normal((d, d)) / math.sqrt(d))
            buf(f"w_k{i}", rng.standard_normal((d, d)) / math.sqrt(d))
            buf(f"w_v{i}", rng.standard_normal((d, d)) / math.sqrt(d))
        buf("w_patch_out", rng.standard_normal((d, d)) / math.sqrt(d))
        buf("b_patch_out", _unit(rng.standard_normal(d)) * 0.5)
        buf("w_global", rng.standard_normal((d, d)) / math.sqrt(d))
        buf("b_global", _unit(rng.standard_normal(d)) * 0.5)
        for layer in range(config.text_layers):
            buf(f"w_text{layer}", rng.standard_normal((d, d)) / math.sqrt(d))
            buf(f"u_text{layer}", rng.standard_normal((d, d)) * (0.5 / math.sqrt(d)))
            buf(f"b_text{layer}", _unit(rng.standard_normal(d)) * 0.3)
        buf("w_text_proj", rng.standard_normal((d, d)) / math.sqrt(d))
        buf("b_text_proj", _unit(rng.standard_normal(d)) * 0.5)

        self.gamma = nn.Parameter(torch.tensor(float(config.dpam_gamma), dtype=torch.float64))

        self.mix_scale = 0.5
        self.saliency_gain = 4.0
        self.saliency_offset = 0.22
        self.kappa_patch = 1.5
        self.kappa_global = 1.5
        self.kappa_text = 1.0
        self.smoothmax_beta = 8.0
        self._token_cache: dict[str, Tensor] = {}

    # ----- image side -------------------------------------------------

    def _patch_statistics(self, gray: np.ndarray) -> tuple[Tensor, Tensor]:
        """Per-patch [mean, std, min, max] and a contrast/level saliency score."""
        rows, cols = self.config.patch_grid
        h, w = gray.shape
        if h < rows or w < cols:
            raise InputError(
                f"image {gray.shape} too small for patch grid {self.config.patch_grid}"
            )
        r_edges = np.linspace(0, h, rows + 1).astype(int)
        c_edges = np.linspace(0, w, cols + 1).astype(int)
        global_median = float(np.median(gray))
        stats = np.empty((rows * cols, self.STAT_DIM))
        saliency = np.empty(rows * cols)
        for i in range(rows):
            for j in range(cols):
                patch = gray[r_edges[i]: r_edges[i + 1], c_edges[j]: c_edges[j + 1]]
                mean, std = patch.mean(), patch.std()
                lo, hi = patch.min(), patch.max()
                stats[i * cols + j] = (mean, std, lo, hi)
                deviation = abs(mean - global_median) + (hi - lo)
                saliency[i * cols + j] = math.tanh(self.saliency_gain * (deviation - self.saliency_offset))
        return (
            torch.as_tensor(stats, dtype=torch.float64),
            torch.as_tensor(saliency, dtype=torch.float64),
        )

    def _dpam_active(self, layer: int) -> bool:
        if not self.config.dpam_enabled:
            return False
        return self.config.dpam_layers is None or layer in self.config.dpam_layers

    def _run_visual_stack(self, pre: Tensor) -> tuple[Tensor, list[Tensor]]:
        d = self.config.embed_dim
        h = pre
        maps: list[Tensor] = []
        for i in range(self.config.vis_layers):
            logits = (h @ getattr(self, f"w_q{i}")) @ (h @ getattr(self, f"w_k{i}")).T
            attn = torch.softmax(logits / math.sqrt(d), dim=-1)
            if self._dpam_active(i):
                attn = apply_dpam(attn, self.gamma)
            maps.append(attn.detach())  # stored copy is observational; h keeps the graph
            h = h + self.mix_scale * torch.tanh(attn @ (h @ getattr(self, f"w_v{i}")))
        return h, maps

    def encode_image(self, image: np.ndarray, return_attention: bool = False) -> EncoderOutput:
        """Encode a raster into unit-norm global and per-patch embeddings.

        Deterministic for a fixed config and input; attention maps are the
        post-DPAM matrices actually used, returned only when requested.
        """
        gray = _to_gray(image)
        rows, cols = self.config.patch_grid
        stats, saliency = self._patch_statistics(gray)
        pre = stats @ self.w_stats + self.b_stats
        h, maps = self._run_visual_stack(pre)
        patch = _normalize(
            h @ self.w_patch_out
            + self.b_patch_out
            + self.kappa_patch * saliency[:, None] * self.anomaly_axis
        )
        pooled = h.mean(dim=0)
        sal_peak = torch.logsumexp(saliency * self.smoothmax_beta, dim=0) / self.smoothmax_beta
        global_embed = _normalize(
            pooled @ self.w_global + self.b_global + self.kappa_global * sal_peak * self.anomaly_axis
        )
        return EncoderOutput(
            global_embed=global_embed,
            patch_embeds=patch.reshape(rows, cols, self.config.embed_dim),
            attention_maps=tuple(maps) if return_attention else None,
        )

    def constant_basis_vector(self) -> Tensor:
        """Patch embedding every patch of an all-zero image collapses to."""
        stats = torch.zeros((1, self.STAT_DIM), dtype=torch.float64)
        saliency = torch.tensor(
            [math.tanh(-self.saliency_gain * self.saliency_offset)], dtype=torch.float64
        )
        pre = stats @ self.w_stats + self.b_stats
        h = pre
        for i in range(self.config.vis_layers):
            attn = torch.ones((1, 1), dtype=torch.float64)
            if self._dpam_active(i):
                attn = apply_dpam(attn, self.gamma)
            h = h + self.mix_scale * torch.tanh(attn @ (h @ getattr(self, f"w_v{i}")))
        patch = _normalize(
            h @ self.w_patch_out
            + self.b_patch_out
            + self.kappa_patch * saliency[:, None] * self.anomaly_axis
        )
        return patch[0].detach()

    # ----- text side --------------------------------------------------

    def token_vector(self, word: str) -> Tensor:
        """Fixed hash-seeded embedding of a single token."""
        cached = self._token_cache.get(word)
        if cached is not None:
            return cached
        d = self.config.embed_dim
        digest = hashlib.sha256(f"{self.config.seed}:{word}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = torch.as_tensor(rng.standard_normal(d) / math.sqrt(d), dtype=torch.float64)
        self._token_cache[word] = vec
        return vec

    def prompt_polarity(self, prompt: str) -> float:
        """Mean normal/anomalous orientation of a prompt's lexicon words, in [-1, 1]."""
        words = tokenize(prompt)
        polar = [1.0 if w in ANOMALY_WORDS else -1.0 for w in words if w in ANOMALY_WORDS or w in NORMAL_WORDS]
        if not polar:
            return 0.0
        return float(sum(polar) / len(polar))

    def text_layer(self, layer: int, hidden: Tensor) -> Tensor:
        """One text mixing layer: per-token map plus a sequence-mean context term."""
        if not 0 <= layer < self.config.text_layers:
            raise ConfigurationError(f"layer {layer} out of range for {self.config.text_layers} text layers")
        return torch.tanh(
            hidden @ getattr(self, f"w_text{layer}")
            + hidden.mean(dim=0) @ getattr(self, f"u_text{layer}")
            + getattr(self, f"b_text{layer}")
        )

    def encode_text(self, prompt: str, injection: TokenInjection | None = None) -> Tensor:
        """Encode a prompt into a unit-norm embedding, optionally with injected tokens.

        With an injection, layer l consumes the previous base hidden states
        with layer l-1's injected tokens removed and layer l's tokens
        appended; the injected positions are re-created fresh at every layer.
        """
        words = tokenize(prompt)
        if not words:
            raise InputError("prompt must contain at least one token")
        if injection is not None:
            if injection.layers != self.config.text_layers:
                raise ConfigurationError(
                    f"injection covers {injection.layers} layers, encoder has {self.config.text_layers}"
                )
            if injection.width != self.config.embed_dim:
                raise ConfigurationError(
                    f"token width {injection.width} != text hidden width {self.config.embed_dim}"
                )
        base_len = len(words)
        h = torch.stack([self.token_vector(w) for w in words])
        for layer in range(self.config.text_layers):
            if injection is not None:
                tokens = injection.per_layer_tokens[layer].to(dtype=torch.float64)
                h = torch.cat([h[:base_len], tokens], dim=0)
            h = self.text_layer(layer, h)
        pooled = h.mean(dim=0)
        polarity = self.prompt_polarity(prompt)
        return _normalize(
            pooled @ self.w_text_proj + self.b_text_proj + self.kappa_text * polarity * self.anomaly_axis
        )


class ExternalBackbone:
    """Thin adapter around a real pretrained image-text model.

    The wrapped object must provide ``encode_image(image) -> (global, patches,
    attention_or_None)`` and ``encode_text(prompt, injection) -> vector`` as
    numpy arrays or tensors; outputs are renormalized onto the unit sphere and
    validated against ``config``. Wrap non-thread-safe runtimes per worker or
    serialize calls inside the implementation.
    """

    def __init__(self, impl, config: EncoderConfig):
        self.impl = impl
        self.config = config

    def _as_unit(self, value, dims: int) -> Tensor:
        t = torch.as_tensor(np.asarray(value), dtype=torch.float64)
        if t.ndim != dims:
            raise InputError(f"backbone returned {t.ndim}-D output, expected {dims}-D")
        return _normalize(t)

    def encode_image(self, image: np.ndarray, return_attention: bool = False) -> EncoderOutput:
        global_embed, patches, attention = self.impl.encode_image(image)
        patch = self._as_unit(patches, 3)
        rows, cols = self.config.patch_grid
        if patch.shape[:2] != (rows, cols) or patch.shape[2] != self.config.embed_dim:
            raise ConfigurationError(
                f"backbone patch grid {tuple(patch.shape)} does not match config "
                f"({rows}, {cols}, {self.config.embed_dim})"
            )
        maps = None
        if return_attention and attention is not None:
            maps = tuple(torch.as_tensor(np.asarray(a), dtype=torch.float64) for a in attention)
        return EncoderOutput(self._as_unit(global_embed, 1), patch, maps)

    def encode_text(self, prompt: str, injection: TokenInjection | None = None) -> Tensor:
        if not tokenize(prompt):
            raise InputError("prompt must contain at least one token")
        return self._as_unit(self.impl.encode_text(prompt, injection), 1)


def load_external_backbone(factory_spec: str, config: EncoderConfig) -> ExternalBackbone:
    """Instantiate an external backbone from a ``module.path:factory`` string."""
    module_name, sep, attr = factory_spec.partition(":")
    if not sep or not module_name or not attr:
        raise ConfigurationError(
            f"backbone factory must look like 'package.module:factory', got {factory_spec!r}"
        )
    try:
        module = importlib.import_module(module_name)
        factory = getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigurationError(f"cannot load backbone factory {factory_spec!r}: {exc}") from exc
    return ExternalBackbone(factory(config), config)
