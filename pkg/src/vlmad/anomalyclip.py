"""Object-agnostic learnable-prompt pipeline with joint global/local training.

Two sets of per-layer learnable tokens (normal / anomalous) are injected into
the frozen text encoder around fixed carrier phrases. Training minimizes a
weighted sum of image-level cross-entropy and pixel-level focal + dice losses;
gradients reach only the tokens and the DPAM scaling factor, never the
backbone weights. Trained tokens round-trip through a documented checkpoint
archive so externally produced weights can be evaluated.
"""

from __future__ import annotations

import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .encoder import EncoderConfig, TokenInjection, image_size
from .errors import ConfigurationError, InputError, TrainingDivergedError
from .scoring import (
    DEFAULT_TEMPERATURE,
    ScoreMap,
    anomaly_probability,
    upsample_bilinear_tensor,
)

# Fixed neutral scaffold around the learnable tokens; the class identity is
# carried by the anchor word and, after training, by the tokens themselves.
DEFAULT_CARRIERS = ("a photo of a normal object", "a photo of a damaged object")

CHECKPOINT_FORMAT_VERSION = 1
_PROB_EPS = 1e-7


@dataclass(frozen=True)
class PromptConfig:
    """Shape and initialization of the learnable prompt tokens."""

    k: int = 12
    init_std: float = 0.02
    trainable_layers: int | None = None  # None = every text layer
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.init_std <= 0:
            raise ConfigurationError(f"init_std must be positive, got {self.init_std}")
        if self.trainable_layers is not None and self.trainable_layers < 1:
            raise ConfigurationError("trainable_layers must be >= 1 when given")


@dataclass
class LearnablePromptState:
    """Per-class token injections plus per-layer trainable flags."""

    normal_tokens: TokenInjection
    anomaly_tokens: TokenInjection
    trainable: tuple[bool, ...]

    def __post_init__(self) -> None:
        n, a = self.normal_tokens, self.anomaly_tokens
        if (n.k, n.width, n.layers) != (a.k, a.width, a.layers):
            raise ConfigurationError(
                "normal and anomaly token sets must share k, width and layer structure"
            )
        if len(self.trainable) != n.layers:
            raise ConfigurationError("trainable flags must cover every layer")

    @property
    def k(self) -> int:
        return self.normal_tokens.k

    def parameters(self) -> list[Tensor]:
        """Token tensors the optimizer may update, in a fixed order."""
        params = []
        for inj in (self.normal_tokens, self.anomaly_tokens):
            for layer, tokens in enumerate(inj.per_layer_tokens):
                if self.trainable[layer]:
                    params.append(tokens)
        return params


def init_prompts(prompt_config: PromptConfig, encoder_config: EncoderConfig) -> LearnablePromptState:
    """Draw both token sets from N(0, init_std^2), reproducibly from the seed."""
    rng = np.random.default_rng(prompt_config.seed)
    layers = encoder_config.text_layers
    width = encoder_config.embed_dim
    n_trainable = prompt_config.trainable_layers or layers
    trainable = tuple(layer < n_trainable for layer in range(layers))

    def draw() -> TokenInjection:
        per_layer = []
        for layer in range(layers):
            values = rng.normal(0.0, prompt_config.init_std, size=(prompt_config.k, width))
            tokens = torch.tensor(values, dtype=torch.float64, requires_grad=trainable[layer])
            per_layer.append(tokens)
        return TokenInjection(per_layer_tokens=tuple(per_layer))

    return LearnablePromptState(normal_tokens=draw(), anomaly_tokens=draw(), trainable=trainable)


def text_embeddings(
    state: LearnablePromptState,
    encoder,
    carriers: tuple[str, str] = DEFAULT_CARRIERS,
) -> tuple[Tensor, Tensor]:
    """Unit-norm (normal, anomaly) class embeddings from the injected carriers."""
    normal = encoder.encode_text(carriers[0], injection=state.normal_tokens)
    anomaly = encoder.encode_text(carriers[1], injection=state.anomaly_tokens)
    return normal, anomaly


def _forward_scores(
    image: np.ndarray,
    normal_embed: Tensor,
    anomaly_embed: Tensor,
    encoder,
    temperature: float,
) -> tuple[Tensor, Tensor]:
    """Image-level anomaly probability and (H, W) pixel probabilities, with graph."""
    out = encoder.encode_image(image)
    y_hat = anomaly_probability(
        out.global_embed @ normal_embed, out.global_embed @ anomaly_embed, temperature
    )
    sim_n = out.patch_embeds @ normal_embed
    sim_a = out.patch_embeds @ anomaly_embed
    patch_probs = anomaly_probability(sim_n, sim_a, temperature)
    pixel = upsample_bilinear_tensor(patch_probs, image_size(image))
    return y_hat, pixel


def score_image(
    image: np.ndarray,
    state: LearnablePromptState,
    encoder,
    temperature: float = DEFAULT_TEMPERATURE,
    carriers: tuple[str, str] = DEFAULT_CARRIERS,
) -> ScoreMap:
    """Score one image with the current prompt state; DPAM follows the encoder config."""
    with torch.no_grad():
        normal_embed, anomaly_embed = text_embeddings(state, encoder, carriers)
        y_hat, pixel = _forward_scores(image, normal_embed, anomaly_embed, encoder, temperature)
    return ScoreMap(
        pixel_scores=np.clip(pixel.numpy(), 0.0, 1.0), image_score=float(y_hat)
    )


# ----- losses ---------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    """Weights and shape parameters of the joint training objective."""

    lambda1: float = 1.0  # focal weight
    lambda2: float = 1.0  # dice weight
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_epsilon: float = 1e-6
    global_weight: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "focal_gamma", "global_weight"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be a finite non-negative real, got {value}")
        if not 0 < self.focal_alpha < 1:
            raise ConfigurationError(f"focal_alpha must lie in (0, 1), got {self.focal_alpha}")
        if self.dice_epsilon <= 0:
            raise ConfigurationError(f"dice_epsilon must be positive, got {self.dice_epsilon}")


def _check_pair(pred: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    if pred.shape != target.shape:
        raise InputError(f"prediction shape {tuple(pred.shape)} != mask shape {tuple(target.shape)}")
    return pred.clamp(_PROB_EPS, 1.0 - _PROB_EPS), target.to(pred.dtype)


def focal_loss(pred_probs: Tensor, mask: Tensor, config: LossConfig) -> Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log(p_t)."""
    pred, target = _check_pair(pred_probs, mask)
    p_t = torch.where(target > 0.5, pred, 1.0 - pred)
    alpha_t = torch.where(
        target > 0.5,
        torch.as_tensor(config.focal_alpha, dtype=pred.dtype),
        torch.as_tensor(1.0 - config.focal_alpha, dtype=pred.dtype),
    )
    return (-alpha_t * (1.0 - p_t) ** config.focal_gamma * torch.log(p_t)).mean()


def dice_loss(pred_probs: Tensor, mask: Tensor, config: LossConfig) -> Tensor:
    """1 - (2 sum(p*m) + eps) / (sum(p) + sum(m) + eps)."""
    pred, target = _check_pair(pred_probs, mask)
    eps = config.dice_epsilon
    overlap = (pred * target).sum()
    return 1.0 - (2.0 * overlap + eps) / (pred.sum() + target.sum() + eps)


def binary_cross_entropy(y_hat: Tensor, label: float) -> Tensor:
    p = y_hat.clamp(_PROB_EPS, 1.0 - _PROB_EPS)
    return -(label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p))


# ----- batches and the total objective ---------------------------------------


@dataclass
class TrainBatch:
    """Images with binary ground-truth masks and image-level labels."""

    images: list[np.ndarray]
    masks: list[np.ndarray]
    labels: list[int]

    def __post_init__(self) -> None:
        if not (len(self.images) == len(self.masks) == len(self.labels)):
            raise InputError("images, masks and labels must have equal length")
        if not self.images:
            raise InputError("batch must contain at least one image")
        for i, (img, mask, label) in enumerate(zip(self.images, self.masks, self.labels)):
            if label not in (0, 1):
                raise InputError(f"label must be 0 or 1, got {label} at index {i}")
            if image_size(img) != tuple(np.asarray(mask).shape):
                raise InputError(f"mask shape does not match image at index {i}")
            has_defect = bool(np.asarray(mask).any())
            if has_defect and label == 0:
                raise InputError(f"non-empty mask requires label 1 at index {i}")
            if label == 1 and not has_defect:
                raise InputError(f"label 1 requires a non-empty mask at index {i}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "TrainBatch":
        return TrainBatch(
            images=[self.images[i] for i in indices],
            masks=[self.masks[i] for i in indices],
            labels=[self.labels[i] for i in indices],
        )


def total_loss(
    batch: TrainBatch,
    state: LearnablePromptState,
    encoder,
    config: LossConfig,
    temperature: float = DEFAULT_TEMPERATURE,
    carriers: tuple[str, str] = DEFAULT_CARRIERS,
) -> Tensor:
    """global_weight * CE + lambda1 * focal + lambda2 * dice over the batch.

    CE is the mean image-level cross-entropy. Focal and dice act on the
    batch's pixel maps pooled into one prediction/mask pair: pixel terms are
    means over pixels (not raw sums) so the lambda weights stay
    resolution-independent, and pooling keeps dice well-behaved on defect-free
    images. The returned scalar carries the autograd graph; gradients flow to
    the learnable tokens and gamma only.
    """
    normal_embed, anomaly_embed = text_embeddings(state, encoder, carriers)
    ce = torch.zeros((), dtype=torch.float64)
    pixel_maps = []
    targets = []
    for img, mask, label in zip(batch.images, batch.masks, batch.labels):
        y_hat, pixel = _forward_scores(img, normal_embed, anomaly_embed, encoder, temperature)
        ce = ce + binary_cross_entropy(y_hat, float(label))
        pixel_maps.append(pixel.reshape(-1))
        targets.append(torch.as_tensor(np.asarray(mask).reshape(-1) > 0, dtype=torch.float64))
    pooled_pred = torch.cat(pixel_maps)
    pooled_target = torch.cat(targets)
    return (
        config.global_weight * ce / float(len(batch))
        + config.lambda1 * focal_loss(pooled_pred, pooled_target, config)
        + config.lambda2 * dice_loss(pooled_pred, pooled_target, config)
    )


# ----- training loop ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings: plain gradient descent with momentum."""

    lr: float = 1e-3
    momentum: float = 0.9
    steps: int = 100
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    batch_size: int | None = None  # None = full batch every step
    checkpoint_path: str | Path | None = None

    def __post_init__(self) -> None:
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("lr must be >= 0 and momentum in [0, 1)")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1 when given")


def train(
    data: TrainBatch,
    state: LearnablePromptState,
    encoder,
    train_config: TrainConfig,
    loss_config: LossConfig = LossConfig(),
    carriers: tuple[str, str] = DEFAULT_CARRIERS,
) -> tuple[LearnablePromptState, list[float]]:
    """Optimize the tokens (and gamma, if the encoder exposes one) on ``data``.

    Deterministic given the seed; returns the state and the per-step loss
    trace. Aborts with a diagnostic if the loss stops being finite.
    """
    labels = set(data.labels)
    if labels != {0, 1}:
        raise InputError(f"training data must contain both classes, got labels {sorted(labels)}")
    params = state.parameters()
    gamma = getattr(encoder, "gamma", None)
    if isinstance(gamma, torch.nn.Parameter):
        params = params + [gamma]
    if not params:
        raise ConfigurationError("no trainable parameters (all layers frozen)")
    optimizer = torch.optim.SGD(params, lr=train_config.lr, momentum=train_config.momentum)
    rng = np.random.default_rng(train_config.seed)
    trace: list[float] = []
    for step in range(train_config.steps):
        if train_config.batch_size is None or train_config.batch_size >= len(data):
            batch = data
        else:
            idx = rng.choice(len(data), size=train_config.batch_size, replace=False)
            batch = data.subset(sorted(int(i) for i in idx))
        loss = total_loss(batch, state, encoder, loss_config, train_config.temperature, carriers)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} at step {step}")
        trace.append(value)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if isinstance(gamma, torch.nn.Parameter):
            with torch.no_grad():
                gamma.clamp_(min=0.0)  # DPAM scaling is defined for gamma >= 0
    if train_config.checkpoint_path is not None:
        gamma_value = float(gamma.detach()) if isinstance(gamma, torch.nn.Parameter) else 0.0
        save_checkpoint(train_config.checkpoint_path, state, gamma_value, seed=train_config.seed)
    return state, trace


# ----- checkpoint archive ------------------------------------------------------

# A checkpoint is a zip archive with two members:
#   metadata.json - {format_version, k, layers, embed_width, gamma, seed,
#                    offsets}, where offsets lists, per class and layer, the
#                    float32 start offset and element count into tokens.bin
#   tokens.bin    - all token values concatenated, little-endian float32,
#                   normal class first, layers in order, row-major (k, width)

_CLASS_ORDER = ("normal", "anomaly")


def save_checkpoint(
    path: str | Path, state: LearnablePromptState, gamma: float, seed: int = 0
) -> Path:
    path = Path(path)
    blobs: list[bytes] = []
    offsets: dict[str, list[dict[str, int]]] = {}
    position = 0
    for cls, inj in zip(_CLASS_ORDER, (state.normal_tokens, state.anomaly_tokens)):
        offsets[cls] = []
        for tokens in inj.per_layer_tokens:
            flat = tokens.detach().numpy().astype("<f4").ravel()
            blobs.append(flat.tobytes())
            offsets[cls].append({"offset": position, "count": int(flat.size)})
            position += int(flat.size)
    metadata = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "k": state.k,
        "layers": state.normal_tokens.layers,
        "embed_width": state.normal_tokens.width,
        "gamma": float(gamma),
        "seed": int(seed),
        "dtype": "<f4",
        "offsets": offsets,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        archive.writestr("metadata.json", json.dumps(metadata, indent=2, sort_keys=True))
        archive.writestr("tokens.bin", b"".join(blobs))
    return path


def load_checkpoint(path: str | Path) -> tuple[LearnablePromptState, float, dict]:
    """Read a checkpoint archive back into a prompt state (all layers trainable)."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as archive:
            metadata = json.loads(archive.read("metadata.json"))
            blob = archive.read("tokens.bin")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if metadata.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint format version {metadata.get('format_version')}")
    k, layers, width = metadata["k"], metadata["layers"], metadata["embed_width"]
    float_count = len(blob) // struct.calcsize("<f")
    values = np.frombuffer(blob, dtype="<f4", count=float_count)

    def read_class(cls: str) -> TokenInjection:
        per_layer = []
        for entry in metadata["offsets"][cls]:
            start, count = entry["offset"], entry["count"]
            if count != k * width or start + count > values.size:
                raise InputError(f"checkpoint offset table is inconsistent for class {cls}")
            arr = values[start : start + count].astype(np.float64).reshape(k, width)
            per_layer.append(torch.tensor(arr, dtype=torch.float64, requires_grad=True))
        if len(per_layer) != layers:
            raise InputError(f"checkpoint lists {len(per_layer)} layers for class {cls}, expected {layers}")
        return TokenInjection(per_layer_tokens=tuple(per_layer))

    state = LearnablePromptState(
        normal_tokens=read_class("normal"),
        anomaly_tokens=read_class("anomaly"),
        trainable=tuple(True for _ in range(layers)),
    )
    return state, float(metadata["gamma"]), metadata
