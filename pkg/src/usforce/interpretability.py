"""Grad-CAM heatmaps, layer-weighted Grad-CAM, guided backprop and overlay export.

Feature maps ``A^k`` of conv layer l are that layer's ReLU outputs (before
batchnorm).  All passes run the frozen model in inference mode.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from . import npyio

OVERLAY_ALPHA = 0.4
DEFAULT_LAYER_WEIGHTS = (0.15, 0.35, 0.75, 1.0, 1.0)
LAYER_NAMES = tuple(f"conv{i}" for i in range(1, M.NUM_CONV + 1))
GUIDED_MODES = {"standard": "guided", "literal": "guided-literal"}


@dataclass
class Heatmap:
    values: np.ndarray                 # (H, W), >= 0
    source_layers: tuple[str, ...]
    normalized: bool = False
    alpha: np.ndarray | None = None    # channel weights (single-layer maps only)
    coarse: np.ndarray | None = None   # pre-upsampling map (single-layer maps only)

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("heatmap values must be nonnegative")

    def peak(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(r), int(c)


def layer_index(layer) -> int:
    """``3``, ``"conv3"`` -> 3; anything else is an error."""
    if isinstance(layer, str) and layer in LAYER_NAMES:
        return LAYER_NAMES.index(layer) + 1
    if isinstance(layer, (int, np.integer)) and not isinstance(layer, bool) and 1 <= layer <= M.NUM_CONV:
        return int(layer)
    raise ValueError(f"unknown layer {layer!r}; expected one of {LAYER_NAMES}")


def max_normalize(values: np.ndarray) -> np.ndarray:
    m = float(values.max()) if values.size else 0.0
    return values / m if m > 0 else values.copy()


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D map with half-pixel centres and clamped edges."""
    h, w = img.shape

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(height, h)
    c0, c1, fc = axis(width, w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def _target_grad(params: M.ModelParameters, out: np.ndarray, target) -> tuple[np.ndarray, int | None]:
    """dy/d(head pre-activation) for one frame; the skill target defaults to the argmax."""
    if params.head == "force":
        return np.ones(1, dtype=params.dtype), None
    cls = int(np.argmax(out[0])) if target is None else int(target)
    if not 0 <= cls < M.NUM_SKILLS:
        raise ValueError(f"target class {cls} out of range")
    g = np.zeros((1, M.NUM_SKILLS), dtype=params.dtype)
    g[0, cls] = 1.0
    return g, cls


def _check_image(params, image):
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    cfg = params.config
    if image.shape != (cfg.input_height, cfg.input_width, 1):
        raise ValueError(f"expected a ({cfg.input_height}, {cfg.input_width}, 1) frame, got {image.shape}")
    return image


def layer_maps(params: M.ModelParameters, image: np.ndarray, target=None):
    """One forward/backward pass; per layer ``(A, dy/dA)`` for a single frame."""
    image = _check_image(params, image)
    out, cache = M.forward_batch(params, image[None], "infer", keep_cache=True)
    g, _ = _target_grad(params, out, target)
    _, extras = M.backward(params, cache, g, mode="infer", capture_activation_grads=True)
    return [(st["a"][0], ga[0]) for st, ga in zip(cache.stages, extras["activations"])]


def _cam(a: np.ndarray, ga: np.ndarray):
    acc = np.float64
    alpha = ga.astype(acc).mean(axis=(0, 1))          # (1/Z) sum_ij dy/dA^k_ij
    coarse = np.maximum(a.astype(acc) @ alpha, 0.0)    # ReLU(sum_k alpha_k A^k)
    return alpha, coarse


def gradcam(params: M.ModelParameters, image: np.ndarray, layer, target=None,
            normalize: bool = False) -> Heatmap:
    """Grad-CAM of the model output (force, or a skill class score) at one conv layer."""
    li = layer_index(layer)
    a, ga = layer_maps(params, image, target)[li - 1]
    alpha, coarse = _cam(a, ga)
    cfg = params.config
    up = np.maximum(bilinear_resize(coarse, cfg.input_height, cfg.input_width), 0.0)
    if normalize:
        up = max_normalize(up)
    return Heatmap(up, (LAYER_NAMES[li - 1],), normalize, alpha, coarse)


@dataclass(frozen=True)
class LayerWeightProfile:
    """Importance weight per conv layer, optionally overridden per skill class."""
    weights: tuple[float, ...] = DEFAULT_LAYER_WEIGHTS
    per_class: Mapping[int, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for w in [self.weights, *self.per_class.values()]:
            if len(w) != M.NUM_CONV:
                raise ValueError(f"profile needs one weight per conv layer ({M.NUM_CONV}), got {len(w)}")
            if any(v < 0 for v in w):
                raise ValueError(f"layer weights must be nonnegative, got {w}")
        for k in self.per_class:
            if not 0 <= k < M.NUM_SKILLS:
                raise ValueError(f"per-class override for unknown skill {k}")

    @classmethod
    def from_mapping(cls, weights: Mapping[str, float]) -> "LayerWeightProfile":
        missing = [n for n in LAYER_NAMES if n not in weights]
        if missing:
            raise ValueError(f"missing layer weight for {', '.join(missing)}")
        return cls(tuple(float(weights[n]) for n in LAYER_NAMES))

    def weights_for(self, skill: int | None) -> tuple[float, ...]:
        if skill is not None and skill in self.per_class:
            return tuple(self.per_class[skill])
        return tuple(self.weights)


def weighted_multilayer_gradcam(params: M.ModelParameters, image: np.ndarray,
                                profile: LayerWeightProfile | None = None,
                                skill: int | None = None, target=None) -> Heatmap:
    """Weighted sum of the five per-layer maps, each upsampled and max-normalized.

    ``skill`` picks the profile row (the predicted skill when explaining a
    force model; defaults to the target class for a skill model).
    """
    profile = profile or LayerWeightProfile()
    if not isinstance(profile, LayerWeightProfile):
        profile = LayerWeightProfile.from_mapping(profile)
    cfg = params.config
    maps = layer_maps(params, image, target)
    if skill is None and params.head == "skill":
        skill = int(target) if target is not None else None
    weights = profile.weights_for(skill)
    total = np.zeros((cfg.input_height, cfg.input_width))
    for w, (a, ga) in zip(weights, maps):
        if w == 0:
            continue
        _, coarse = _cam(a, ga)
        up = np.maximum(bilinear_resize(coarse, cfg.input_height, cfg.input_width), 0.0)
        total += w * max_normalize(up)
    return Heatmap(max_normalize(np.maximum(total, 0.0)), LAYER_NAMES, True)


def guided_backprop(params: M.ModelParameters, image: np.ndarray, mode: str = "standard",
                    target=None) -> np.ndarray:
    """Input saliency (H, W, 1) with every ReLU gating negative gradient flow.

    ``standard`` zeroes the gradient where the forward input or the upstream
    gradient is nonpositive; ``literal`` passes relu(x) * relu(grad) instead.
    """
    if mode not in GUIDED_MODES:
        raise ValueError(f"mode must be one of {tuple(GUIDED_MODES)}, got {mode!r}")
    image = _check_image(params, image)
    out, cache = M.forward_batch(params, image[None], "infer", keep_cache=True)
    g, _ = _target_grad(params, out, target)
    _, extras = M.backward(params, cache, g, mode="infer", relu_gate=GUIDED_MODES[mode],
                           need_input_grad=True)
    return extras["input"][0]


# --- export ----------------------------------------------------------------

def colormap(values: np.ndarray) -> np.ndarray:
    """Jet colours (uint8 RGB) for values in [0, 1]."""
    from matplotlib import colormaps
    rgba = colormaps["jet"](np.clip(values, 0.0, 1.0))
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def to_uint8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def overlay_frame(image: np.ndarray, heatmap: Heatmap | np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Side-by-side RGB frame: raw image | colour-mapped heatmap blended over it."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    gray = to_uint8(image)
    if gray.shape != values.shape:
        raise ValueError(f"image {gray.shape} and heatmap {values.shape} differ in shape")
    raw = np.repeat(gray[..., None], 3, axis=2)
    colour = colormap(max_normalize(values))
    blend = np.round((1 - alpha) * raw + alpha * colour).astype(np.uint8)
    return np.concatenate([raw, blend], axis=1)


def export_overlay(image: np.ndarray, heatmap: Heatmap | np.ndarray, out_path: str | os.PathLike,
                   alpha: float = OVERLAY_ALPHA) -> Path:
    """Write one overlay frame; ``.png`` or ``.ppm`` by suffix."""
    from PIL import Image
    out_path = Path(out_path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(out_path.suffix.lower())
    if fmt is None:
        raise ValueError(f"overlay path must end in .png or .ppm, got {out_path.name}")
    Image.fromarray(overlay_frame(image, heatmap, alpha), "RGB").save(out_path, fmt)
    return out_path


def export_sequence(images: Sequence[np.ndarray], heatmaps: Sequence, out_dir: str | os.PathLike,
                    prefix: str = "frame", suffix: str = ".png") -> list[Path]:
    """Numbered frames (``frame_00000.png``...) ready for video assembly."""
    if len(images) != len(heatmaps):
        raise ValueError(f"{len(images)} images vs {len(heatmaps)} heatmaps")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [export_overlay(img, hm, out_dir / f"{prefix}_{i:05d}{suffix}")
            for i, (img, hm) in enumerate(zip(images, heatmaps))]


def save_heatmap(path: str | os.PathLike, heatmap: Heatmap) -> None:
    npyio.save(path, heatmap.values.astype(np.float64))
