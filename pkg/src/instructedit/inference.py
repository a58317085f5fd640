"""Dual classifier-free guidance and DDIM editing.

Guided noise combines three branches, eps(no image, no text), eps(image, no
text) and eps(image, text):

    eps = e_uncond + s_I * (e_img - e_uncond) + s_T * (e_full - e_img)

evaluated in the equivalent weight form

    eps = s_T * e_full + (s_I - s_T) * e_img + (1 - s_I) * e_uncond

which is exact in floating point whenever a weight collapses to 0 or 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import ConditionBundle
from .exceptions import DegenerateSizeError, InvalidRangeError, ShapeMismatchError
from .images import check_image, from_tensor, resize, round_to_multiple, shorter_side_size, \
    to_tensor
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps
from .seeding import torch_generator


@dataclass(frozen=True)
class GuidanceConfig:
    text_scale: float = 10.0
    image_scale: float = 1.5
    num_steps: int = 50
    resize_shorter_side: int = 512

    def __post_init__(self):
        if self.num_steps < 1:
            raise InvalidRangeError("num_steps must be >= 1")
        if not (math.isfinite(self.text_scale) and math.isfinite(self.image_scale)):
            raise InvalidRangeError("guidance scales must be finite")
        if self.resize_shorter_side < 1:
            raise InvalidRangeError("resize_shorter_side must be >= 1")


DESK_GUIDANCE = GuidanceConfig(resize_shorter_side=16)
PROBE_STEPS = 30


def guidance_weights(cfg: GuidanceConfig) -> tuple[float, float, float]:
    """Weights on (full, image-only, unconditional) branches."""
    return cfg.text_scale, cfg.image_scale - cfg.text_scale, 1.0 - cfg.image_scale


def combine_guidance(e_full, e_img, e_uncond, cfg: GuidanceConfig):
    w_full, w_img, w_unc = guidance_weights(cfg)
    return w_full * e_full + w_img * e_img + w_unc * e_uncond


def guided_noise(model, x_t: torch.Tensor, image_cond: torch.Tensor,
                 text_tokens: torch.Tensor, t, cfg: GuidanceConfig) -> torch.Tensor:
    if tuple(x_t.shape) != tuple(image_cond.shape):
        raise ShapeMismatchError("x_t and image condition differ in shape")
    b = x_t.shape[0]
    null = model.text_encoder.null_tokens(b)
    yes = torch.zeros(b, dtype=torch.bool)
    no = torch.ones(b, dtype=torch.bool)
    e_uncond = model(x_t, ConditionBundle(image_cond, null, no, no.clone()), t)
    e_img = model(x_t, ConditionBundle(image_cond, null, yes, no), t)
    e_full = model(x_t, ConditionBundle(image_cond, text_tokens, yes.clone(), yes.clone()), t)
    return combine_guidance(e_full, e_img, e_uncond, cfg)


def working_size(height: int, width: int, cfg: GuidanceConfig, multiple: int = 1):
    size = shorter_side_size(height, width, cfg.resize_shorter_side)
    if multiple > 1:
        size = round_to_multiple(size, multiple)
    return size


def prepare_images(images, cfg: GuidanceConfig, multiple: int) -> np.ndarray:
    images = [check_image(im) for im in images]
    h, w = images[0].shape[:2]
    if any(im.shape != images[0].shape for im in images):
        raise ShapeMismatchError("batched images must share a size")
    if min(h, w) < 1:
        raise DegenerateSizeError("empty image")
    size = working_size(h, w, cfg)
    if min(size) < multiple:
        raise DegenerateSizeError(f"working size {size} below model minimum {multiple}")
    size = round_to_multiple(size, multiple)
    return np.stack([resize(im, size) for im in images])


@torch.no_grad()
def sample_batch(model, schedule: NoiseSchedule, originals, instructions,
                 cfg: GuidanceConfig, seed: int = 0, window=None) -> np.ndarray:
    """DDIM editing loop for a batch of same-size images.

    ``window`` = ``(lo, hi)`` restricts the real instruction to sampler steps
    ``lo <= i < hi`` (step 0 is the most noised); other steps see the null text.
    """
    model.eval()
    n = cfg.num_steps
    lo, hi = (0, n) if window is None else (int(window[0]), int(window[1]))
    if not 0 <= lo <= hi <= n:
        raise InvalidRangeError(f"window [{lo}, {hi}) outside [0, {n}]")
    multiple = 2 ** model.config.depth
    arr = prepare_images(originals, cfg, multiple)
    dtype = next(model.parameters()).dtype
    image_cond = to_tensor(arr, dtype)
    text, _ = model.tokenize(list(instructions))
    null = model.text_encoder.null_tokens(len(arr))
    g = torch_generator(seed, "edit-noise")
    x = torch.randn(image_cond.shape, generator=g, dtype=torch.float64).to(dtype)
    steps = ddim_timesteps(n, schedule)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else -1
        tokens = text if lo <= i < hi else null
        eps = guided_noise(model, x, image_cond, tokens, t, cfg)
        x = ddim_step(x, eps, t, t_prev, schedule)
    return from_tensor(x)


def edit_image(model, schedule: NoiseSchedule, original: np.ndarray, instruction: str,
               cfg: GuidanceConfig = DESK_GUIDANCE, seed: int = 0) -> np.ndarray:
    return sample_batch(model, schedule, [original], [instruction], cfg, seed)[0]


def staged_sample(model, schedule: NoiseSchedule, original: np.ndarray, instruction: str,
                  window, cfg: GuidanceConfig = DESK_GUIDANCE, seed: int = 0) -> np.ndarray:
    return sample_batch(model, schedule, [original], [instruction], cfg, seed,
                        window=window)[0]


def mask_delta(original: np.ndarray, edited: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute change inside ``mask`` in [0, 1] units."""
    if original.shape != edited.shape:
        edited = resize(edited, original.shape[:2])
    diff = np.abs(original.astype(np.float64) - edited.astype(np.float64)) / 255.0
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return 0.0
    return float(diff[m].mean())


def contact_sheet(images, gap: int = 1) -> np.ndarray:
    images = [check_image(im) for im in images]
    h = max(im.shape[0] for im in images)
    w = sum(im.shape[1] for im in images) + gap * (len(images) - 1)
    sheet = np.full((h, w, 3), 255, dtype=np.uint8)
    x = 0
    for im in images:
        sheet[: im.shape[0], x:x + im.shape[1]] = im
        x += im.shape[1] + gap
    return sheet
