"""Patch triggers: mask blending and embedding-deviation optimization.

A trigger is a small pattern pasted over a rectangular mask region:
    blended = image * (1 - m) + m * pattern_canvas
Optimization maximizes the summed cosine distance between each image's
clean feature and its blended feature by iterated sign-gradient ascent on
the pattern, clipping to [0, 1] each step and returning the best iterate.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .embedding import cosine_distance_t
from .errors import (
    ArtifactError,
    ConfigurationError,
    GeometryError,
    InputError,
    NumericError,
)

TRIGGER_MAGIC = "FSBK-TRIGGER"
TRIGGER_VERSION = 1


@dataclass
class TriggerSpec:
    pattern: np.ndarray  # h x w x C in [0, 1]
    row: int
    col: int
    image_height: int
    image_width: int

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern)
        if self.pattern.ndim != 3:
            raise ConfigurationError("trigger pattern must be h x w x C")
        if self.pattern.min() < 0.0 or self.pattern.max() > 1.0:
            raise ConfigurationError("trigger pattern values must lie in [0, 1]")
        h, w, _ = self.pattern.shape
        if self.row < 0 or self.col < 0 or self.row + h > self.image_height or self.col + w > self.image_width:
            raise GeometryError(
                f"trigger patch {h}x{w} at ({self.row}, {self.col}) leaves "
                f"{self.image_height}x{self.image_width} image bounds"
            )

    @property
    def size(self):
        return self.pattern.shape[:2]

    @property
    def channels(self):
        return self.pattern.shape[2]

    def mask(self):
        """Binary H x W mask: 1 inside the patch rectangle."""
        m = np.zeros((self.image_height, self.image_width), dtype=np.uint8)
        h, w = self.size
        m[self.row : self.row + h, self.col : self.col + w] = 1
        return m

    def with_pattern(self, pattern):
        return TriggerSpec(pattern, self.row, self.col, self.image_height, self.image_width)


def blend(image, trig):
    """Paste the trigger pattern over its mask region; rest untouched."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != trig.image_height or arr.shape[1] != trig.image_width:
        raise InputError(f"image shape {arr.shape} does not match trigger geometry")
    if arr.shape[2] != trig.channels:
        raise InputError(f"image has {arr.shape[2]} channels, trigger {trig.channels}")
    h, w = trig.size
    out = arr.copy()
    out[trig.row : trig.row + h, trig.col : trig.col + w, :] = trig.pattern.astype(arr.dtype)
    return out


@dataclass
class TriggerOptConfig:
    step_size: float = 2.0 / 255.0
    iterations: int = 100
    init_mode: str = "uniform-random"  # or "mid-gray"
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.init_mode not in ("uniform-random", "mid-gray"):
            raise ConfigurationError(f"unknown init_mode '{self.init_mode}'")


def initial_trigger(image_shape, size, cfg, placement=None):
    """Build the starting TriggerSpec; placement defaults to bottom-right."""
    height, width, channels = image_shape
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    if placement is None:
        placement = (height - h, width - w)
    if cfg.init_mode == "mid-gray":
        pattern = np.full((h, w, channels), 0.5, dtype=np.float32)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, 0x7261]))
        pattern = rng.uniform(0.0, 1.0, size=(h, w, channels)).astype(np.float32)
    return TriggerSpec(pattern, placement[0], placement[1], height, width)


@dataclass
class TriggerOptResult:
    trigger: TriggerSpec
    trace: list

    @property
    def objective(self):
        return max(self.trace)


def _blend_t(x, pattern_t, trig):
    """Differentiable blend of a (N, H, W, C) batch with a patch tensor."""
    h, w = trig.size
    canvas = torch.zeros(
        (trig.image_height, trig.image_width, trig.channels), dtype=pattern_t.dtype
    )
    mask = torch.zeros_like(canvas)
    mask[trig.row : trig.row + h, trig.col : trig.col + w, :] = 1.0
    canvas = canvas.clone()
    canvas[trig.row : trig.row + h, trig.col : trig.col + w, :] = pattern_t
    return x * (1.0 - mask) + canvas * mask


def optimize_trigger(model, images, trig_init, cfg):
    """Sign-gradient ascent on the summed clean-vs-blended cosine distance.

    Returns the best-objective iterate plus the per-iteration objective
    trace (length iterations + 1, the first entry being the initial
    trigger's objective).
    """
    if not model.frozen:
        raise ConfigurationError("optimize_trigger requires a frozen model")
    if not images:
        raise ConfigurationError("optimize_trigger needs at least one image")

    x = model.to_tensor(images)
    with torch.no_grad():
        z_clean = model.forward_t(x)
    norms = z_clean.norm(dim=1)
    if bool((norms == 0).any()):
        bad = int(torch.nonzero(norms == 0)[0])
        raise NumericError(f"zero-norm clean feature for image index {bad}")

    pattern = torch.as_tensor(
        np.asarray(trig_init.pattern, dtype=np.float64), dtype=model.torch_dtype
    )

    def objective_and_grad(p, need_grad):
        p = p.clone().requires_grad_(need_grad)
        z_p = model.forward_t(_blend_t(x, p, trig_init))
        obj = cosine_distance_t(z_clean, z_p).sum()
        if not torch.isfinite(obj):
            raise NumericError("non-finite trigger objective")
        if need_grad:
            (grad,) = torch.autograd.grad(obj, p)
            return float(obj.detach()), grad
        return float(obj), None

    trace = []
    best_obj, best_pattern = -np.inf, pattern.clone()
    for it in range(cfg.iterations + 1):
        need_grad = it < cfg.iterations
        obj, grad = objective_and_grad(pattern, need_grad)
        trace.append(obj)
        if obj > best_obj:
            best_obj, best_pattern = obj, pattern.clone()
        if need_grad:
            pattern = torch.clamp(pattern + cfg.step_size * torch.sign(grad), 0.0, 1.0)

    best = trig_init.with_pattern(
        best_pattern.numpy().astype(np.asarray(trig_init.pattern).dtype)
    )
    return TriggerOptResult(best, trace)


def save_trigger(trig, path, objective=None, seed=None, extra=None):
    """Text header (size, placement, seed, objective) + float32 payload."""
    pattern = np.asarray(trig.pattern, dtype=np.float32)
    lines = [
        f"{TRIGGER_MAGIC} {TRIGGER_VERSION}",
        f"image {trig.image_height} {trig.image_width}",
        f"size {pattern.shape[0]} {pattern.shape[1]}",
        f"placement {trig.row} {trig.col}",
        f"channels {pattern.shape[2]}",
    ]
    if seed is not None:
        lines.append(f"seed {seed}")
    if objective is not None:
        lines.append(f"objective {objective!r}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n---\n").encode("ascii"))
        fh.write(pattern.astype("<f4").tobytes())


def load_trigger(path):
    from .embedding import _read_header  # same header convention

    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ArtifactError(f"cannot read trigger {path}: {exc}") from exc
    with fh:
        version, fields, _ = _read_header(fh, TRIGGER_MAGIC)
        if version != TRIGGER_VERSION:
            raise ArtifactError(f"unsupported trigger version {version}")
        ih, iw = (int(v) for v in fields["image"].split())
        h, w = (int(v) for v in fields["size"].split())
        row, col = (int(v) for v in fields["placement"].split())
        c = int(fields["channels"])
        payload = np.frombuffer(fh.read(), dtype="<f4")
        if payload.size != h * w * c:
            raise ArtifactError("trigger payload size mismatch")
        pattern = np.asarray(payload, dtype=np.float32).reshape(h, w, c)
    trig = TriggerSpec(pattern, row, col, ih, iw)
    trig.file_fields = fields
    return trig
