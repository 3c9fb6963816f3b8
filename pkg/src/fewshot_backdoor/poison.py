"""Poisoned support set construction: the hidden (clean-label) set from
perturbation records, plus dirty-label comparator attacks for trade-off
studies, stealth diff reports, and a standalone bundle format.
"""

from dataclasses import dataclass, field

import numpy as np

from .dataset import Episode, LabeledExample
from .errors import ArtifactError, ConfigurationError, ConstructionError, InputError
from .perturb import KIND_ATTRACTIVE, KIND_REPULSIVE
from .trigger import TriggerSpec, blend

SCOPE_TARGET = "target-only"
SCOPE_UNTARGETED = "untargeted-only"
SCOPE_ALL = "all"
SCOPES = (SCOPE_TARGET, SCOPE_UNTARGETED, SCOPE_ALL)

POISONSET_MAGIC = "FSBK-POISONSET"
POISONSET_VERSION = 1


@dataclass
class PoisonedSupportSet:
    examples: list  # same length/order as the clean support, labels untouched
    provenance: dict  # source_id -> PerturbationRecord or comparator tag
    scope: str
    meta: dict = field(default_factory=dict)


def scope_source_ids(episode, scope):
    """Support source_ids covered by a poisoning scope."""
    if scope == SCOPE_TARGET:
        return {ex.source_id for ex in episode.support if ex.label == episode.target_class}
    if scope == SCOPE_UNTARGETED:
        return {ex.source_id for ex in episode.support if ex.label != episode.target_class}
    if scope == SCOPE_ALL:
        return {ex.source_id for ex in episode.support}
    raise ConfigurationError(f"unknown poisoning scope '{scope}'")


def build_hidden_poisoned_set(episode, records, scope):
    """Apply clip(image + delta) to scope-covered support images.

    Records must cover exactly the covered ids, attractive on the target
    class and repulsive elsewhere; labels are never changed.
    """
    covered = scope_source_ids(episode, scope)
    by_id = {}
    for r in records:
        if r.source_id in by_id:
            raise ConstructionError(f"duplicate record for '{r.source_id}'")
        by_id[r.source_id] = r
    extra = set(by_id) - covered
    if extra:
        raise ConstructionError(f"record '{sorted(extra)[0]}' not selected by scope '{scope}'")
    missing = covered - set(by_id)
    if missing:
        raise ConstructionError(f"no record for support example '{sorted(missing)[0]}'")

    out, provenance = [], {}
    for ex in episode.support:
        rec = by_id.get(ex.source_id)
        if rec is None:
            out.append(LabeledExample(ex.image.copy(), ex.label, ex.source_id))
            continue
        expected = KIND_ATTRACTIVE if ex.label == episode.target_class else KIND_REPULSIVE
        if rec.kind != expected:
            raise ConstructionError(
                f"'{ex.source_id}': {rec.kind} record applied to a "
                f"{'target' if expected == KIND_ATTRACTIVE else 'untargeted'}-class example"
            )
        if rec.delta.shape != ex.image.shape:
            raise ConstructionError(f"'{ex.source_id}': delta shape {rec.delta.shape} mismatch")
        pixels = np.clip(ex.image.astype(np.float64) + rec.delta, 0.0, 1.0)
        out.append(LabeledExample(pixels.astype(ex.image.dtype), ex.label, ex.source_id))
        provenance[ex.source_id] = rec
    return PoisonedSupportSet(out, provenance, scope)


@dataclass
class ComparatorAttackConfig:
    method: str  # "badnet-patch" | "blended"
    patch_or_blend_strength: float = 1.0
    dirty_label_target: str = ""
    poison_count_per_class: int = 1

    def __post_init__(self):
        if self.method not in ("badnet-patch", "blended"):
            raise ConfigurationError(f"unknown comparator method '{self.method}'")
        if self.poison_count_per_class < 0:
            raise ConfigurationError("poison_count_per_class must be >= 0")


def classic_patch(image_shape, size, placement=None, style="white"):
    """Fixed comparator patch (no optimization): solid white or checkerboard,
    bottom-right by default. This is the visible-trigger baseline model."""
    height, width, channels = image_shape
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    if placement is None:
        placement = (height - h, width - w)
    if style == "white":
        pattern = np.ones((h, w, channels), dtype=np.float32)
    elif style == "checker":
        grid = (np.indices((h, w)).sum(axis=0) % 2).astype(np.float32)
        pattern = np.repeat(grid[:, :, None], channels, axis=2)
    else:
        raise ConfigurationError(f"unknown patch style '{style}'")
    return TriggerSpec(pattern, placement[0], placement[1], height, width)


def full_blend_pattern(trig):
    """Full-image pattern for the blended comparator: the patch tiled."""
    reps = (
        -(-trig.image_height // trig.pattern.shape[0]),
        -(-trig.image_width // trig.pattern.shape[1]),
        1,
    )
    tiled = np.tile(np.asarray(trig.pattern, dtype=np.float32), reps)
    return tiled[: trig.image_height, : trig.image_width, :]


def alpha_blend(image, pattern, strength):
    return np.clip(image * (1.0 - strength) + pattern.astype(image.dtype) * strength, 0.0, 1.0)


def build_comparator_set(episode, cfg, trig):
    """Dirty-label comparators: per untargeted class, the first
    poison_count support images get the visible patch (badnet-patch) or a
    full-image alpha blend (blended), relabeled to the target class."""
    target = cfg.dirty_label_target or episode.target_class
    if target not in episode.class_order:
        raise ConfigurationError(f"dirty_label_target '{target}' not in episode classes")
    shots = sum(1 for ex in episode.support if ex.label == episode.class_order[0])
    if cfg.poison_count_per_class > shots:
        raise ConfigurationError(
            f"poison_count_per_class={cfg.poison_count_per_class} exceeds shots={shots}"
        )

    pattern = full_blend_pattern(trig) if cfg.method == "blended" else None
    picked = {c: 0 for c in episode.class_order}
    out, provenance = [], {}
    for ex in episode.support:
        if ex.label != target and picked[ex.label] < cfg.poison_count_per_class:
            picked[ex.label] += 1
            if cfg.method == "badnet-patch":
                pixels = blend(ex.image, trig)
            else:
                pixels = alpha_blend(ex.image, pattern, cfg.patch_or_blend_strength)
            out.append(LabeledExample(pixels, target, ex.source_id))
            provenance[ex.source_id] = cfg.method
        else:
            out.append(LabeledExample(ex.image.copy(), ex.label, ex.source_id))

    n_poisoned = len(provenance)
    n_untargeted = sum(1 for ex in episode.support if ex.label != target)
    meta = {
        "poisoned": n_poisoned,
        "rate_of_support": n_poisoned / max(1, len(episode.support)),
        "rate_of_untargeted_pool": n_poisoned / max(1, n_untargeted),
    }
    return PoisonedSupportSet(out, provenance, "comparator", meta)


@dataclass
class DiffRow:
    source_id: str
    linf: float
    mean_abs: float
    label_changed: bool


@dataclass
class DiffReport:
    rows: list
    max_linf: float
    mean_abs: float
    label_changes: int


def diff_report(clean_support, poisoned):
    """Per-example pixel/label differences between aligned support sets."""
    clean_by_id = {ex.source_id: ex for ex in clean_support}
    if set(clean_by_id) != {ex.source_id for ex in poisoned.examples}:
        raise InputError("clean and poisoned sets are misaligned by source_id")
    rows = []
    for ex in poisoned.examples:
        ref = clean_by_id[ex.source_id]
        diff = np.abs(ex.image.astype(np.float64) - ref.image.astype(np.float64))
        rows.append(
            DiffRow(ex.source_id, float(diff.max()), float(diff.mean()), ex.label != ref.label)
        )
    return DiffReport(
        rows=rows,
        max_linf=max((r.linf for r in rows), default=0.0),
        mean_abs=float(np.mean([r.mean_abs for r in rows])) if rows else 0.0,
        label_changes=sum(r.label_changed for r in rows),
    )


# -- bundle file (loadable without the perturb module) ----------------------


def save_poisoned_set(poisoned, path, episode=None, epsilon=None, extra=None):
    lines = [
        f"{POISONSET_MAGIC} {POISONSET_VERSION}",
        f"scope {poisoned.scope}",
        f"count {len(poisoned.examples)}",
    ]
    if epsilon is not None:
        lines.append(f"epsilon {epsilon!r}")
    if episode is not None:
        lines.append("class_order " + " ".join(episode.class_order))
        lines.append(f"target_class {episode.target_class}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    payloads = []
    for ex in poisoned.examples:
        prov = poisoned.provenance.get(ex.source_id)
        tag = "clean" if prov is None else (prov if isinstance(prov, str) else prov.kind)
        h, w, c = ex.image.shape
        lines.append(f"example {tag} {h} {w} {c} {ex.label} {ex.source_id}")
        payloads.append(np.asarray(ex.image, dtype=np.float32).astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n---\n").encode("utf-8"))
        for p in payloads:
            fh.write(p)


def load_poisoned_set(path):
    """Returns (PoisonedSupportSet, fields); provenance holds tags only."""
    from .embedding import _read_header

    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ArtifactError(f"cannot read poisoned set {path}: {exc}") from exc
    with fh:
        version, fields, order = _read_header(fh, POISONSET_MAGIC)
        if version != POISONSET_VERSION:
            raise ArtifactError(f"unsupported poisoned-set version {version}")
        examples, provenance = [], {}
        for _, meta in ((k, v) for k, v in order if k == "example"):
            tag, h, w, c, rest = meta.split(" ", 4)
            label, sid = rest.split(" ", 1)
            shape = (int(h), int(w), int(c))
            raw = fh.read(shape[0] * shape[1] * shape[2] * 4)
            img = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
            examples.append(LabeledExample(img, label, sid))
            if tag != "clean":
                provenance[sid] = tag
    poisoned = PoisonedSupportSet(examples, provenance, fields.get("scope", "unknown"))
    return poisoned, fields
