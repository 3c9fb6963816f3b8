"""Data model, splits, episode sampling, and dataset construction.

Images are numpy H x W x C float32 arrays with values in [0, 1]. The three
roles mirror the few-shot setting: a disjoint-class auxiliary split for
pre-training the embedding, and support/query pools sharing one class set
from which episodes are sampled.

Synthetic dataset recipe (deterministic given the seed, regenerable by
oracles): every class k gets a base hue on the golden-angle wheel
(hue = 0.618... * k mod 1) and one of six solid geometric primitives
(square / disk / cross / diamond / triangle / ring) drawn in the
complementary hue. Per sample, the hue is jittered (+-0.06), the
background and primitive saturation/value are jittered, the primitive's
position and scale vary, and Gaussian pixel noise (sigma 0.08) is added;
the result is clipped to [0, 1], compressed into [0.1, 0.9], and
finished with occasional full-range specular highlight / hard shadow
spots. The jitters and speculars give classes photograph-like
within-class variation, and plain bright or dark patches occur naturally
(so a fixed visible patch stays entangled with natural features), while
solid low-frequency content leaves spatially structured extreme patterns
to the attacker: an optimized trigger can exceed any naturally occurring
activation.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from ._color import hsv_to_rgb
from .errors import ConfigurationError, DataLoadError, SamplingError

ROLE_AUXILIARY = "auxiliary"
ROLE_SUPPORT = "support-pool"
ROLE_QUERY = "query-pool"

_SHAPES = ("square", "disk", "cross", "diamond", "triangle", "ring")
_GOLDEN = 0.618033988749895


def check_image(pixels):
    """Validate an image array: H x W x C float in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim != 3:
        raise ConfigurationError(f"image must be H x W x C, got shape {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ConfigurationError("image values must be finite and in [0, 1]")
    return arr


@dataclass
class LabeledExample:
    image: np.ndarray  # H x W x C float32 in [0, 1]
    label: str
    source_id: str


@dataclass
class SplitSet:
    role: str
    examples: list
    class_set: frozenset

    def __post_init__(self):
        labels = {ex.label for ex in self.examples}
        if not labels <= set(self.class_set):
            raise ConfigurationError(
                f"{self.role}: labels {sorted(labels - set(self.class_set))} outside class set"
            )
        ids = [ex.source_id for ex in self.examples]
        if len(ids) != len(set(ids)):
            raise ConfigurationError(f"{self.role}: duplicate source_id")

    def by_class(self):
        out = {c: [] for c in sorted(self.class_set)}
        for ex in self.examples:
            out[ex.label].append(ex)
        return out


@dataclass
class EpisodeSpec:
    ways: int = 5
    shots: int = 5
    queries: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.ways < 1 or self.shots < 1 or self.queries < 1:
            raise ConfigurationError("ways, shots, and queries must be positive")


@dataclass
class Episode:
    support: list
    query: list
    class_order: list
    target_class: str

    def __post_init__(self):
        if self.target_class not in self.class_order:
            raise ConfigurationError("target_class not in class_order")
        s_ids = {ex.source_id for ex in self.support}
        q_ids = {ex.source_id for ex in self.query}
        if s_ids & q_ids:
            raise ConfigurationError("support and query overlap by source_id")

    def support_of(self, label):
        return [ex for ex in self.support if ex.label == label]


def _render_sample(rng, resolution, hue, shape):
    hue_s = (hue + rng.uniform(-0.06, 0.06)) % 1.0
    bg = hsv_to_rgb(np.array([hue_s, rng.uniform(0.45, 0.65), rng.uniform(0.35, 0.65)]))
    img = np.broadcast_to(bg, (resolution, resolution, 3)).copy()

    fg = hsv_to_rgb(
        np.array([(hue_s + 0.5) % 1.0, rng.uniform(0.55, 0.8), rng.uniform(0.5, 0.95)])
    )
    half = rng.uniform(0.14, 0.38) * resolution
    cy = rng.uniform(0.3, 0.7) * resolution
    cx = rng.uniform(0.3, 0.7) * resolution
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    dy, dx = yy - cy, xx - cx

    if shape == "square":
        mask = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    elif shape == "disk":
        mask = dy * dy + dx * dx <= half * half
    elif shape == "cross":
        arm = max(1.0, half * 0.35)
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= half)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= half)
        )
    elif shape == "diamond":
        mask = np.abs(dy) + np.abs(dx) <= half
    elif shape == "triangle":
        mask = (dy >= -half) & (np.abs(dx) <= (dy + half) / 2.0)
    else:  # ring
        r2 = dy * dy + dx * dx
        mask = (r2 <= half * half) & (r2 >= (half * 0.55) ** 2)

    img[mask] = fg
    img += rng.normal(0.0, 0.08, size=img.shape)
    img = 0.1 + 0.8 * np.clip(img, 0.0, 1.0)

    # specular highlights / hard shadows, drawn at full range so plain
    # bright or dark patches also occur naturally
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    if rng.uniform() < 0.3:
        r = rng.uniform(1.5, 3.5)
        sy, sx = rng.uniform(0, resolution, size=2)
        spot = (yy - sy) ** 2 + (xx - sx) ** 2 <= r * r
        img[spot] = rng.uniform(0.88, 1.0)
    if rng.uniform() < 0.15:
        r = rng.uniform(1.5, 3.5)
        sy, sx = rng.uniform(0, resolution, size=2)
        spot = (yy - sy) ** 2 + (xx - sx) ** 2 <= r * r
        img[spot] = rng.uniform(0.0, 0.12)
    return img.astype(np.float32)


def _class_names(num_classes):
    return [f"class{k:03d}" for k in range(num_classes)]


def generate_synthetic_dataset(num_classes, per_class, resolution, seed):
    """Build (auxiliary, support-pool, query-pool) synthetic splits.

    Auxiliary takes the first num_classes - max(5, ceil(num_classes / 2))
    classes; the remaining classes feed the support/query pools, with each
    class's examples split half/half between them (disjoint source_ids).
    """
    if num_classes < 6:
        raise ConfigurationError("num_classes must be >= 6")
    if per_class < 2:
        raise ConfigurationError("per_class must be >= 2")
    if resolution < 2:
        raise ConfigurationError("resolution must be >= 2")

    n_eval = max(5, num_classes - num_classes // 2)
    n_aux = num_classes - n_eval
    names = _class_names(num_classes)

    def make_class(k):
        hue = (k * _GOLDEN) % 1.0
        shape = _SHAPES[k % len(_SHAPES)]
        out = []
        for i in range(per_class):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, k, i])))
            img = _render_sample(rng, resolution, hue, shape)
            out.append(LabeledExample(img, names[k], f"{names[k]}/{i:04d}"))
        return out

    aux_examples = [ex for k in range(n_aux) for ex in make_class(k)]
    support, query = [], []
    for k in range(n_aux, num_classes):
        examples = make_class(k)
        support.extend(examples[: per_class // 2])
        query.extend(examples[per_class // 2 :])

    eval_classes = frozenset(names[n_aux:])
    return (
        SplitSet(ROLE_AUXILIARY, aux_examples, frozenset(names[:n_aux])),
        SplitSet(ROLE_SUPPORT, support, eval_classes),
        SplitSet(ROLE_QUERY, query, eval_classes),
    )


_SPLIT_ALIASES = {
    "auxiliary": "auxiliary",
    "train": "auxiliary",
    "val": "auxiliary",
    "validation": "auxiliary",
    "test": "eval",
    "novel": "eval",
    "eval": "eval",
}


def parse_split_manifest(path):
    """Read `<class_name> <split>` lines; returns {class_name: auxiliary|eval}.

    train/val/validation map to auxiliary; test/novel/eval classes feed the
    support and query pools (even-index files to support, odd to query).
    """
    assignment = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataLoadError(f"{path}:{lineno}: expected '<class_name> <split>'")
            name, split = parts
            if split not in _SPLIT_ALIASES:
                raise DataLoadError(f"{path}:{lineno}: unknown split '{split}' for class '{name}'")
            if name in assignment:
                raise DataLoadError(f"{path}:{lineno}: class '{name}' assigned to two splits")
            assignment[name] = _SPLIT_ALIASES[split]
    if not assignment:
        raise DataLoadError(f"{path}: empty manifest")
    return assignment


def _load_class_images(root, name, resolution):
    class_dir = os.path.join(root, name)
    if not os.path.isdir(class_dir):
        raise DataLoadError(f"missing class folder: {class_dir}")
    files = sorted(f for f in os.listdir(class_dir) if not f.startswith("."))
    if not files:
        raise DataLoadError(f"empty class folder: {class_dir}")
    out = []
    for fname in files:
        path = os.path.join(class_dir, fname)
        try:
            with Image.open(path) as im:
                im = im.convert("RGB").resize((resolution, resolution), Image.LANCZOS)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except Exception as exc:
            raise DataLoadError(f"undecodable image: {path}: {exc}") from exc
        out.append(LabeledExample(arr, name, f"{name}/{fname}"))
    return out


def load_directory_dataset(root_path, split_manifest, resolution=32):
    """Load `<root>/<class_name>/<images>` per the manifest; PNG/PPM via PIL.

    Returns the (auxiliary, support-pool, query-pool) triple; images are
    resized to `resolution` and scaled to [0, 1].
    """
    assignment = parse_split_manifest(split_manifest)
    aux_examples, support, query = [], [], []
    aux_classes, eval_classes = set(), set()
    for name in sorted(assignment):
        examples = _load_class_images(root_path, name, resolution)
        if assignment[name] == "auxiliary":
            aux_classes.add(name)
            aux_examples.extend(examples)
        else:
            eval_classes.add(name)
            support.extend(examples[0::2])
            query.extend(examples[1::2])
    if not eval_classes:
        raise DataLoadError("manifest declares no eval/test classes")
    if not aux_classes:
        raise DataLoadError("manifest declares no auxiliary/train classes")
    return (
        SplitSet(ROLE_AUXILIARY, aux_examples, frozenset(aux_classes)),
        SplitSet(ROLE_SUPPORT, support, frozenset(eval_classes)),
        SplitSet(ROLE_QUERY, query, frozenset(eval_classes)),
    )


def sample_episode(pool_support, pool_query, spec, target_class=None):
    """Sample a C-way K-shot episode with Q queries per class.

    Classes are drawn uniformly from the shared class set, then K support
    and Q query examples per class from the respective pools. The target
    class defaults to the first class after the seeded shuffle.
    """
    if set(pool_support.class_set) != set(pool_query.class_set):
        raise SamplingError("support and query pools must share one class set")
    classes = sorted(pool_support.class_set)
    if spec.ways > len(classes):
        raise SamplingError(f"ways={spec.ways} exceeds {len(classes)} available classes")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFFFFFFFFFF]))
    order = [classes[i] for i in rng.permutation(len(classes))[: spec.ways]]
    if target_class is None:
        target_class = order[0]
    elif target_class not in order:
        raise SamplingError(f"target_class '{target_class}' not among sampled classes")

    sup_by_class = pool_support.by_class()
    qry_by_class = pool_query.by_class()
    support, query = [], []
    for cls in order:
        cands_s, cands_q = sup_by_class[cls], qry_by_class[cls]
        if len(cands_s) < spec.shots:
            raise SamplingError(f"class '{cls}': {len(cands_s)} support examples < shots={spec.shots}")
        if len(cands_q) < spec.queries:
            raise SamplingError(f"class '{cls}': {len(cands_q)} query examples < queries={spec.queries}")
        support.extend(cands_s[i] for i in rng.choice(len(cands_s), spec.shots, replace=False))
        query.extend(cands_q[i] for i in rng.choice(len(cands_q), spec.queries, replace=False))
    return Episode(support, query, order, target_class)
