"""Defense probes against the hidden backdoor.

Three probes: continued clean fine-tuning (original or new support),
photometric pre-processing of incoming queries (brightness / contrast /
saturation / hue jitter), and per-class trigger reverse-engineering with a
MAD-based anomaly index (flagged above 2).
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ._color import hsv_to_rgb, rgb_to_hsv
from .adapt import (
    PARADIGM_COSINE,
    PARADIGM_INNER,
    PARADIGM_PROTO,
    CosineHeadClassifier,
    InnerLoopClassifier,
    adapt_prototypes,
    evaluate,
)
from .embedding import NORM_EPS
from .errors import ConfigurationError, DefenseError, InputError, UnsupportedParadigmError
from .trigger import blend

PREPROCESS_KINDS = ("brightness", "contrast", "saturation", "hue")

MAD_CONSISTENCY = 1.4826


# -- clean fine-tuning -------------------------------------------------------


def finetune_defense(classifier, clean_support, episode, trig, epochs, steps_per_epoch=10, lr=None):
    """Continue training on clean support data only; returns the defended
    classifier plus a per-epoch (epoch, asr, ba) trace starting at epoch 0.

    Works for the cosine-head and inner-loop paradigms. Prototypes are not
    trained; use `recompute_prototypes` instead.
    """
    if classifier.paradigm == PARADIGM_PROTO:
        raise UnsupportedParadigmError(
            "prototype classifiers are recomputed, not fine-tuned; "
            "use recompute_prototypes(classifier, clean_support)"
        )
    if classifier.paradigm not in (PARADIGM_COSINE, PARADIGM_INNER):
        raise UnsupportedParadigmError(f"unsupported paradigm '{classifier.paradigm}'")

    index = {c: i for i, c in enumerate(classifier.class_order)}
    y = torch.as_tensor(np.asarray([index[ex.label] for ex in clean_support], dtype=np.int64))
    x = classifier.embedding.to_tensor([ex.image for ex in clean_support])

    if classifier.paradigm == PARADIGM_COSINE:
        defended = CosineHeadClassifier(
            classifier.embedding, classifier.class_order,
            classifier.weights.clone(), classifier.scale,
        )
        w = defended.weights.requires_grad_(True)
        opt = torch.optim.SGD([w], lr=lr if lr is not None else 0.01, momentum=0.9)
        with torch.no_grad():
            feats = classifier.embedding.forward_t(x)

        def step():
            opt.zero_grad()
            f = feats / (feats.norm(dim=1, keepdim=True) + NORM_EPS)
            wn = w / (w.norm(dim=1, keepdim=True) + NORM_EPS)
            loss = F.cross_entropy(defended.scale * f @ wn.t(), y)
            loss.backward()
            opt.step()

    else:
        import copy

        module = copy.deepcopy(classifier.module)
        head = copy.deepcopy(classifier.head)
        for p in list(module.parameters()) + list(head.parameters()):
            p.requires_grad_(True)
        defended = InnerLoopClassifier(
            classifier.embedding, classifier.class_order, module, head
        )
        opt = torch.optim.SGD(
            list(module.parameters()) + list(head.parameters()),
            lr=lr if lr is not None else 0.01,
        )
        x_chw = x.permute(0, 3, 1, 2)

        def step():
            opt.zero_grad()
            loss = F.cross_entropy(head(module(x_chw)), y)
            loss.backward()
            opt.step()

    r = evaluate(defended, episode, trig)
    trace = [(0, r.asr, r.ba)]
    for epoch in range(1, epochs + 1):
        for _ in range(steps_per_epoch):
            step()
        r = evaluate(defended, episode, trig)
        trace.append((epoch, r.asr, r.ba))
    if defended.paradigm == PARADIGM_COSINE:
        defended.weights = defended.weights.detach()
    else:
        for p in list(defended.module.parameters()) + list(defended.head.parameters()):
            p.requires_grad_(False)
    return defended, trace


def recompute_prototypes(classifier, clean_support):
    """Prototype-paradigm analogue of fine-tuning: rebuild prototypes from
    clean support examples."""
    return adapt_prototypes(classifier.embedding, clean_support, classifier.class_order)


# -- photometric pre-processing ----------------------------------------------


@dataclass
class PreprocessSpec:
    kind: str
    budget: float

    def __post_init__(self):
        if self.kind not in PREPROCESS_KINDS:
            raise ConfigurationError(f"unknown pre-processing kind '{self.kind}'")
        if not 0.0 <= self.budget <= 0.5:
            raise ConfigurationError("budget must lie in [0, 0.5]")


_LUMA = np.array([0.299, 0.587, 0.114])


def apply_jitter(image, kind, amount):
    """Deterministic core transform.

    brightness/contrast/saturation take a multiplicative factor (1.0 is
    identity); hue takes a rotation in half-turns (0.0 is identity).
    Computed in float64, returned in the input dtype, clipped to [0, 1].
    """
    arr = np.asarray(image)
    if kind == "brightness":
        if amount == 1.0:
            return arr.copy()
        out = arr.astype(np.float64) * amount
    elif kind == "contrast":
        if amount == 1.0:
            return arr.copy()
        x = arr.astype(np.float64)
        mean = float((x @ _LUMA).mean())
        out = (x - mean) * amount + mean
    elif kind == "saturation":
        if amount == 1.0:
            return arr.copy()
        x = arr.astype(np.float64)
        luma = (x @ _LUMA)[..., None]
        out = luma + (x - luma) * amount
    elif kind == "hue":
        if amount == 0.0:
            return arr.copy()
        hsv = rgb_to_hsv(arr.astype(np.float64))
        hsv[..., 0] = np.mod(hsv[..., 0] + amount * 0.5, 1.0)
        out = hsv_to_rgb(hsv)
    else:
        raise ConfigurationError(f"unknown pre-processing kind '{kind}'")
    return np.clip(out, 0.0, 1.0).astype(arr.dtype)


def apply_preprocess(image, spec, seed):
    """Seeded random jitter: factor ~ U[1 - budget, 1 + budget] for
    brightness/contrast/saturation, hue rotation ~ U[-budget, +budget]
    half-turns. budget = 0 is the exact identity."""
    if spec.budget == 0.0:
        return np.asarray(image).copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0x9E3]))
    if spec.kind == "hue":
        amount = rng.uniform(-spec.budget, spec.budget)
    else:
        amount = rng.uniform(1.0 - spec.budget, 1.0 + spec.budget)
    return apply_jitter(image, spec.kind, amount)


def preprocess_probe(classifier, episode, trig, kind, budgets, seed=0):
    """ASR/BA with the transform applied to every incoming query (after
    trigger blending for the ASR arm). One row per budget."""
    rows = []
    for bi, budget in enumerate(budgets):
        spec = PreprocessSpec(kind, budget)

        def apply_trigger(image, i, _spec=spec, _bi=bi):
            return apply_preprocess(blend(image, trig), _spec, seed * 1000003 + _bi * 101 + i)

        ba_images = [
            apply_preprocess(ex.image, spec, seed * 1000003 + bi * 101 + 7919 + i)
            for i, ex in enumerate(episode.query)
        ]
        pred = classifier.predict(ba_images)
        ba = float(np.mean([p == ex.label for p, ex in zip(pred, episode.query)]))
        r = evaluate(classifier, episode, trig, apply_trigger)
        rows.append({"kind": kind, "budget": budget, "asr": r.asr, "ba": ba})
    return rows


# -- trigger reverse-engineering ---------------------------------------------


@dataclass
class CleanseConfig:
    steps: int = 100
    lr: float = 0.1
    gamma: float = 0.01  # mask-sparsity weight, fixed (no dynamic schedule)
    seed: int = 0


@dataclass
class AnomalyReport:
    per_class_norms: dict
    per_class_index: dict
    anomaly_index: float
    flagged: bool

    def to_json_dict(self):
        return {
            "per_class_norms": self.per_class_norms,
            "per_class_index": self.per_class_index,
            "anomaly_index": self.anomaly_index,
            "flagged": self.flagged,
        }


def anomaly_index_from_norms(norms):
    """MAD-normalized deviation of the most deviant per-class norm.

    index_c = |norm_c - median| / (1.4826 * MAD); the report's index is the
    maximum over classes. All-equal norms give index 0.
    """
    values = np.asarray(list(norms.values()), dtype=np.float64)
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    if mad == 0.0:
        if np.all(values == med):
            per = {c: 0.0 for c in norms}
            return per, 0.0
        per = {c: (0.0 if v == med else float("inf")) for c, v in norms.items()}
        return per, float("inf")
    per = {c: abs(v - med) / (MAD_CONSISTENCY * mad) for c, v in norms.items()}
    return per, max(per.values())


def _reverse_engineer(classifier, x, target_idx, cfg):
    """Optimize a soft mask + pattern steering every probe image to the
    target class; returns the final mask L1 norm."""
    h, w, c = x.shape[1], x.shape[2], x.shape[3]
    dtype = x.dtype
    mask_logit = torch.full((h, w, 1), -3.0, dtype=dtype, requires_grad=True)
    pattern_logit = torch.zeros((h, w, c), dtype=dtype, requires_grad=True)
    opt = torch.optim.Adam([mask_logit, pattern_logit], lr=cfg.lr)
    y = torch.full((x.shape[0],), target_idx, dtype=torch.int64)
    for _ in range(cfg.steps):
        opt.zero_grad()
        m = torch.sigmoid(mask_logit)
        p = torch.sigmoid(pattern_logit)
        scores = classifier.scores_t(x * (1.0 - m) + m * p)
        loss = F.cross_entropy(scores, y) + cfg.gamma * m.abs().sum()
        if not torch.isfinite(loss):
            raise DefenseError(f"reverse-engineering diverged for class index {target_idx}")
        loss.backward()
        opt.step()
    with torch.no_grad():
        return float(torch.sigmoid(mask_logit).abs().sum())


def neural_cleanse(classifier, probe_images, cfg=None):
    """Per-class reverse-engineered mask norms -> MAD anomaly index.

    Flags the classifier when the index exceeds 2.
    """
    cfg = cfg or CleanseConfig()
    if len(classifier.class_order) < 3:
        raise InputError("anomaly detection needs >= 3 classes for a MAD spread")
    if not probe_images:
        raise InputError("neural_cleanse needs probe images")
    x = classifier.embedding.to_tensor(probe_images)
    norms = {}
    try:
        for idx, cls in enumerate(classifier.class_order):
            norms[cls] = _reverse_engineer(classifier, x, idx, cfg)
    except DefenseError as exc:
        raise DefenseError(str(exc), partial=dict(norms)) from exc
    per_class, index = anomaly_index_from_norms(norms)
    return AnomalyReport(norms, per_class, index, bool(index > 2.0))
