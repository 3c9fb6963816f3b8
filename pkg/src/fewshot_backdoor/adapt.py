"""Few-shot adaptation paradigms and episode-level ASR/BA evaluation.

Three paradigms adapt a frozen embedding to an episode's support set:

  cosine-head  trains a cosine-similarity classification head with SGD
               (the transfer-learning / fine-tuning family),
  prototype    class prototypes = mean support features, nearest cosine
               prototype wins (metric-learning family),
  inner-loop   copies the embedding, attaches a linear head, and runs a
               few full-batch gradient steps on the support set
               (meta-learning-style fast adaptation).

Prediction ties break toward the lowest class_order index. ASR counts
triggered untargeted-class queries predicted as the target class;
target-class queries are excluded from the denominator.
"""

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .embedding import NORM_EPS, cosine_distance_t
from .errors import ConfigurationError, InputError, TrainingError
from .poison import PoisonedSupportSet
from .trigger import blend

PARADIGM_COSINE = "cosine-head"
PARADIGM_PROTO = "prototype"
PARADIGM_INNER = "inner-loop"
PARADIGMS = (PARADIGM_COSINE, PARADIGM_PROTO, PARADIGM_INNER)


def support_examples(support):
    if isinstance(support, PoisonedSupportSet):
        return support.examples
    return list(support)


class AdaptedClassifier:
    """Base: paradigm name, frozen embedding reference, ordered classes."""

    paradigm = None

    def __init__(self, embedding, class_order):
        self.embedding = embedding
        self.class_order = list(class_order)

    def scores_t(self, images_hwc):
        """(N, H, W, C) tensor -> (N, C) differentiable class scores."""
        raise NotImplementedError

    def scores(self, images):
        with torch.no_grad():
            s = self.scores_t(self.embedding.to_tensor(images))
        return s.numpy()

    def predict(self, images):
        """Argmax class per image; ties -> lowest class_order index."""
        idx = np.argmax(self.scores(images), axis=1)
        return [self.class_order[i] for i in idx]

    def accuracy(self, examples):
        pred = self.predict([ex.image for ex in examples])
        return float(np.mean([p == ex.label for p, ex in zip(pred, examples)]))


class CosineHeadClassifier(AdaptedClassifier):
    paradigm = PARADIGM_COSINE

    def __init__(self, embedding, class_order, weights, scale):
        super().__init__(embedding, class_order)
        self.weights = weights  # (C, D) tensor
        self.scale = scale

    def scores_t(self, images_hwc):
        feats = self.embedding.forward_t(images_hwc)
        f = feats / (feats.norm(dim=1, keepdim=True) + NORM_EPS)
        w = self.weights / (self.weights.norm(dim=1, keepdim=True) + NORM_EPS)
        return self.scale * f @ w.t()


class PrototypeClassifier(AdaptedClassifier):
    paradigm = PARADIGM_PROTO

    def __init__(self, embedding, class_order, prototypes):
        super().__init__(embedding, class_order)
        self.prototypes = prototypes  # (C, D) tensor

    def scores_t(self, images_hwc):
        feats = self.embedding.forward_t(images_hwc)
        d = cosine_distance_t(feats.unsqueeze(1), self.prototypes.unsqueeze(0))
        return -d


class InnerLoopClassifier(AdaptedClassifier):
    paradigm = PARADIGM_INNER

    def __init__(self, embedding, class_order, module, head):
        super().__init__(embedding, class_order)
        self.module = module  # adapted copy; the original stays frozen
        self.head = head

    def scores_t(self, images_hwc):
        x = images_hwc.permute(0, 3, 1, 2)
        return self.head(self.module(x))


@dataclass
class HeadTrainConfig:
    iterations: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    scale: float = 10.0
    seed: int = 0


def _support_tensors(embedding, support, class_order):
    examples = support_examples(support)
    index = {c: i for i, c in enumerate(class_order)}
    try:
        y = np.asarray([index[ex.label] for ex in examples], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"support label {exc} not in class_order") from exc
    x = embedding.to_tensor([ex.image for ex in examples])
    return examples, x, torch.as_tensor(y)


def adapt_cosine_head(embedding, support, class_order, cfg=None):
    """Train a cosine-similarity head on frozen support features."""
    cfg = cfg or HeadTrainConfig()
    examples, x, y = _support_tensors(embedding, support, class_order)
    with torch.no_grad():
        feats = embedding.forward_t(x)

    g = torch.Generator().manual_seed((cfg.seed * 40503 + 7) & 0x7FFFFFFFFFFFFFFF)
    w = torch.empty(len(class_order), embedding.feature_dim, dtype=embedding.torch_dtype)
    w.uniform_(-0.1, 0.1, generator=g)
    w.requires_grad_(True)

    opt = torch.optim.SGD([w], lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    for it in range(cfg.iterations):
        opt.zero_grad()
        f = feats / (feats.norm(dim=1, keepdim=True) + NORM_EPS)
        wn = w / (w.norm(dim=1, keepdim=True) + NORM_EPS)
        loss = F.cross_entropy(cfg.scale * f @ wn.t(), y)
        if not torch.isfinite(loss):
            raise TrainingError(f"cosine-head training diverged at iteration {it}")
        loss.backward()
        opt.step()
    return CosineHeadClassifier(embedding, class_order, w.detach(), cfg.scale)


def adapt_prototypes(embedding, support, class_order):
    """Class prototypes = mean support features; nearest cosine prototype."""
    examples = support_examples(support)
    by_class = {c: [] for c in class_order}
    for ex in examples:
        if ex.label not in by_class:
            raise InputError(f"support label '{ex.label}' not in class_order")
        by_class[ex.label].append(ex.image)
    empty = [c for c in class_order if not by_class[c]]
    if empty:
        raise InputError(f"class '{empty[0]}' has no support examples")
    protos = []
    for c in class_order:
        feats = embedding.embed_batch(by_class[c])
        protos.append(feats.mean(axis=0))
    protos_t = torch.as_tensor(np.stack(protos), dtype=embedding.torch_dtype)
    return PrototypeClassifier(embedding, class_order, protos_t)


def adapt_inner_loop(embedding, support, class_order, steps=10, inner_lr=0.01, seed=0):
    """Copy the embedding, attach a linear head, and take `steps` full-batch
    gradient steps on the support cross-entropy. The original embedding's
    parameters are untouched."""
    if steps < 0:
        raise ConfigurationError("steps must be >= 0")
    examples, x, y = _support_tensors(embedding, support, class_order)

    module = copy.deepcopy(embedding.module)
    for p in module.parameters():
        p.requires_grad_(True)
    head = torch.nn.Linear(embedding.feature_dim, len(class_order), dtype=embedding.torch_dtype)
    g = torch.Generator().manual_seed((seed * 69069 + 3) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        bound = 1.0 / max(1.0, embedding.feature_dim) ** 0.5
        head.weight.uniform_(-bound, bound, generator=g)
        head.bias.zero_()

    params = list(module.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=inner_lr)
    x_chw = x.permute(0, 3, 1, 2)
    for it in range(steps):
        opt.zero_grad()
        loss = F.cross_entropy(head(module(x_chw)), y)
        if not torch.isfinite(loss):
            raise TrainingError(f"inner-loop adaptation diverged at step {it}")
        loss.backward()
        opt.step()
    for p in params:
        p.requires_grad_(False)
    return InnerLoopClassifier(embedding, class_order, module, head)


ADAPTERS = {
    PARADIGM_COSINE: adapt_cosine_head,
    PARADIGM_PROTO: adapt_prototypes,
    PARADIGM_INNER: adapt_inner_loop,
}


@dataclass
class EpisodeResult:
    asr: float
    ba: float
    n_queries: int
    n_asr_queries: int


def evaluate(classifier, episode, trig, apply_trigger=None):
    """BA on clean queries; ASR on triggered untargeted-class queries.

    `apply_trigger(image, index)` overrides the default patch blend (used
    for blended comparators and pre-processing probes).
    """
    ba = classifier.accuracy(episode.query)
    untargeted = [ex for ex in episode.query if ex.label != episode.target_class]
    if not untargeted:
        return EpisodeResult(0.0, ba, len(episode.query), 0)
    if apply_trigger is None:
        triggered = [blend(ex.image, trig) for ex in untargeted]
    else:
        triggered = [apply_trigger(ex.image, i) for i, ex in enumerate(untargeted)]
    pred = classifier.predict(triggered)
    asr = float(np.mean([p == episode.target_class for p in pred]))
    return EpisodeResult(asr, ba, len(episode.query), len(untargeted))
