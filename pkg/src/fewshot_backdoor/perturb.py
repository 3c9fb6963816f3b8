"""Attractive and repulsive hidden-trigger perturbations.

Both kinds move a support image's feature relative to its trigger-blended
reference feature under an L-infinity budget, via iterated sign-gradient
steps with projection (step -> epsilon-ball projection -> pixel clip):

  attractive (target class):  minimize d(f(x + d), f(blend(x))) +
                              lambda1 * d(f(x + d), f(x))
  repulsive (other classes):  maximize d(f(x + d), f(blend(x))) -
                              lambda2 * d(f(x + d), f(x))

The ensemble variant averages the per-model objective over several
embeddings (one trigger per model). Perturbations start at zero and the
best-objective iterate per image is returned.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .embedding import cosine_distance_t
from .errors import ArtifactError, ConfigurationError, NumericError
from .trigger import blend

BUNDLE_MAGIC = "FSBK-PERTURB"
BUNDLE_VERSION = 1

KIND_ATTRACTIVE = "attractive"
KIND_REPULSIVE = "repulsive"


@dataclass
class PerturbConfig:
    epsilon: float = 8.0 / 255.0
    step_size: float = 2.0 / 255.0
    iterations: int = 80
    lambda1: float = 1.5
    lambda2: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1/lambda2 must be >= 0")


@dataclass
class PerturbationRecord:
    source_id: str
    delta: np.ndarray  # same shape as the image, |delta|_inf <= epsilon
    kind: str
    final_losses: tuple  # (primary_term, regularizer_term) at the best iterate
    warning: bool = False


def poisoned_reference_feature(model, image, trig):
    """Feature of the trigger-blended image: embed(model, blend(image, trig))."""
    return model.embed(blend(image, trig))


def _safe_eps(epsilon, np_dtype):
    """Largest value representable in np_dtype that does not exceed epsilon.

    Direct casting can round up (float32(8/255) > 8/255), which would let
    projected deltas violate the exact L-infinity bound.
    """
    cast = np.asarray(epsilon, dtype=np_dtype)
    if float(cast) > epsilon:
        cast = np.nextafter(cast, np_dtype(0.0))
    return float(cast)


def _optimize_batch(models, images, triggers, kind, cfg, source_ids=None):
    """Shared PGD loop; per-image objectives, mean over models.

    Returns one PerturbationRecord per image. Batching changes nothing
    semantically: objectives and best-iterate tracking are per image.
    """
    if kind not in (KIND_ATTRACTIVE, KIND_REPULSIVE):
        raise ConfigurationError(f"unknown perturbation kind '{kind}'")
    if len(models) != len(triggers):
        raise ConfigurationError(
            f"{len(models)} models vs {len(triggers)} triggers: need one trigger per model"
        )
    if source_ids is None:
        source_ids = [""] * len(images)

    base = models[0]
    x = base.to_tensor(images)
    n = x.shape[0]

    clean_feats, ref_feats = [], []
    with torch.no_grad():
        for model, trig in zip(models, triggers):
            z_clean = model.forward_t(x)
            z_ref = model.forward_t(model.to_tensor([blend(im, trig) for im in images]))
            for name, z in (("clean", z_clean), ("reference", z_ref)):
                zero = torch.nonzero(z.norm(dim=1) == 0)
                if len(zero):
                    sid = source_ids[int(zero[0])] or f"index {int(zero[0])}"
                    raise NumericError(f"zero-norm {name} feature for image {sid}")
            clean_feats.append(z_clean)
            ref_feats.append(z_ref)

    lam = cfg.lambda1 if kind == KIND_ATTRACTIVE else cfg.lambda2
    sign = 1.0 if kind == KIND_ATTRACTIVE else -1.0  # minimize sign * objective

    def per_image_terms(delta):
        x_h = x + delta
        primary = torch.zeros(n, dtype=x.dtype)
        reg = torch.zeros(n, dtype=x.dtype)
        for model, z_ref, z_clean in zip(models, ref_feats, clean_feats):
            z_h = model.forward_t(x_h)
            primary = primary + cosine_distance_t(z_h, z_ref)
            reg = reg + cosine_distance_t(z_h, z_clean)
        k = float(len(models))
        return primary / k, reg / k

    def objectives(primary, reg):
        if kind == KIND_ATTRACTIVE:
            return primary + lam * reg  # lower is better
        return primary - lam * reg  # higher is better

    eps = _safe_eps(cfg.epsilon, np.float64 if x.dtype == torch.float64 else np.float32)
    delta = torch.zeros_like(x)
    best_obj = torch.full((n,), np.inf if kind == KIND_ATTRACTIVE else -np.inf, dtype=x.dtype)
    best_delta = delta.clone()
    best_primary = torch.zeros(n, dtype=x.dtype)
    best_reg = torch.zeros(n, dtype=x.dtype)

    for it in range(cfg.iterations + 1):
        need_grad = it < cfg.iterations and eps > 0
        d = delta.clone().requires_grad_(need_grad)
        primary, reg = per_image_terms(d)
        obj = objectives(primary, reg)
        if not torch.isfinite(obj).all():
            raise NumericError("non-finite perturbation objective")

        with torch.no_grad():
            improved = obj < best_obj if kind == KIND_ATTRACTIVE else obj > best_obj
            best_obj = torch.where(improved, obj, best_obj)
            best_delta = torch.where(improved.view(-1, 1, 1, 1), d, best_delta)
            best_primary = torch.where(improved, primary, best_primary)
            best_reg = torch.where(improved, reg, best_reg)

        if not need_grad:
            break
        # sign * obj is minimized for both kinds (attractive: obj itself,
        # repulsive: -obj, i.e. ascent on the repulsive objective)
        (grad,) = torch.autograd.grad((sign * obj).sum(), d)
        with torch.no_grad():
            delta = delta - cfg.step_size * torch.sign(grad)
            delta = torch.clamp(delta, -eps, eps)
            delta = torch.clamp(x + delta, 0.0, 1.0) - x

    records = []
    with torch.no_grad():
        d_clean_ref = cosine_distance_t(clean_feats[0], ref_feats[0])
        for i in range(n):
            primary_i = float(best_primary[i])
            if kind == KIND_ATTRACTIVE:
                warning = primary_i > float(d_clean_ref[i]) + 1e-9
            else:
                warning = primary_i < float(d_clean_ref[i]) - 1e-9
            records.append(
                PerturbationRecord(
                    source_id=source_ids[i],
                    delta=best_delta[i].numpy(),
                    kind=kind,
                    final_losses=(primary_i, float(best_reg[i])),
                    warning=bool(warning),
                )
            )
    return records


def optimize_attractive(model, image_t, trig, cfg, source_id=""):
    """Pull a target-class image's feature toward its trigger reference."""
    return _optimize_batch([model], [image_t], [trig], KIND_ATTRACTIVE, cfg, [source_id])[0]


def optimize_repulsive(model, image_u, trig, cfg, source_id=""):
    """Push an untargeted-class image's feature away from its reference."""
    return _optimize_batch([model], [image_u], [trig], KIND_REPULSIVE, cfg, [source_id])[0]


def optimize_ensemble(models, image, trig_per_model, kind, cfg, source_id=""):
    """Optimize the mean of per-model objectives across >= 2 embeddings."""
    if len(models) < 2:
        raise ConfigurationError("ensemble optimization needs at least 2 models")
    return _optimize_batch(models, [image], trig_per_model, kind, cfg, [source_id])[0]


def perturb_episode(model, episode, trig, cfg):
    """Records for every support image: attractive for the target class,
    repulsive for the rest, batched per kind. Order follows the support."""
    target = [ex for ex in episode.support if ex.label == episode.target_class]
    others = [ex for ex in episode.support if ex.label != episode.target_class]
    by_id = {}
    if target:
        recs = _optimize_batch(
            [model], [ex.image for ex in target], [trig], KIND_ATTRACTIVE, cfg,
            [ex.source_id for ex in target],
        )
        by_id.update({r.source_id: r for r in recs})
    if others:
        recs = _optimize_batch(
            [model], [ex.image for ex in others], [trig], KIND_REPULSIVE, cfg,
            [ex.source_id for ex in others],
        )
        by_id.update({r.source_id: r for r in recs})
    return [by_id[ex.source_id] for ex in episode.support]


# -- bundle file -------------------------------------------------------------


def save_records(records, cfg, path, extra=None):
    """Header (epsilon, lambdas, iterations, seed, kind counts) + one line
    per record + concatenated float32 delta payloads. Round-trips exactly."""
    n_att = sum(1 for r in records if r.kind == KIND_ATTRACTIVE)
    lines = [
        f"{BUNDLE_MAGIC} {BUNDLE_VERSION}",
        f"epsilon {cfg.epsilon!r}",
        f"lambda1 {cfg.lambda1!r}",
        f"lambda2 {cfg.lambda2!r}",
        f"iterations {cfg.iterations}",
        f"seed {cfg.seed}",
        f"attractive {n_att}",
        f"repulsive {len(records) - n_att}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    payloads = []
    for r in records:
        d = np.asarray(r.delta, dtype=np.float32)
        shape = " ".join(str(s) for s in d.shape)
        p0, p1 = r.final_losses
        lines.append(
            f"record {r.kind} {int(r.warning)} {p0!r} {p1!r} {shape} {r.source_id}"
        )
        payloads.append(d.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n---\n").encode("utf-8"))
        for p in payloads:
            fh.write(p)


def load_records(path):
    from .embedding import _read_header

    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ArtifactError(f"cannot read perturbation bundle {path}: {exc}") from exc
    with fh:
        version, fields, order = _read_header(fh, BUNDLE_MAGIC)
        if version != BUNDLE_VERSION:
            raise ArtifactError(f"unsupported bundle version {version}")
        cfg = PerturbConfig(
            epsilon=float(fields["epsilon"]),
            iterations=int(fields["iterations"]),
            lambda1=float(fields["lambda1"]),
            lambda2=float(fields["lambda2"]),
            seed=int(fields["seed"]),
        )
        records = []
        metas = [v for k, v in order if k == "record"]
        for meta in metas:
            kind, warn, p0, p1, h, w, c, sid = meta.split(" ", 7)
            shape = (int(h), int(w), int(c))
            count = shape[0] * shape[1] * shape[2]
            raw = fh.read(count * 4)
            delta = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
            records.append(
                PerturbationRecord(sid, delta, kind, (float(p0), float(p1)), bool(int(warn)))
            )
    return records, cfg, fields
