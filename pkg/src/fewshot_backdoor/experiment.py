"""End-to-end episodic experiments: sample -> trigger -> perturb -> poison
-> adapt -> evaluate, aggregated over episodes and repeats.

Episode seeds derive from (base seed, repeat, index) via SeedSequence, so
any episode can be recomputed in isolation and worker parallelism cannot
change results. Aggregate ASR/BA are arithmetic means of per-episode rows.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import adapt, perturb, poison, trigger
from .dataset import EpisodeSpec, sample_episode
from .errors import ConfigurationError
from .perturb import PerturbConfig
from .poison import ComparatorAttackConfig
from .trigger import TriggerOptConfig

METHOD_HIDDEN = "hidden"
METHOD_BADNET = "badnet"
METHOD_BLENDED = "blended"
METHOD_CLEAN = "clean"
METHODS = (METHOD_HIDDEN, METHOD_BADNET, METHOD_BLENDED, METHOD_CLEAN)


@dataclass
class PipelineConfig:
    """One episode's attack + adaptation recipe."""

    method: str = METHOD_HIDDEN
    scope: str = poison.SCOPE_ALL
    paradigm: str = adapt.PARADIGM_COSINE
    trigger_size: int = 6
    trigger_placement: tuple = None  # None -> bottom-right
    trigger_opt: TriggerOptConfig = field(default_factory=TriggerOptConfig)
    trigger_scope: str = "per-episode"  # or "global"
    trigger_source: str = "support"  # or "pool": attacker-held random set
    trigger_pool_size: int = 25
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    comparator_strength: float = 1.0
    poison_count_per_class: int = 1
    head: adapt.HeadTrainConfig = field(default_factory=adapt.HeadTrainConfig)
    inner_steps: int = 10
    inner_lr: float = 0.01

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown attack method '{self.method}'")
        if self.scope not in poison.SCOPES:
            raise ConfigurationError(f"unknown scope '{self.scope}'")
        if self.paradigm not in adapt.PARADIGMS:
            raise ConfigurationError(f"unknown paradigm '{self.paradigm}'")
        if self.trigger_scope not in ("per-episode", "global"):
            raise ConfigurationError(f"unknown trigger_scope '{self.trigger_scope}'")
        if self.trigger_source not in ("support", "pool"):
            raise ConfigurationError(f"unknown trigger_source '{self.trigger_source}'")


def episode_seed(base_seed, repeat, index):
    return int(np.random.SeedSequence([base_seed & 0xFFFFFFFFFFFFFFFF, repeat, index]).generate_state(1)[0])


def _adapt_support(model, support, episode, cfg, seed):
    if cfg.paradigm == adapt.PARADIGM_COSINE:
        head_cfg = replace(cfg.head, seed=seed)
        return adapt.adapt_cosine_head(model, support, episode.class_order, head_cfg)
    if cfg.paradigm == adapt.PARADIGM_PROTO:
        return adapt.adapt_prototypes(model, support, episode.class_order)
    return adapt.adapt_inner_loop(
        model, support, episode.class_order, cfg.inner_steps, cfg.inner_lr, seed
    )


@dataclass
class SingleEpisodeResult:
    episode: object
    trig: object
    records: list
    poisoned: object
    classifier: object
    asr: float
    ba: float


def run_single_episode(
    model, pool_support, pool_query, spec, cfg, global_trigger=None, attacker_images=None
):
    """Full pipeline on one episode; everything derives from spec.seed.

    hidden/clean methods optimize the embedding-deviation trigger; the
    dirty-label comparators use a fixed classic white patch of the same
    geometry (no optimization), as those baselines define it.
    """
    episode = sample_episode(pool_support, pool_query, spec)
    image_shape = episode.support[0].image.shape

    if cfg.method in (METHOD_BADNET, METHOD_BLENDED):
        trig = poison.classic_patch(image_shape, cfg.trigger_size, cfg.trigger_placement)
    elif cfg.trigger_scope == "global":
        if global_trigger is None:
            raise ConfigurationError("trigger_scope=global requires a global trigger")
        trig = global_trigger
    else:
        if cfg.trigger_source == "pool":
            if attacker_images is None:
                attacker_images = attacker_image_set(pool_support, cfg.trigger_pool_size, spec.seed)
            images = attacker_images
        else:
            images = [ex.image for ex in episode.support]
        t_cfg = replace(cfg.trigger_opt, seed=spec.seed)
        init = trigger.initial_trigger(image_shape, cfg.trigger_size, t_cfg, cfg.trigger_placement)
        trig = trigger.optimize_trigger(model, images, init, t_cfg).trigger

    records = []
    if cfg.method == METHOD_CLEAN:
        poisoned = None
        support = episode.support
    elif cfg.method == METHOD_HIDDEN:
        p_cfg = replace(cfg.perturb, seed=spec.seed)
        records = perturb.perturb_episode(model, episode, trig, p_cfg)
        covered = poison.scope_source_ids(episode, cfg.scope)
        poisoned = poison.build_hidden_poisoned_set(
            episode, [r for r in records if r.source_id in covered], cfg.scope
        )
        support = poisoned
    else:
        comp = ComparatorAttackConfig(
            method="badnet-patch" if cfg.method == METHOD_BADNET else "blended",
            patch_or_blend_strength=cfg.comparator_strength,
            dirty_label_target=episode.target_class,
            poison_count_per_class=cfg.poison_count_per_class,
        )
        poisoned = poison.build_comparator_set(episode, comp, trig)
        support = poisoned

    classifier = _adapt_support(model, support, episode, cfg, spec.seed)

    apply_trigger = None
    if cfg.method == METHOD_BLENDED:
        pattern = poison.full_blend_pattern(trig)
        strength = cfg.comparator_strength
        apply_trigger = lambda img, i: poison.alpha_blend(img, pattern, strength)
    result = adapt.evaluate(classifier, episode, trig, apply_trigger)
    return SingleEpisodeResult(
        episode, trig, records, poisoned, classifier, result.asr, result.ba
    )


def attacker_image_set(pool_support, count, seed):
    """Attacker-held random image set drawn from the support pool."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xA77]))
    idx = rng.choice(len(pool_support.examples), min(count, len(pool_support.examples)), replace=False)
    return [pool_support.examples[i].image for i in idx]


@dataclass
class EvalReport:
    asr: float
    ba: float
    asr_std: float
    ba_std: float
    n_episodes: int
    repeats: int
    per_episode: list  # rows: dict(repeat, index, seed, asr, ba)
    config_fingerprint: str = ""

    def to_json(self):
        return json.dumps(
            {
                "config_fingerprint": self.config_fingerprint,
                "n_episodes": self.n_episodes,
                "repeats": self.repeats,
                "asr": self.asr,
                "ba": self.ba,
                "asr_std": self.asr_std,
                "ba_std": self.ba_std,
                "per_episode": self.per_episode,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            d["asr"], d["ba"], d["asr_std"], d["ba_std"], d["n_episodes"],
            d["repeats"], d["per_episode"], d.get("config_fingerprint", ""),
        )

    def to_csv(self):
        lines = [f"# config={self.config_fingerprint}", "repeat,index,seed,asr,ba"]
        for row in self.per_episode:
            lines.append(
                f"{row['repeat']},{row['index']},{row['seed']},{row['asr']!r},{row['ba']!r}"
            )
        return "\n".join(lines) + "\n"


def aggregate_report(rows, repeats, fingerprint=""):
    asrs = np.asarray([r["asr"] for r in rows], dtype=np.float64)
    bas = np.asarray([r["ba"] for r in rows], dtype=np.float64)
    return EvalReport(
        asr=float(asrs.mean()),
        ba=float(bas.mean()),
        asr_std=float(asrs.std()),
        ba_std=float(bas.std()),
        n_episodes=len(rows) // max(1, repeats),
        repeats=repeats,
        per_episode=rows,
        config_fingerprint=fingerprint,
    )


_WORKER_STATE = {}


def _worker_init(model, pool_support, pool_query, cfg, global_trigger):
    torch.set_num_threads(1)
    _WORKER_STATE["args"] = (model, pool_support, pool_query, cfg, global_trigger)


def _worker_run(task):
    repeat, index, spec = task
    model, pool_support, pool_query, cfg, global_trigger = _WORKER_STATE["args"]
    r = run_single_episode(model, pool_support, pool_query, spec, cfg, global_trigger)
    return {"repeat": repeat, "index": index, "seed": spec.seed, "asr": r.asr, "ba": r.ba}


def run_experiment(
    model,
    pool_support,
    pool_query,
    spec,
    cfg,
    n_episodes,
    repeats=1,
    base_seed=0,
    workers=1,
    global_trigger=None,
    fingerprint="",
    on_episode=None,
):
    """Aggregate ASR/BA over n_episodes x repeats independent episodes.

    `on_episode(row, result)` observes each SingleEpisodeResult when given
    (workers=1 only); rows are reduced in a fixed order either way.
    """
    if n_episodes < 1 or repeats < 1:
        raise ConfigurationError("n_episodes and repeats must be >= 1")
    tasks = [
        (rep, i, replace(spec, seed=episode_seed(base_seed, rep, i)))
        for rep in range(repeats)
        for i in range(n_episodes)
    ]
    rows = []
    if workers > 1 and on_episode is None:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_worker_init,
            initargs=(model, pool_support, pool_query, cfg, global_trigger),
        ) as pool:
            rows = list(pool.map(_worker_run, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        for repeat, index, espec in tasks:
            r = run_single_episode(model, pool_support, pool_query, espec, cfg, global_trigger)
            row = {"repeat": repeat, "index": index, "seed": espec.seed, "asr": r.asr, "ba": r.ba}
            if on_episode is not None:
                on_episode(row, r)
            rows.append(row)
    return aggregate_report(rows, repeats, fingerprint)
