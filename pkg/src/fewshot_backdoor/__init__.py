"""Clean-label backdoor attacks on few-shot image classifiers.

Pipeline: pre-train an embedding on auxiliary classes, optimize a patch
trigger that maximally deviates features, hide it by perturbing the
support set (attractive toward / repulsive away from the trigger feature),
adapt a few-shot classifier on the poisoned support, and measure attack
success rate and benign accuracy over episodes.
"""

__version__ = "0.1.0"

from .dataset import (
    Episode,
    EpisodeSpec,
    LabeledExample,
    SplitSet,
    generate_synthetic_dataset,
    load_directory_dataset,
    sample_episode,
)
from .embedding import (
    EmbeddingModel,
    PretrainConfig,
    cosine_distance,
    embed,
    export_features,
    grad_wrt_input,
    load_checkpoint,
    pretrain_embedding,
    save_checkpoint,
)
from .trigger import (
    TriggerOptConfig,
    TriggerSpec,
    blend,
    initial_trigger,
    load_trigger,
    optimize_trigger,
    save_trigger,
)
from .perturb import (
    PerturbConfig,
    PerturbationRecord,
    optimize_attractive,
    optimize_ensemble,
    optimize_repulsive,
    perturb_episode,
    poisoned_reference_feature,
)
from .poison import (
    ComparatorAttackConfig,
    PoisonedSupportSet,
    build_comparator_set,
    build_hidden_poisoned_set,
    diff_report,
)
from .adapt import (
    AdaptedClassifier,
    HeadTrainConfig,
    adapt_cosine_head,
    adapt_inner_loop,
    adapt_prototypes,
    evaluate,
)
from .experiment import EvalReport, PipelineConfig, run_experiment, run_single_episode
from .defense import (
    AnomalyReport,
    CleanseConfig,
    PreprocessSpec,
    apply_preprocess,
    finetune_defense,
    neural_cleanse,
)
