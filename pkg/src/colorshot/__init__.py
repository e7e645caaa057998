"""Few-shot image classification by color-channel perception.

Images are split into three color planes, encoded per channel by a staged
convolutional extractor with cross-channel attention, and classified by
iteratively refined support-query relation matrices.  A frozen trained
model can distill its behavior into a lighter, attention-free student.
"""

from .color_shunt import ChannelGroup, ColorSpace, convert, invert, shunt, unshunt
from .echelon import (
    CrossChannelAttention,
    EchelonConfig,
    EmbeddingTriple,
    FeatureEchelon,
    count_params,
)
from .engine import (
    Checkpoint,
    EvalReport,
    TrainConfig,
    distill,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .episodes import (
    DatasetSource,
    Episode,
    EpisodeSpec,
    SyntheticSource,
    load_dataset,
    sample_episode,
    synth_episode,
)
from .learner import ColorLearner, LearnerConfig, build_learner
from .objective import distill_kl, embedding_sim_loss, matrix_class_loss, total_loss
from .pattern import (
    PatternParams,
    RelationState,
    SimMetric,
    init_relations,
    masked_aggregate,
    predict_labels,
    run_patterns,
)

__version__ = "0.1.0"
