from .estimator import STSTransducer
from .network import (
    NORM_RATIO_CAP,
    EncoderOutputs,
    ModelConfig,
    NormRatio,
    STSModel,
    init_params,
    masking_loss,
    norm_ratio,
    parameter_shapes,
)
from .training import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    TrainConfig,
    clip_gradients,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
    train,
)
