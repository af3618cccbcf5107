"""Federated domain-aware dual prompt tuning at desk scale."""

from .autodiff import (
    GradientTape,
    Tensor,
    backward,
    cosine_loss,
    cross_entropy_loss,
    l2_normalize,
    matmul,
    softmax_with_temperature,
)
from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .data import DatasetSpec, DomainDataset, SampleRecord, few_shot_subset, generate_domains
from .encoders import (
    AttentionRecord,
    EncoderConfig,
    EncoderWeights,
    embed_class_name,
    encode_image,
    encode_text,
    init_encoders,
    weights_hash,
)
from .federation import (
    ClientState,
    RoundSchedule,
    RunConfig,
    ServerState,
    aggregate,
    dirichlet_partition,
    local_train,
    momentum_load_external,
    run_federated,
)
from .optim import AdamW, SGDMomentum, make_optimizer
from .prompts import (
    DomainWeights,
    LossConfig,
    PromptModel,
    TextPromptSet,
    VariantSpec,
    adapt_loss,
    build_variant,
    classify,
    decode_prompt_nearest_words,
    domain_weights,
    fuse_text_features,
)

__version__ = "0.1.0"
