"""Energy-aware multi-user MIMO precoding with a site-adaptive transformer.

Subsystems: physical-layer primitives (`core`), classical baselines
(`baselines`), synthetic site channels (`channelgen`), a minimal autodiff
engine (`autodiff`) driving the transformer model (`nn`), two-phase training
(`training`), similarity-based site adaptation (`adaptation`), evaluation
protocols and complexity accounting (`evalbench`), and the pipeline CLI
(`cli`).
"""

from .errors import (
    BadMagicError,
    BisectionError,
    ConfigError,
    DatasetFormatError,
    DimensionMismatchError,
    GraphConsumedError,
    MimofmError,
    NumericalFailureError,
    PrerequisiteError,
    SingularChannelError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .core import (
    ChannelMatrix,
    PrecodingSolution,
    SystemConfig,
    TransmissionSample,
    energy,
    normalize_precoder,
    simulate_sinr,
    simulate_transmission,
    sinr,
    sum_rate,
    user_rate,
)
from .baselines import WmmseReport, wmmse_precoder, wmmse_rate_bound, zf_precoder
from .channelgen import (
    EnvironmentDataset,
    EnvironmentSpec,
    build_multiuser_csi,
    generate_dataset,
    read_dataset,
    sample_channel,
    steering_vector,
    write_dataset,
)
from .nn import (
    FeatureExtractorParams,
    ModelHyper,
    ModelOutput,
    OutputHead,
    forward,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from .training import (
    Adam,
    RateRequest,
    SiteWeights,
    TrainConfig,
    TrainState,
    init_train_state,
    loss_adaptive_rate,
    loss_total,
    mixed_requests,
    mixture_loss_graph,
    multiobjective_epoch,
    pretrain_epoch,
    sample_rate_requirements,
    site_weight_update,
    train_head,
)
from .adaptation import (
    DEFAULT_HEAD,
    DeployResult,
    cosine_similarity,
    deploy,
    env_feature_vector,
    feature_vector,
    select_similar_environments,
)
from .evalbench import (
    TradeoffPoint,
    config_digest,
    cross_site_matrix,
    flop_count,
    max_sum_rate_eval,
    model_flop_audit,
    read_tradeoff_csv,
    report_path,
    round_sig,
    tradeoff_sweep,
    write_json_report,
    write_tradeoff_csv,
)

__version__ = "0.1.0"
