"""Simulator of federated averaging with user-level differential privacy
and a quantile-adaptive L2 clipping norm."""

from .accountant import (
    DEFAULT_ORDERS,
    AccountantState,
    AccountingError,
    PrivacySpent,
    compose_and_convert,
    rdp_per_step,
    solve_noise_for_epsilon,
)
from .calibration import (
    CalibrationError,
    PrivacyParams,
    default_sigma_b,
    derive_update_noise,
    update_noise_stddev,
)
from .config import (
    ConfigError,
    CsvTask,
    RunConfig,
    SweepSpec,
    SyntheticTask,
    load_config,
    parse_sweep,
    to_raw,
    validate_config,
)
from .data import ClientDataset, IngestionError, generate_synthetic_task, ingest_csv, split_eval
from .engine import (
    ClientUpdate,
    DivergenceError,
    RoundRecord,
    ServerState,
    TrainResult,
    aggregate_round,
    clip_delta,
    local_fedavg,
    poisson_sample,
    server_step,
    train,
)
from .metrics import emit_metrics, read_metrics_csv
from .models import LossKind, ModelKind, ModelSpec, evaluate, init_params, loss_and_gradient
from .quantile import (
    ClipState,
    QuantileConfig,
    UpdateRule,
    batch_fraction_below,
    quantile_loss,
    quantile_loss_derivative,
    update_clip,
)
from .rng import RngStream, StreamLabel, gaussian_vector
from .sweep import SummaryRow, SweepCell, discover_clip_range, last_window_metric, run_sweep

__version__ = "0.1.0"
