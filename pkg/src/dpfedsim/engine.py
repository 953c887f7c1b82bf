"""Federated averaging with user-level DP and an adaptive clipping norm.

One round: Poisson-sample a cohort, run local SGD per client against an
immutable model snapshot, clip each delta and record whether it was
clipped, aggregate with Gaussian noise on both the update sum and the
(shifted) clipped-bit sum, then apply a server momentum step and a
quantile-tracker step on the clip.  Everything downstream of aggregation
sees only the two privatized quantities.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .calibration import PrivacyParams, default_sigma_b, update_noise_stddev
from .config import RunConfig, build_clients, quantile_config, resolved_data_seed
from .data import ClientDataset, split_eval
from .models import ModelSpec, evaluate, init_params, loss_and_gradient
from .quantile import ClipState, QuantileConfig, update_clip
from .rng import RngStream, StreamLabel, gaussian_vector

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced non-finite values."""

    def __init__(self, message: str, client_id: str | None = None, round_index: int | None = None):
        super().__init__(message)
        self.client_id = client_id
        self.round_index = round_index


@dataclass(frozen=True)
class ClientUpdate:
    """Clipped local delta plus the shifted clipped-indicator bit.

    ``bit_shifted`` is -0.5 when the pre-clip norm was at or below the
    clip (unclipped, ties included) and +0.5 when the update was scaled
    down.  ``preclip_norm`` is a simulator diagnostic; it never enters
    the privatized aggregates.
    """

    delta: np.ndarray
    bit_shifted: float
    preclip_norm: float
    user_id: str = ""


@dataclass(frozen=True)
class ServerState:
    theta: np.ndarray
    momentum: np.ndarray
    clip: ClipState
    round_index: int
    eta_server: float
    beta: float

    def __post_init__(self) -> None:
        if self.momentum.shape != self.theta.shape:
            raise ValueError("momentum and theta dimensions disagree")
        if self.round_index < 0:
            raise ValueError("round_index must be nonnegative")


@dataclass(frozen=True)
class RoundRecord:
    """Per-round metrics row; eval fields are NaN on non-eval rounds."""

    round_index: int
    clip_before: float
    clip_after: float
    frac_below_exact: float
    frac_below_noisy: float
    mean_preclip_norm: float
    eval_loss: float
    eval_metric: float
    sampled_count: int


def clip_delta(delta: np.ndarray, c: float, user_id: str = "") -> ClientUpdate:
    """Scale ``delta`` to L2 norm at most ``c``; ties count as unclipped."""
    if not c > 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    norm = float(np.linalg.norm(delta))
    if norm <= c:
        return ClientUpdate(delta=delta, bit_shifted=-0.5, preclip_norm=norm, user_id=user_id)
    return ClientUpdate(
        delta=delta * (c / norm), bit_shifted=0.5, preclip_norm=norm, user_id=user_id
    )


def local_fedavg(
    client: ClientDataset,
    theta0: np.ndarray,
    eta_client: float,
    c: float,
    spec: ModelSpec,
    epochs: int = 1,
) -> ClientUpdate:
    """Local minibatch SGD from the snapshot ``theta0``, then clip the delta.

    Batches run in storage order, so the result is deterministic given
    the inputs.
    """
    if eta_client <= 0:
        raise ValueError(f"client learning rate must be positive, got {eta_client}")
    theta = theta0.copy()
    for _ in range(epochs):
        for features, targets in client.batches():
            loss, grad = loss_and_gradient(spec, theta, features, targets)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite local loss on client {client.user_id!r}", client_id=client.user_id
                )
            theta -= eta_client * grad
    return clip_delta(theta - theta0, c, user_id=client.user_id)


def poisson_sample(user_ids: list[str], q: float, stream: RngStream) -> list[str]:
    """Independently keep each user with probability ``q``; may be empty."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    mask = stream.generator().random(len(user_ids)) < q
    return [user_id for user_id, keep in zip(user_ids, mask) if keep]


def aggregate_round(
    updates: list[ClientUpdate],
    params: PrivacyParams,
    c: float,
    dim: int,
    update_stream: RngStream,
    count_stream: RngStream,
) -> tuple[np.ndarray, float]:
    """Noisy unweighted averages of the update sum and the clipped-bit sum.

    Both sums divide by the expected cohort ``q * n`` (never the realized
    count), which is what the sensitivity analysis assumes.  The stored
    bits mark unclipped updates as -0.5, so the below-fraction estimate
    subtracts their noisy average from one half; an empty cohort yields a
    pure-noise update.
    """
    expected = params.expected_cohort
    total = np.zeros(dim)
    bit_sum = 0.0
    for update in sorted(updates, key=lambda u: u.user_id):
        total += update.delta
        bit_sum += update.bit_shifted
    sigma_delta = update_noise_stddev(params.z_delta, c)
    total += gaussian_vector(update_stream, dim, sigma_delta)
    delta_tilde = total / expected
    count_noise = float(gaussian_vector(count_stream, 1, params.sigma_b)[0])
    b_tilde = 0.5 - (bit_sum + count_noise) / expected
    return delta_tilde, b_tilde


def server_step(
    state: ServerState,
    delta_tilde: np.ndarray,
    b_tilde: float,
    cfg: QuantileConfig | None,
) -> tuple[ServerState, RoundRecord]:
    """Momentum step on the model and tracker step on the clip.

    Consumes only privatized quantities.  ``cfg = None`` freezes the clip
    (fixed-clip mode).  The returned record carries the fields derivable
    here; the training loop fills in diagnostics and evaluation.
    """
    momentum = state.beta * state.momentum + (1.0 - state.beta) * delta_tilde
    theta = state.theta + state.eta_server * momentum
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(
            f"non-finite model parameters after round {state.round_index}",
            round_index=state.round_index,
        )
    clip = update_clip(state.clip, b_tilde, cfg) if cfg is not None else replace(
        state.clip, round_index=state.clip.round_index + 1
    )
    new_state = ServerState(
        theta=theta,
        momentum=momentum,
        clip=clip,
        round_index=state.round_index + 1,
        eta_server=state.eta_server,
        beta=state.beta,
    )
    record = RoundRecord(
        round_index=state.round_index,
        clip_before=state.clip.value,
        clip_after=clip.value,
        frac_below_exact=math.nan,
        frac_below_noisy=b_tilde,
        mean_preclip_norm=math.nan,
        eval_loss=math.nan,
        eval_metric=math.nan,
        sampled_count=0,
    )
    return new_state, record


@dataclass(frozen=True)
class TrainResult:
    params: np.ndarray
    records: list[RoundRecord]
    state: ServerState
    privacy: PrivacyParams
    num_users: int


def resolve_privacy(config: RunConfig, num_users: int) -> PrivacyParams:
    """Bind the configured noise settings to the actual population size."""
    if config.population is not None and config.population != num_users:
        raise ValueError(
            f"config population ({config.population}) does not match the "
            f"loaded client count ({num_users})"
        )
    if config.clip_mode == "fixed":
        return PrivacyParams.for_fixed(config.sample_prob, num_users, config.noise_multiplier)
    sigma_b = config.sigma_b
    if sigma_b is None:
        sigma_b = default_sigma_b(config.sample_prob, num_users)
    return PrivacyParams.for_adaptive(
        config.sample_prob,
        num_users,
        config.noise_multiplier,
        sigma_b=sigma_b,
        shifted_bits=config.shifted_bits,
    )


def train(config: RunConfig, clients: list[ClientDataset] | None = None) -> TrainResult:
    """Run the full federated loop; deterministic given config and clients.

    ``clients`` overrides the config's task definition, which lets tests
    inject hand-built populations.
    """
    if clients is None:
        clients = build_clients(config)
    clients, eval_features, eval_targets = split_eval(clients, config.eval_fraction)
    num_users = len(clients)
    privacy = resolve_privacy(config, num_users)
    spec = config.model
    user_ids = [client.user_id for client in clients]
    by_id = dict(zip(user_ids, clients))
    if len(by_id) != len(clients):
        raise ValueError("duplicate user ids in client population")

    cfg = quantile_config(config) if config.clip_mode == "adaptive" else None
    state = ServerState(
        theta=init_params(spec, resolved_data_seed(config)),
        momentum=np.zeros(spec.param_count),
        clip=ClipState(value=cfg.c0 if cfg is not None else config.clip_value),
        round_index=0,
        eta_server=config.server_lr,
        beta=config.momentum,
    )
    dim = spec.param_count
    pool = ThreadPoolExecutor(config.client_workers) if config.client_workers > 1 else None
    records: list[RoundRecord] = []
    try:
        for t in range(config.rounds):
            sampled = poisson_sample(
                user_ids, config.sample_prob, RngStream(config.master_seed, StreamLabel.SAMPLING, t)
            )
            if not sampled:
                logger.warning("round %d: empty cohort, applying a noise-only update", t)
            snapshot = state.theta

            def run_client(user_id: str) -> ClientUpdate:
                return local_fedavg(
                    by_id[user_id],
                    snapshot,
                    config.client_lr,
                    state.clip.value,
                    spec,
                    epochs=config.epochs,
                )

            try:
                if pool is not None:
                    updates = list(pool.map(run_client, sampled))
                else:
                    updates = [run_client(user_id) for user_id in sampled]
            except DivergenceError as exc:
                raise DivergenceError(
                    f"round {t}: {exc}", client_id=exc.client_id, round_index=t
                ) from exc

            delta_tilde, b_tilde = aggregate_round(
                updates,
                privacy,
                state.clip.value,
                dim,
                RngStream(config.master_seed, StreamLabel.UPDATE_NOISE, t),
                RngStream(config.master_seed, StreamLabel.COUNT_NOISE, t),
            )
            try:
                state, record = server_step(state, delta_tilde, b_tilde, cfg)
            except DivergenceError as exc:
                raise DivergenceError(f"round {t}: {exc}", round_index=t) from exc

            eval_loss = eval_metric = math.nan
            is_eval_round = (t + 1) % config.eval_period == 0 or t == config.rounds - 1
            if is_eval_round and eval_features.shape[0] > 0:
                eval_loss, eval_metric = evaluate(spec, state.theta, eval_features, eval_targets)
            if updates:
                frac_below = float(np.mean([u.bit_shifted < 0 for u in updates]))
                mean_norm = float(np.mean([u.preclip_norm for u in updates]))
            else:
                frac_below = mean_norm = math.nan
            records.append(
                replace(
                    record,
                    frac_below_exact=frac_below,
                    mean_preclip_norm=mean_norm,
                    eval_loss=eval_loss,
                    eval_metric=eval_metric,
                    sampled_count=len(sampled),
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(
        params=state.theta, records=records, state=state, privacy=privacy, num_users=num_users
    )
