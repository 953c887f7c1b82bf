"""Splitting one Gaussian noise budget between two per-round queries.

Each round answers two vector queries: the summed clipped updates and the
count of unclipped clients.  To keep the privacy cost of the pair equal to
that of a single Gaussian mechanism with multiplier ``z``, the update noise
multiplier is inflated to compensate for the count noise ``sigma_b``.
Transmitting the clipped-bit shifted to ``{-1/2, +1/2}`` halves the count
sensitivity, which is why the shifted form compares ``z`` against
``2 * sigma_b`` instead of ``sigma_b``.
"""

from __future__ import annotations

from dataclasses import dataclass


class CalibrationError(ValueError):
    """Requested count noise is too small for the target total budget."""


def default_sigma_b(q: float, n: int) -> float:
    """Default count-noise stddev: one twentieth of the expected cohort."""
    return q * n / 20.0


def derive_update_noise(z: float, sigma_b: float, shifted_bits: bool = True) -> float:
    """Update-noise multiplier giving total budget ``z`` alongside ``sigma_b``.

    Solves ``z**-2 = z_delta**-2 + s**-2`` for ``z_delta`` where ``s`` is
    the count-noise stddev in sensitivity units: ``2 * sigma_b`` for
    shifted bits (sensitivity 1/2), ``sigma_b`` for raw bits.  ``z = 0``
    means no privacy and returns 0.  ``sigma_b = 0`` leaves the count
    unprivatized and the whole budget on the updates, so ``z_delta = z``.
    """
    if z < 0:
        raise ValueError(f"z must be nonnegative, got {z}")
    if sigma_b < 0:
        raise ValueError(f"sigma_b must be nonnegative, got {sigma_b}")
    if z == 0.0:
        return 0.0
    if sigma_b == 0.0:
        return z
    scaled = 2.0 * sigma_b if shifted_bits else sigma_b
    if z >= scaled:
        kind = "2 * sigma_b" if shifted_bits else "sigma_b"
        raise CalibrationError(
            f"count noise too small: require z < {kind} "
            f"(z = {z}, {kind} = {scaled}); increase sigma_b or lower z"
        )
    return (z**-2 - scaled**-2) ** -0.5


def update_noise_stddev(z_delta: float, clip: float) -> float:
    """Per-coordinate noise stddev for the summed updates at clip ``clip``.

    Returns 0 when ``z_delta`` is 0 even for an infinite clip, so the
    no-noise ablation composes with the unclipped baseline.
    """
    if z_delta < 0:
        raise ValueError(f"z_delta must be nonnegative, got {z_delta}")
    if clip < 0:
        raise ValueError(f"clip must be nonnegative, got {clip}")
    if z_delta == 0.0:
        return 0.0
    return z_delta * clip


@dataclass(frozen=True)
class PrivacyParams:
    """Resolved per-round noise parameters for a federated run.

    ``z`` is the total noise multiplier that enters the accountant;
    ``z_delta`` and ``sigma_b`` are the per-query quantities the engine
    actually applies.  Build instances through :meth:`for_adaptive` or
    :meth:`for_fixed` so the split stays consistent.
    """

    q: float
    n: int
    z: float
    sigma_b: float
    z_delta: float
    shifted_bits: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if self.n < 1:
            raise ValueError(f"n must be at least 1, got {self.n}")

    @property
    def expected_cohort(self) -> float:
        """Denominator of both per-round averages: ``q * n``."""
        return self.q * self.n

    @classmethod
    def for_adaptive(
        cls,
        q: float,
        n: int,
        z: float,
        sigma_b: float | None = None,
        shifted_bits: bool = True,
    ) -> PrivacyParams:
        """Parameters for adaptive clipping with a privatized count query."""
        if sigma_b is None:
            sigma_b = default_sigma_b(q, n)
        z_delta = derive_update_noise(z, sigma_b, shifted_bits)
        return cls(q=q, n=n, z=z, sigma_b=sigma_b, z_delta=z_delta, shifted_bits=shifted_bits)

    @classmethod
    def for_fixed(cls, q: float, n: int, z: float) -> PrivacyParams:
        """Parameters for a fixed clip: no count query, so ``z_delta = z``.

        The engine still reports the exact unclipped fraction as a
        diagnostic, but nothing derived from it feeds back into training.
        """
        if z < 0:
            raise ValueError(f"z must be nonnegative, got {z}")
        return cls(q=q, n=n, z=z, sigma_b=0.0, z_delta=z)
