"""Seeded generators for the five simulation setups.

Every setup has six covariates and draws outcomes as

    Y = b(X) + T * tau(X) + noise,   T | X ~ Bernoulli(e(X)),

with standard normal noise. The true effect is returned next to the data
for evaluation and is never handed to a learner.

| Setup | Covariates       | Propensity                         | Effect                                   |
|-------|------------------|------------------------------------|------------------------------------------|
| A     | U(0, 1)^6        | trim(sin(pi x1 x2))                | (x1 + x2) / 2                            |
| B     | N(0, I)          | 0.5                                | x1 + softplus(x2)                        |
| C     | N(0, I)          | expit(-(x2 + x3))                  | 1                                        |
| D     | N(0, I)          | 1 / (1 + e^-x1 + e^-x2)            | max(x1 + x2 + x3, 0) - max(x4 + x5, 0)   |
| E     | N(0, Sigma)      | expit(-(x1 + x6))                  | expit(-x1) - x2 + x3 + x4 + x5 + x6      |
"""

from __future__ import annotations

import functools
import logging

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from numpy.typing import ArrayLike
from scipy import special

from dp_cate.config import DEFAULT_CORRELATION_SEED
from dp_cate.data_models import (
    FeatureSpec,
    FloatArray,
    ObservationSet,
    SetupId,
)
from dp_cate.exceptions import InvalidInputError

logger = logging.getLogger(__name__)

NUM_COVARIATES = 6
DEFAULT_TRIM_LEVEL = 0.1
NORMAL_BOUND = 5.0
MAX_CORRELATION_RETRIES = 10
MIN_EIGENVALUE = 1e-10

Sampler = Callable[[np.random.Generator, int], FloatArray]
Surface = Callable[[FloatArray], FloatArray]


def trim(x: ArrayLike, lo: float = DEFAULT_TRIM_LEVEL) -> FloatArray:
    """Clamp into ``[lo, 1 - lo]``."""
    return np.minimum(np.maximum(lo, np.asarray(x, dtype=np.float64)), 1.0 - lo)


def softplus(x: ArrayLike) -> FloatArray:
    """Overflow-safe ``log(1 + e^x)``."""
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SetupSpec:
    """One simulation setup: covariate law and the three response surfaces."""

    id: SetupId
    sample_covariates: Sampler
    baseline: Surface
    propensity: Surface
    effect: Surface
    feature_specs: tuple[FeatureSpec, ...]
    d: int = NUM_COVARIATES


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """Generated rows plus the true surfaces evaluated at them."""

    observations: ObservationSet
    tau: FloatArray
    propensity: FloatArray
    baseline: FloatArray

    @property
    def x(self) -> FloatArray:
        return self.observations.x


def random_correlation(d: int, seed: int) -> FloatArray:
    """Random correlation matrix: the unit-diagonal normalisation of ``A A^T``.

    ``A`` is a ``d x d`` matrix of standard normals. A near-singular draw is
    retried on the next child seed, at most ten times.

    Raises:
        InvalidInputError: If ``d < 2`` or every draw is singular.
    """
    if d < 2:  # noqa: PLR2004
        raise InvalidInputError(f"a correlation matrix needs d >= 2, got {d}")
    children = np.random.SeedSequence(seed).spawn(MAX_CORRELATION_RETRIES + 1)
    for attempt, child in enumerate(children):
        a = np.random.default_rng(child).standard_normal((d, d))
        gram = a @ a.T
        scale = np.sqrt(np.diag(gram))
        sigma = gram / np.outer(scale, scale)
        sigma = (sigma + sigma.T) / 2.0
        np.fill_diagonal(sigma, 1.0)
        if np.linalg.eigvalsh(sigma).min() > MIN_EIGENVALUE:
            if attempt:
                logger.debug(f"Correlation draw accepted after {attempt} retries")
            return sigma
    raise InvalidInputError(
        f"no positive definite correlation matrix after {MAX_CORRELATION_RETRIES} retries"
    )


def _uniform(rng: np.random.Generator, n: int) -> FloatArray:
    return rng.random((n, NUM_COVARIATES))


def _standard_normal(rng: np.random.Generator, n: int) -> FloatArray:
    return rng.standard_normal((n, NUM_COVARIATES))


def _normal_specs(num_bins: int) -> tuple[FeatureSpec, ...]:
    return tuple(
        FeatureSpec(-NORMAL_BOUND, NORMAL_BOUND, num_bins) for _ in range(NUM_COVARIATES)
    )


def _positive_part(x: FloatArray) -> FloatArray:
    return np.maximum(x, 0.0)


def _setup_a() -> SetupSpec:
    def baseline(x: FloatArray) -> FloatArray:
        return (
            np.sin(np.pi * x[:, 0] * x[:, 1])
            + 2.0 * (x[:, 2] - 0.5) ** 2
            + x[:, 3]
            + 0.5 * x[:, 4]
        )

    return SetupSpec(
        id=SetupId.A,
        sample_covariates=_uniform,
        baseline=baseline,
        propensity=lambda x: trim(np.sin(np.pi * x[:, 0] * x[:, 1])),
        effect=lambda x: (x[:, 0] + x[:, 1]) / 2.0,
        feature_specs=tuple(FeatureSpec(0.0, 1.0) for _ in range(NUM_COVARIATES)),
    )


def _setup_b() -> SetupSpec:
    def baseline(x: FloatArray) -> FloatArray:
        return np.maximum.reduce(
            [x[:, 0] + x[:, 1], x[:, 2], np.zeros(len(x))]
        ) + _positive_part(x[:, 3] + x[:, 4])

    return SetupSpec(
        id=SetupId.B,
        sample_covariates=_standard_normal,
        baseline=baseline,
        propensity=lambda x: np.full(len(x), 0.5),
        effect=lambda x: x[:, 0] + softplus(x[:, 1]),
        feature_specs=_normal_specs(32),
    )


def _setup_c() -> SetupSpec:
    return SetupSpec(
        id=SetupId.C,
        sample_covariates=_standard_normal,
        baseline=lambda x: 2.0 * softplus(x[:, 0] + x[:, 1] + x[:, 2]),
        propensity=lambda x: special.expit(-(x[:, 1] + x[:, 2])),
        effect=lambda x: np.ones(len(x)),
        feature_specs=_normal_specs(32),
    )


def _setup_d() -> SetupSpec:
    def baseline(x: FloatArray) -> FloatArray:
        return _positive_part(x[:, 0] + x[:, 1] + x[:, 2]) + _positive_part(
            x[:, 3] + x[:, 4]
        )

    def propensity(x: FloatArray) -> FloatArray:
        return 1.0 / (1.0 + np.exp(-x[:, 0]) + np.exp(-x[:, 1]))

    def effect(x: FloatArray) -> FloatArray:
        return _positive_part(x[:, 0] + x[:, 1] + x[:, 2]) - _positive_part(
            x[:, 3] + x[:, 4]
        )

    return SetupSpec(
        id=SetupId.D,
        sample_covariates=_standard_normal,
        baseline=baseline,
        propensity=propensity,
        effect=effect,
        feature_specs=_normal_specs(32),
    )


def _setup_e(correlation_seed: int) -> SetupSpec:
    factor = np.linalg.cholesky(random_correlation(NUM_COVARIATES, correlation_seed))

    def sample(rng: np.random.Generator, n: int) -> FloatArray:
        return rng.standard_normal((n, NUM_COVARIATES)) @ factor.T

    def baseline(x: FloatArray) -> FloatArray:
        weights = np.arange(1, NUM_COVARIATES + 1, dtype=np.float64)
        inside = (x[:, 2] > -0.5) & (x[:, 2] < 0.5)
        return x @ weights + x[:, 0] * x[:, 5] + inside.astype(np.float64)

    def effect(x: FloatArray) -> FloatArray:
        return special.expit(-x[:, 0]) - x[:, 1] + x[:, 2:6].sum(axis=1)

    return SetupSpec(
        id=SetupId.E,
        sample_covariates=sample,
        baseline=baseline,
        propensity=lambda x: special.expit(-(x[:, 0] + x[:, 5])),
        effect=effect,
        feature_specs=_normal_specs(32),
    )


@functools.lru_cache(maxsize=32)
def get_setup(
    setup_id: SetupId | str, correlation_seed: int = DEFAULT_CORRELATION_SEED
) -> SetupSpec:
    """The setup with the given id; Setup E depends on ``correlation_seed``."""
    match SetupId(setup_id):
        case SetupId.A:
            return _setup_a()
        case SetupId.B:
            return _setup_b()
        case SetupId.C:
            return _setup_c()
        case SetupId.D:
            return _setup_d()
        case SetupId.E:
            return _setup_e(correlation_seed)


def generate(
    spec: SetupSpec, n: int, seed: int | np.random.SeedSequence
) -> SimulatedData:
    """Draw ``n`` rows from a setup.

    Covariates are drawn first, then treatments, then outcome noise, all from
    one generator seeded with ``seed``.

    Raises:
        InvalidInputError: If ``n < 1``.
    """
    if n < 1:
        raise InvalidInputError(f"sample size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    x = spec.sample_covariates(rng, n)
    propensity = spec.propensity(x)
    t = (rng.random(n) < propensity).astype(np.float64)
    baseline = spec.baseline(x)
    tau = spec.effect(x)
    y = baseline + t * tau + rng.standard_normal(n)
    observations = ObservationSet(y=y, t=t, x=x, feature_specs=spec.feature_specs)
    return SimulatedData(
        observations=observations, tau=tau, propensity=propensity, baseline=baseline
    )
