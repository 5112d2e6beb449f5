"""Differentially private generalized additive models.

The model is ``g(E[y|x]) = intercept + sum_i f_i(x_i)`` with piecewise-
constant shape functions over equal-width bins of PUBLIC feature bounds.
Training is cyclic histogram boosting: each round visits every feature,
sums clipped residuals per bin, adds Gaussian noise calibrated by
:mod:`dp_cate.accountant`, divides by noisy bin counts and moves the shape a
step towards the result. Private divisors never fall below a quarter of the
sum noise scale, so one update moves a sparse bin by at most about four noise
standard deviations.

Privacy accounting per fit (``d`` features, ``R`` rounds):

* ``d`` noisy bin-count releases, one per feature, sharing 10% of ``mu**2``;
* ``R * d`` noisy residual-sum releases sharing the remaining 90%.

Rows are clipped to radius ``C / sqrt(2)`` so that substituting one row moves
a per-feature bin-sum vector by at most ``sqrt(2) * C`` in L2, whether the
two rows share a bin or not.
"""

from __future__ import annotations

import json
import logging
import math

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import Any

import numpy as np

from numpy.typing import ArrayLike
from scipy import special

from dp_cate.accountant import (
    COUNT_SHARE,
    SUM_SHARE,
    PrivacyBudget,
    ReleasePlan,
    plan_releases,
)
from dp_cate.config import DEFAULT_TARGET_RANGE, BoostingParams
from dp_cate.data_models import (
    FeatureSpec,
    FloatArray,
    IntArray,
    Link,
    as_feature_matrix,
)
from dp_cate.exceptions import (
    ArityMismatchError,
    EmptyDataError,
    InvalidInputError,
    ModelFormatError,
)

logger = logging.getLogger(__name__)

BINARY_TARGET_RANGE = (0.0, 1.0)
LOGISTIC_CLIP = 1.0
# Logistic steps are scaled by the inverse of the largest Bernoulli variance.
LOGISTIC_STEP_SCALE = 4.0
PROBABILITY_FLOOR = 1e-6
COUNT_FLOOR = 1.0
NOISE_FLOOR_SHARE = 0.25
COUNT_CLIP = 1.0

SHAPE_FORMAT = "dp-cate/additive-model"
SHAPE_FORMAT_VERSION = 1


class ReleaseKind(StrEnum):
    """Kind of noisy statistic released during a fit."""

    COUNT = "count"
    SUM = "sum"


@dataclass(frozen=True)
class ReleaseEvent:
    """One noisy release made by the booster."""

    kind: ReleaseKind
    feature: int
    round: int | None
    sigma: float
    size: int


ReleaseListener = Callable[[ReleaseEvent], None]


@dataclass(frozen=True, eq=False)
class ShapeFunction:
    """Piecewise-constant function of one feature.

    Inputs outside ``[edges[0], edges[-1]]`` fall into the boundary bins.
    """

    edges: FloatArray
    values: FloatArray

    def __post_init__(self) -> None:
        edges = np.array(self.edges, dtype=np.float64).reshape(-1)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if edges.size != values.size + 1 or values.size < 1:
            raise ModelFormatError(
                f"{edges.size} edges do not bound {values.size} bins"
            )
        if np.any(np.diff(edges) <= 0) or not np.all(np.isfinite(edges)):
            raise ModelFormatError("bin edges must be finite and strictly ascending")
        if not np.all(np.isfinite(values)):
            raise ModelFormatError("shape values must be finite")
        edges.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, spec: FeatureSpec) -> ShapeFunction:
        return cls(spec.edges(), np.zeros(spec.num_bins))

    @property
    def num_bins(self) -> int:
        return int(self.values.size)

    def bin_index(self, column: ArrayLike) -> IntArray:
        points = np.asarray(column, dtype=np.float64)
        index = np.searchsorted(self.edges, points, side="right") - 1
        return np.clip(index, 0, self.num_bins - 1).astype(np.int64)

    def __call__(self, column: ArrayLike) -> FloatArray:
        return self.values[self.bin_index(column)]


@dataclass(frozen=True, eq=False)
class AdditiveModel:
    """Fitted additive model ``link^-1(intercept + sum_i shape_i(x_i))``."""

    intercept: float
    shapes: tuple[ShapeFunction, ...]
    link: Link = Link.IDENTITY
    feature_names: tuple[str, ...] = ()
    release_count: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.intercept):
            raise ModelFormatError("intercept must be finite")
        names = self.feature_names or tuple(
            f"x{index + 1}" for index in range(len(self.shapes))
        )
        if len(names) != len(self.shapes):
            raise ModelFormatError("one feature name per shape is required")
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "feature_names", tuple(names))
        object.__setattr__(self, "link", Link(self.link))

    @classmethod
    def zeros(
        cls,
        specs: Sequence[FeatureSpec],
        intercept: float = 0.0,
        link: Link = Link.IDENTITY,
    ) -> AdditiveModel:
        return cls(intercept, tuple(ShapeFunction.zeros(spec) for spec in specs), link)

    @property
    def num_features(self) -> int:
        return len(self.shapes)

    def contributions(self, x: ArrayLike) -> FloatArray:
        """Per-feature terms ``shape_i(x_i)`` as an ``(n, d)`` matrix."""
        matrix = as_feature_matrix(x, self.num_features)
        if self.num_features == 0:
            return np.zeros((matrix.shape[0], 0))
        return np.column_stack(
            [shape(matrix[:, index]) for index, shape in enumerate(self.shapes)]
        )

    def score(self, x: ArrayLike) -> FloatArray:
        """Pre-link score ``intercept + sum of contributions``."""
        return self.intercept + self.contributions(x).sum(axis=1)


def predict(model: AdditiveModel, x: ArrayLike) -> FloatArray:
    """Predictions on the outcome scale.

    A single feature vector yields a 0-d array, a matrix one value per row.
    Logistic outputs are clamped to ``[1e-6, 1 - 1e-6]``.

    Raises:
        ArityMismatchError: If the feature count differs from the model's.
    """
    single = np.ndim(x) == 1
    score = model.score(x)
    if model.link is Link.LOGISTIC:
        score = np.clip(special.expit(score), PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
    return score.reshape(()) if single else score


def planned_releases(
    num_features: int,
    budget: PrivacyBudget,
    params: BoostingParams,
    clip: float,
) -> tuple[ReleasePlan, ReleasePlan]:
    """The (count, sum) release plans a private fit will follow."""
    counts = plan_releases(budget, num_features, COUNT_CLIP, fraction=COUNT_SHARE)
    sums = plan_releases(
        budget, params.rounds * num_features, clip, fraction=SUM_SHARE
    )
    return counts, sums


def fit(
    x: ArrayLike,
    y: ArrayLike,
    specs: Sequence[FeatureSpec],
    budget: PrivacyBudget | None = None,
    params: BoostingParams | None = None,
    link: Link = Link.IDENTITY,
    seed: int | np.random.SeedSequence = 0,
    *,
    target_range: tuple[float, float] | None = None,
    listener: ReleaseListener | None = None,
) -> AdditiveModel:
    """Fit an additive model by cyclic histogram boosting.

    Args:
        x: Feature matrix of shape ``(n, d)``.
        y: Targets; ``{0, 1}`` labels for the logistic link.
        specs: Public bounds and bin counts, one per feature.
        budget: Privacy budget of the whole fit; ``None`` trains without noise.
        params: Rounds, learning rate and clip; library defaults when omitted.
        link: Identity for regression, logistic for classification.
        seed: Seed of the noise generator.
        target_range: Public target range; targets are clipped into it.
        listener: Called once per noisy release.

    Returns:
        The fitted model, with ``release_count`` set to the releases made.

    Raises:
        EmptyDataError: If there are no rows.
        InvalidInputError: For non-finite data or non-binary logistic labels.
        InvalidBudgetError: If the budget cannot be calibrated.
    """
    return _boost(
        x, y, None, specs, budget, params or BoostingParams(), Link(link), seed,
        target_range, listener,
    )


def fit_weighted(
    x: ArrayLike,
    y: ArrayLike,
    weights: ArrayLike,
    specs: Sequence[FeatureSpec],
    budget: PrivacyBudget | None = None,
    params: BoostingParams | None = None,
    link: Link = Link.IDENTITY,
    seed: int | np.random.SeedSequence = 0,
    *,
    target_range: tuple[float, float] | None = None,
    listener: ReleaseListener | None = None,
) -> AdditiveModel:
    """Weighted variant of :func:`fit` minimising ``sum w (y - f(x))**2``.

    Bin sums use ``clip(w * residual)`` and bin counts use ``sum w``. Private
    fits need weights in ``[0, 1]`` to keep the count sensitivity at one.

    Raises:
        InvalidInputError: For negative, non-finite or all-zero weights.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidInputError("weights must be finite and non-negative")
    if not np.any(w > 0):
        raise InvalidInputError("all weights are zero")
    if budget is not None and np.any(w > 1.0):
        raise InvalidInputError("private weighted fits need weights in [0, 1]")
    return _boost(
        x, y, w, specs, budget, params or BoostingParams(), Link(link), seed,
        target_range, listener,
    )


def _prepare_targets(
    y: ArrayLike, n: int, link: Link, target_range: tuple[float, float]
) -> FloatArray:
    targets = np.asarray(y, dtype=np.float64).reshape(-1)
    if targets.size != n:
        raise InvalidInputError(f"{targets.size} targets for {n} feature rows")
    if not np.all(np.isfinite(targets)):
        raise InvalidInputError("targets must be finite")
    if link is Link.LOGISTIC and not np.all((targets == 0.0) | (targets == 1.0)):
        raise InvalidInputError("logistic targets must be 0 or 1")
    return np.clip(targets, target_range[0], target_range[1])


def _bin_features(matrix: FloatArray, specs: Sequence[FeatureSpec]) -> list[IntArray]:
    bins = []
    for index, spec in enumerate(specs):
        column = np.clip(matrix[:, index], spec.lower, spec.upper)
        if not np.all(np.isfinite(column)):
            raise InvalidInputError(f"feature {index + 1} is not finite")
        bins.append(ShapeFunction.zeros(spec).bin_index(column))
    return bins


def _boost(
    x: ArrayLike,
    y: ArrayLike,
    weights: FloatArray | None,
    specs: Sequence[FeatureSpec],
    budget: PrivacyBudget | None,
    params: BoostingParams,
    link: Link,
    seed: int | np.random.SeedSequence,
    target_range: tuple[float, float] | None,
    listener: ReleaseListener | None,
) -> AdditiveModel:
    matrix = np.asarray(x, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)
    n = matrix.shape[0]
    if n == 0:
        raise EmptyDataError("cannot fit an additive model on zero rows")
    if matrix.shape[1] != len(specs):
        raise ArityMismatchError(f"{matrix.shape[1]} features but {len(specs)} specs")
    logistic = link is Link.LOGISTIC
    if target_range is None:
        target_range = BINARY_TARGET_RANGE if logistic else DEFAULT_TARGET_RANGE
    low, high = target_range
    if not low < high:
        raise InvalidInputError(f"target range {target_range} is empty")
    targets = _prepare_targets(y, n, link, target_range)
    w = np.ones(n) if weights is None else weights
    if w.size != n:
        raise InvalidInputError(f"{w.size} weights for {n} rows")
    bins = _bin_features(matrix, specs)

    clip = LOGISTIC_CLIP if logistic else (params.clip or (high - low) / 2.0)
    radius = clip / math.sqrt(2.0)
    rng = np.random.default_rng(seed)
    count_sigma = sum_sigma = 0.0
    if budget is not None:
        count_plan, sum_plan = planned_releases(len(specs), budget, params, clip)
        count_sigma, sum_sigma = count_plan.sigma, sum_plan.sigma

    releases = 0

    def release(
        statistic: FloatArray, kind: ReleaseKind, feature: int, rnd: int | None
    ) -> FloatArray:
        nonlocal releases
        if budget is None:
            return statistic
        sigma = count_sigma if kind is ReleaseKind.COUNT else sum_sigma
        releases += 1
        if listener is not None:
            listener(ReleaseEvent(kind, feature, rnd, sigma, statistic.size))
        return statistic + rng.normal(0.0, sigma, statistic.size)

    counts = [
        release(
            np.bincount(bins[j], weights=w, minlength=spec.num_bins),
            ReleaseKind.COUNT,
            j,
            None,
        )
        for j, spec in enumerate(specs)
    ]
    floor = max(COUNT_FLOOR, NOISE_FLOOR_SHARE * sum_sigma)
    masses = [np.maximum(count, 0.0) for count in counts]
    divisors = [np.maximum(count, floor) for count in counts]

    midpoint = (low + high) / 2.0
    intercept = float(special.logit(midpoint)) if logistic else midpoint
    values = [np.zeros(spec.num_bins) for spec in specs]
    score = np.full(n, intercept)
    rate = params.learning_rate

    for rnd in range(params.rounds):
        for j, spec in enumerate(specs):
            prediction = special.expit(score) if logistic else score
            residual = np.clip(w * (targets - prediction), -radius, radius)
            sums = release(
                np.bincount(bins[j], weights=residual, minlength=spec.num_bins),
                ReleaseKind.SUM,
                j,
                rnd,
            )
            mass = masses[j]
            total = mass.sum()
            mean = float(sums.sum() / max(total, floor)) if total > 0 else 0.0
            # Bins without mass carry no information and only follow the mean.
            # A floored bin shrinks towards the mean, never towards zero.
            deviation = np.where(mass > 0, (sums - mean * mass) / divisors[j], 0.0)
            if logistic:
                mean *= LOGISTIC_STEP_SCALE
                deviation *= LOGISTIC_STEP_SCALE
            values[j] += rate * deviation
            intercept += mean
            score += rate * deviation[bins[j]] + mean

    for j, mass in enumerate(masses):
        total = mass.sum()
        if total > 0:
            center = float(np.dot(mass, values[j]) / total)
            values[j] -= center
            intercept += center

    logger.debug(
        f"Fitted {link.value} additive model on {n} rows, "
        f"{len(specs)} features, {releases} noisy releases"
    )
    shapes = tuple(
        ShapeFunction(spec.edges(), value)
        for spec, value in zip(specs, values, strict=True)
    )
    return AdditiveModel(intercept, shapes, link, release_count=releases)


def export_shapes(model: AdditiveModel) -> dict[str, Any]:
    """JSON-ready document with the intercept, link and every shape."""
    return {
        "format": SHAPE_FORMAT,
        "version": SHAPE_FORMAT_VERSION,
        "link": model.link.value,
        "intercept": model.intercept,
        "release_count": model.release_count,
        "features": [
            {
                "name": name,
                "edges": shape.edges.tolist(),
                "values": shape.values.tolist(),
            }
            for name, shape in zip(model.feature_names, model.shapes, strict=True)
        ],
    }


def import_shapes(document: dict[str, Any]) -> AdditiveModel:
    """Rebuild a model from :func:`export_shapes` output.

    Raises:
        ModelFormatError: If the document is not a supported shape export.
    """
    if document.get("format") != SHAPE_FORMAT:
        raise ModelFormatError(f"unknown shape format {document.get('format')!r}")
    if document.get("version") != SHAPE_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported version {document.get('version')!r}")
    try:
        link = Link(document["link"])
        features = document["features"]
        shapes = tuple(
            ShapeFunction(np.array(item["edges"]), np.array(item["values"]))
            for item in features
        )
        names = tuple(str(item["name"]) for item in features)
        return AdditiveModel(
            float(document["intercept"]),
            shapes,
            link,
            feature_names=names,
            release_count=int(document.get("release_count", 0)),
        )
    except (KeyError, TypeError, ValueError) as error:
        raise ModelFormatError(f"malformed shape document: {error}") from error


def dumps_shapes(model: AdditiveModel) -> str:
    return json.dumps(export_shapes(model), indent=2) + "\n"


def loads_shapes(text: str) -> AdditiveModel:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as error:
        raise ModelFormatError(f"shape document is not JSON: {error}") from error
    if not isinstance(document, dict):
        raise ModelFormatError("shape document must be a JSON object")
    return import_shapes(document)
