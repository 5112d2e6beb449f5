"""Trade-off curves of f-differential privacy and their parallel composition.

A trade-off curve maps a type-I error ``alpha`` to the smallest type-II
error any test can reach when telling two neighbouring datasets apart.
Curves here are exact piecewise-linear objects, so pointwise minima, convex
conjugates and lower convex envelopes are computed from breakpoints without
any quadrature.

The composition of mechanisms that run on disjoint parts of a dataset is
``lower_convex_envelope(pointwise_min(curves))``, i.e. the double convex
conjugate of the pointwise minimum.
"""

from __future__ import annotations

import itertools
import logging
import math

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from numpy.typing import ArrayLike, NDArray
from scipy import optimize, special

from dp_cate.exceptions import InvalidBudgetError, InvalidInputError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

EXACT_TOLERANCE = 1e-12
# Relative slack when validating slopes computed from hull vertices.
SLOPE_TOLERANCE = 1e-9
DEFAULT_GAUSSIAN_GRID = 1001
MIN_GAUSSIAN_GRID = 16
# e**700 is close to the largest finite double.
EXP_CAP = 700.0
MAX_CERTIFIED_EPSILON = 60.0
CERTIFY_SLACK = 1e-9


@dataclass(frozen=True)
class EpsDelta:
    """An ``(epsilon, delta)`` differential privacy budget."""

    epsilon: float
    delta: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise InvalidBudgetError(
                f"epsilon must be finite and >= 0, got {self.epsilon}"
            )
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidBudgetError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True, eq=False)
class PiecewiseLinear:
    """Continuous piecewise-linear function given by its breakpoints.

    Without tail slopes the function lives on ``[xs[0], xs[-1]]`` and is
    ``+inf`` outside. With both tail slopes set it extends linearly to the
    whole real line; convex conjugates of compact functions have this form.
    """

    xs: FloatArray
    ys: FloatArray
    left_slope: float | None = None
    right_slope: float | None = None

    def __post_init__(self) -> None:
        xs = np.array(self.xs, dtype=np.float64).reshape(-1)
        ys = np.array(self.ys, dtype=np.float64).reshape(-1)
        if xs.size == 0 or xs.shape != ys.shape:
            raise InvalidInputError("breakpoints need matching, non-empty x and y arrays")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise InvalidInputError("breakpoints must be finite")
        if np.any(np.diff(xs) <= 0):
            raise InvalidInputError("breakpoint x-coordinates must be strictly increasing")
        if (self.left_slope is None) != (self.right_slope is None):
            raise InvalidInputError("set both tail slopes or neither")
        xs.flags.writeable = False
        ys.flags.writeable = False
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        if self.left_slope is not None and self.right_slope is not None:
            object.__setattr__(self, "left_slope", float(self.left_slope))
            object.__setattr__(self, "right_slope", float(self.right_slope))

    @property
    def is_compact(self) -> bool:
        return self.left_slope is None

    @property
    def slopes(self) -> FloatArray:
        return np.diff(self.ys) / np.diff(self.xs)

    @property
    def breakpoints(self) -> list[tuple[float, float]]:
        return [(float(x), float(y)) for x, y in zip(self.xs, self.ys, strict=True)]

    def __call__(self, x: ArrayLike) -> FloatArray:
        points = np.asarray(x, dtype=np.float64)
        values = np.interp(points, self.xs, self.ys)
        below = points < self.xs[0]
        above = points > self.xs[-1]
        if self.left_slope is None or self.right_slope is None:
            return np.where(below | above, np.inf, values)
        values = np.where(
            below, self.ys[0] + self.left_slope * (points - self.xs[0]), values
        )
        return np.where(
            above, self.ys[-1] + self.right_slope * (points - self.xs[-1]), values
        )


@dataclass(frozen=True, eq=False)
class TradeoffCurve(PiecewiseLinear):
    """A convex, non-increasing piecewise-linear trade-off function on [0, 1]."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.is_compact or self.xs[0] != 0.0 or self.xs[-1] != 1.0:
            raise InvalidInputError("a trade-off curve is defined exactly on [0, 1]")
        if np.any(self.ys < -EXACT_TOLERANCE) or np.any(self.ys > 1 + EXACT_TOLERANCE):
            raise InvalidInputError("trade-off values must lie in [0, 1]")
        slopes = self.slopes
        if np.any(slopes > EXACT_TOLERANCE):
            raise InvalidInputError("a trade-off curve must be non-increasing")
        slack = SLOPE_TOLERANCE * np.maximum(1.0, np.abs(slopes[:-1]))
        if np.any(np.diff(slopes) < -slack):
            raise InvalidInputError("a trade-off curve must be convex")


def identity_curve() -> TradeoffCurve:
    """``Id(alpha) = 1 - alpha``: perfect privacy."""
    return TradeoffCurve(np.array([0.0, 1.0]), np.array([1.0, 0.0]))


def zero_curve() -> TradeoffCurve:
    """``f = 0``: no privacy guarantee at all."""
    return TradeoffCurve(np.array([0.0, 1.0]), np.array([0.0, 0.0]))


def _merge_duplicates(xs: FloatArray, ys: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Sort points by x and keep the lowest y among equal x."""
    order = np.lexsort((ys, xs))
    xs, ys = xs[order], ys[order]
    keep = np.concatenate(([True], np.diff(xs) > 0))
    return xs[keep], ys[keep]


def _lower_hull(xs: ArrayLike, ys: ArrayLike) -> tuple[FloatArray, FloatArray]:
    """Monotone-chain lower convex hull; collinear points are dropped."""
    px, py = _merge_duplicates(
        np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    )
    hx = px.tolist()
    hy = py.tolist()
    hull: list[int] = []
    for index in range(len(hx)):
        while len(hull) >= 2:  # noqa: PLR2004
            origin, middle = hull[-2], hull[-1]
            cross = (hx[middle] - hx[origin]) * (hy[index] - hy[origin]) - (
                hy[middle] - hy[origin]
            ) * (hx[index] - hx[origin])
            if cross > 0:
                break
            hull.pop()
        hull.append(index)
    return px[hull], py[hull]


def _legendre_values(query: FloatArray, hx: FloatArray, hv: FloatArray) -> FloatArray:
    """``max_k (q * hx[k] - hv[k])`` over the vertices of a lower hull.

    Vertex ``k`` is the maximiser for slopes between its two adjacent edges,
    so a sorted search locates it; the neighbours are checked as well to
    absorb rounding in the edge slopes.
    """
    if hx.size == 1:
        return query * hx[0] - hv[0]
    edges = np.diff(hv) / np.diff(hx)
    vertex = np.searchsorted(edges, query, side="left")
    best = np.full(query.shape, -np.inf)
    for offset in (-1, 0, 1):
        candidate = np.clip(vertex + offset, 0, hx.size - 1)
        best = np.maximum(best, query * hx[candidate] - hv[candidate])
    return best


def _to_curve(xs: ArrayLike, ys: ArrayLike) -> TradeoffCurve:
    hx, hy = _lower_hull(xs, ys)
    return TradeoffCurve(hx, np.clip(hy, 0.0, 1.0))


def _eps_delta_values(alpha: FloatArray, epsilon: float, delta: float) -> FloatArray:
    head = 1.0 - delta
    growth = math.exp(min(epsilon, EXP_CAP))
    return np.maximum.reduce(
        [
            np.zeros_like(alpha),
            head - growth * alpha,
            (head - alpha) / growth,
        ]
    )


def make_eps_delta(budget: EpsDelta) -> TradeoffCurve:
    """Exact trade-off curve of ``(epsilon, delta)``-DP.

    ``f(a) = max{0, 1 - delta - e^eps a, e^-eps (1 - delta - a)}`` with its
    kink at ``a* = (1 - delta) / (1 + e^eps)``.
    """
    head = 1.0 - budget.delta
    kink = head * float(special.expit(-budget.epsilon))
    alpha = np.array([0.0, kink, head, 1.0])
    return _to_curve(alpha, _eps_delta_values(alpha, budget.epsilon, budget.delta))


def make_gaussian(mu: float, grid_size: int = DEFAULT_GAUSSIAN_GRID) -> TradeoffCurve:
    """Piecewise-linear lower bound of the Gaussian curve ``G_mu``.

    ``G_mu(a) = Phi(Phi^-1(1 - a) - mu)``. The curve returned is the upper
    envelope of the tangents of ``G_mu`` at the interior nodes
    ``i / (grid_size - 1)`` and of the zero line, so it is convex, exact at
    every node and never above ``G_mu``.
    """
    if not math.isfinite(mu) or mu < 0:
        raise InvalidBudgetError(f"mu must be finite and >= 0, got {mu}")
    if grid_size < MIN_GAUSSIAN_GRID:
        raise InvalidInputError(f"grid_size must be at least {MIN_GAUSSIAN_GRID}")
    if mu == 0:
        return identity_curve()
    nodes = np.linspace(0.0, 1.0, grid_size)[1:-1]
    z = special.ndtri(1.0 - nodes)
    values = special.ndtr(z - mu)
    slopes = -np.exp(mu * z - 0.5 * mu * mu)
    intercepts = values - slopes * nodes
    # The upper envelope of lines y = s x + c is the Legendre transform of
    # the points (s, -c).
    hx, hv = _lower_hull(np.append(slopes, 0.0), np.append(-intercepts, 0.0))
    crossings = np.diff(hv) / np.diff(hx) if hx.size > 1 else np.empty(0)
    inner = crossings[(crossings > 0.0) & (crossings < 1.0)]
    alpha = np.unique(np.concatenate(([0.0], inner, [1.0])))
    return _to_curve(alpha, _legendre_values(alpha, hx, hv))


def pointwise_min(curves: Sequence[PiecewiseLinear]) -> PiecewiseLinear:
    """Exact pointwise minimum of compact piecewise-linear functions.

    The result's breakpoints are the union of the inputs' breakpoints plus
    every crossing of two inputs inside a common linear piece.
    """
    if not curves:
        raise InvalidInputError("pointwise_min needs at least one curve")
    if len(curves) == 1:
        return curves[0]
    grid = np.unique(np.concatenate([curve.xs for curve in curves]))
    values = np.vstack([curve(grid) for curve in curves])
    pieces = [grid]
    for first, second in itertools.combinations(range(len(curves)), 2):
        gap = values[first] - values[second]
        change = np.nonzero(gap[:-1] * gap[1:] < 0)[0]
        if change.size:
            left, right = grid[change], grid[change + 1]
            gap_left, gap_right = gap[change], gap[change + 1]
            pieces.append(left + (right - left) * gap_left / (gap_left - gap_right))
    xs = np.unique(np.concatenate(pieces))
    ys = np.min(np.vstack([curve(xs) for curve in curves]), axis=0)
    return PiecewiseLinear(xs, ys)


def convex_conjugate(function: PiecewiseLinear) -> PiecewiseLinear:
    """Legendre-Fenchel transform ``g*(y) = sup_x (y x - g(x))``.

    For a compact input the supremum is attained at a breakpoint, so ``g*``
    is piecewise-linear on the whole line with knots at the slopes of the
    lower hull and tail slopes ``xs[0]`` and ``xs[-1]``. For an input with
    tails (a convex function on the line) the conjugate is compact on
    ``[left_slope, right_slope]``.
    """
    hx, hv = _lower_hull(function.xs, function.ys)
    edges = np.diff(hv) / np.diff(hx) if hx.size > 1 else np.empty(0)
    if function.left_slope is None or function.right_slope is None:
        knots = np.unique(edges) if edges.size else np.array([0.0])
        return PiecewiseLinear(
            knots,
            _legendre_values(knots, hx, hv),
            left_slope=float(hx[0]),
            right_slope=float(hx[-1]),
        )
    low, high = function.left_slope, function.right_slope
    if low > high:
        raise InvalidInputError("tail slopes of a convex function must be ordered")
    inner = edges[(edges > low) & (edges < high)]
    knots = np.unique(np.concatenate(([low], inner, [high])))
    return PiecewiseLinear(knots, _legendre_values(knots, hx, hv))


def lower_convex_envelope(function: PiecewiseLinear) -> TradeoffCurve:
    """Greatest convex function below ``function`` on [0, 1].

    Equal to the double conjugate; computed as the lower hull of the
    breakpoints.
    """
    if not function.is_compact or function.xs[0] != 0.0 or function.xs[-1] != 1.0:
        raise InvalidInputError("the envelope is taken over functions on [0, 1]")
    return _to_curve(function.xs, function.ys)


def compose_parallel(curves: Iterable[TradeoffCurve]) -> TradeoffCurve:
    """Guarantee of mechanisms run on disjoint parts of one dataset."""
    members = list(curves)
    if not members:
        raise InvalidInputError("compose_parallel needs at least one curve")
    composed = lower_convex_envelope(pointwise_min(members))
    logger.debug(
        f"Composed {len(members)} curves into {composed.xs.size} breakpoints"
    )
    return composed


def _union_breakpoints(first: PiecewiseLinear, second: PiecewiseLinear) -> FloatArray:
    return np.unique(np.concatenate((first.xs, second.xs)))


def dominates(first: TradeoffCurve, second: TradeoffCurve) -> bool:
    """True when ``first >= second`` (up to 1e-12) at every breakpoint."""
    grid = _union_breakpoints(first, second)
    return bool(np.all(first(grid) >= second(grid) - EXACT_TOLERANCE))


def sup_distance(first: PiecewiseLinear, second: PiecewiseLinear) -> float:
    """Largest absolute difference over the union of breakpoints."""
    grid = _union_breakpoints(first, second)
    return float(np.max(np.abs(first(grid) - second(grid))))


def delta_for_epsilon(curve: TradeoffCurve, epsilon: float) -> float:
    """Smallest delta with ``curve >= f_{epsilon, delta}``.

    Uses ``delta(eps) = 1 + f*(-e^eps)``, valid for symmetric curves.
    """
    conjugate = convex_conjugate(curve)
    return _delta_from_conjugate(conjugate, epsilon)


def _delta_from_conjugate(conjugate: PiecewiseLinear, epsilon: float) -> float:
    slope = -math.exp(min(epsilon, EXP_CAP))
    return float(np.clip(1.0 + conjugate(slope), 0.0, 1.0))


def certified_epsilon(curve: TradeoffCurve, delta: float) -> float:
    """Smallest epsilon such that ``curve`` certifies ``(epsilon, delta)``-DP.

    Returns ``inf`` when no epsilon up to 60 is certified.
    """
    if not 0.0 <= delta <= 1.0:
        raise InvalidBudgetError(f"delta must lie in [0, 1], got {delta}")
    conjugate = convex_conjugate(curve)
    target = delta * (1.0 + CERTIFY_SLACK) + EXACT_TOLERANCE * 1e-3

    def excess(epsilon: float) -> float:
        return _delta_from_conjugate(conjugate, epsilon) - target

    if excess(0.0) <= 0:
        return 0.0
    if excess(MAX_CERTIFIED_EPSILON) > 0:
        return math.inf
    root = float(optimize.brentq(excess, 0.0, MAX_CERTIFIED_EPSILON, xtol=1e-12))
    step = 1e-12
    while excess(root) > 0:
        root += step
        step *= 2.0
    return root
