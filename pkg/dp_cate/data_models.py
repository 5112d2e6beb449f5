"""Data models shared by the learners, generators and experiment harness.

This module contains the enumerations and dataclasses that describe
observational data: public feature bounds, single observations and the
column-oriented observation sets handed to the learners.
"""

from __future__ import annotations

import math

from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum

import numpy as np
import pandas as pd

from numpy.typing import ArrayLike, NDArray

from dp_cate.exceptions import ArityMismatchError, EmptyDataError, InvalidInputError

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

DEFAULT_NUM_BINS = 32


class Link(StrEnum):
    """Link function of an additive model.

    Members:
        IDENTITY: Regression on the outcome scale.
        LOGISTIC: Binary classification, predictions are probabilities.
    """

    IDENTITY = "identity"
    LOGISTIC = "logistic"


class LearnerKind(StrEnum):
    """Meta-learner used to turn nuisance fits into a CATE estimate.

    Members:
        DR: Doubly robust pseudo-outcome regression on a three-way split.
        R: Residual-on-residual weighted regression on a three-way split.
        S: Single response model over (t, x), constant effect.
    """

    DR = "DR"
    R = "R"
    S = "S"


class SetupId(StrEnum):
    """Identifier of a synthetic simulation setup."""

    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"


@dataclass(frozen=True)
class FeatureSpec:
    """Public bounds and bin count for one feature.

    Bounds are treated as privacy-free side information: values outside
    them are clamped into the boundary bins.
    """

    lower: float
    upper: float
    num_bins: int = DEFAULT_NUM_BINS

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise InvalidInputError("feature bounds must be finite")
        if self.lower >= self.upper:
            raise InvalidInputError(
                f"feature lower bound {self.lower} must be below upper {self.upper}"
            )
        if self.num_bins < 2:  # noqa: PLR2004
            raise InvalidInputError("a feature needs at least 2 bins")

    def edges(self) -> FloatArray:
        """Equal-width bin edges, ``num_bins + 1`` of them."""
        return np.linspace(self.lower, self.upper, self.num_bins + 1)

    def with_bins(self, num_bins: int) -> FeatureSpec:
        return replace(self, num_bins=num_bins)


# The treatment indicator enters response models as a two-bin feature.
TREATMENT_SPEC = FeatureSpec(0.0, 1.0, 2)


@dataclass(frozen=True)
class Observation:
    """A single row ``(y, t, x)``."""

    y: float
    t: int
    x: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Column-oriented rows ``(Y, T, X)`` plus public feature bounds.

    ``row_ids`` keeps the row indices of the dataset this set was cut from,
    so that a subset can be traced back to the rows it exposes.
    """

    y: FloatArray
    t: FloatArray
    x: FloatArray
    feature_specs: tuple[FeatureSpec, ...]
    row_ids: IntArray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        x = np.array(self.x, dtype=np.float64)
        if y.size == 0:
            raise EmptyDataError("an observation set needs at least one row")
        if x.ndim == 1:
            x = x.reshape(y.size, -1)
        if x.ndim != 2 or x.shape[0] != y.size or t.size != y.size:  # noqa: PLR2004
            raise InvalidInputError(
                f"inconsistent row counts: y={y.size}, t={t.size}, x={x.shape}"
            )
        if x.shape[1] != len(self.feature_specs):
            raise ArityMismatchError(
                f"{x.shape[1]} feature columns but {len(self.feature_specs)} specs"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise InvalidInputError("observations must be finite")
        if not np.all((t == 0.0) | (t == 1.0)):
            raise InvalidInputError("treatment must be binary (0 or 1)")
        row_ids = np.array(self.row_ids, dtype=np.int64).reshape(-1)
        if row_ids.size == 0:
            row_ids = np.arange(y.size, dtype=np.int64)
        elif row_ids.size != y.size:
            raise InvalidInputError("row_ids must have one entry per row")
        for array in (y, t, x, row_ids):
            array.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "feature_specs", tuple(self.feature_specs))
        object.__setattr__(self, "row_ids", row_ids)

    @classmethod
    def from_rows(
        cls, rows: Sequence[Observation], feature_specs: Sequence[FeatureSpec]
    ) -> ObservationSet:
        if not rows:
            raise EmptyDataError("an observation set needs at least one row")
        arities = {len(row.x) for row in rows}
        if len(arities) != 1:
            raise ArityMismatchError(f"rows have mixed arity: {sorted(arities)}")
        return cls(
            y=np.array([row.y for row in rows]),
            t=np.array([row.t for row in rows]),
            x=np.array([row.x for row in rows]),
            feature_specs=tuple(feature_specs),
        )

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        feature_specs: Sequence[FeatureSpec] | None = None,
        *,
        bounds: tuple[float, float] = (-5.0, 5.0),
        num_bins: int = DEFAULT_NUM_BINS,
    ) -> ObservationSet:
        """Build a set from a frame with columns ``y, t, x1..xd``.

        Extra columns such as ``tau_true`` are ignored. When no specs are
        given, every feature gets the same public ``bounds``.
        """
        missing = {"y", "t"} - set(frame.columns)
        if missing:
            raise InvalidInputError(f"missing columns: {sorted(missing)}")
        feature_columns = _feature_columns(frame.columns)
        if not feature_columns:
            raise InvalidInputError("no feature columns named x1..xd")
        if feature_specs is None:
            feature_specs = [
                FeatureSpec(bounds[0], bounds[1], num_bins) for _ in feature_columns
            ]
        return cls(
            y=frame["y"].to_numpy(dtype=np.float64),
            t=frame["t"].to_numpy(dtype=np.float64),
            x=frame[feature_columns].to_numpy(dtype=np.float64),
            feature_specs=tuple(feature_specs),
        )

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[Observation]:
        for index in range(self.n):
            yield self.row(index)

    def row(self, index: int) -> Observation:
        return Observation(
            y=float(self.y[index]),
            t=int(self.t[index]),
            x=tuple(float(value) for value in self.x[index]),
        )

    def subset(self, indices: ArrayLike) -> ObservationSet:
        """Rows at ``indices``, keeping their original row ids."""
        chosen = np.asarray(indices, dtype=np.int64)
        return ObservationSet(
            y=self.y[chosen],
            t=self.t[chosen],
            x=self.x[chosen],
            feature_specs=self.feature_specs,
            row_ids=self.row_ids[chosen],
        )

    def design(self, treatment: float | None = None) -> FloatArray:
        """Matrix ``[t, x]`` for response models.

        With ``treatment`` set, the treatment column is replaced by that
        constant, which is how ``mu(1, x)`` and ``mu(0, x)`` are evaluated.
        """
        column = self.t if treatment is None else np.full(self.n, float(treatment))
        return np.column_stack((column, self.x))

    def to_frame(self, tau: ArrayLike | None = None) -> pd.DataFrame:
        frame = pd.DataFrame({"y": self.y, "t": self.t.astype(np.int64)})
        for column in range(self.d):
            frame[f"x{column + 1}"] = self.x[:, column]
        if tau is not None:
            frame["tau_true"] = np.asarray(tau, dtype=np.float64)
        return frame


def _feature_columns(columns: pd.Index) -> list[str]:
    names = [str(name) for name in columns]
    features = [
        name for name in names if name.startswith("x") and name[1:].isdigit()
    ]
    return sorted(features, key=lambda name: int(name[1:]))


def as_feature_matrix(x: ArrayLike, arity: int) -> FloatArray:
    """Coerce a vector or matrix of features to shape ``(n, arity)``."""
    matrix = np.asarray(x, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2 or matrix.shape[1] != arity:  # noqa: PLR2004
        raise ArityMismatchError(
            f"expected {arity} features, got shape {np.shape(x)}"
        )
    return matrix
