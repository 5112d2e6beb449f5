"""Private CATE meta-learners built on the additive booster.

A fit splits the data into disjoint parts, trains the first-stage
nuisance models on their own parts, transforms the last part with those
models and trains a second-stage model on the transformed targets. Because
every module reads a disjoint set of rows, the overall guarantee is the
parallel composition of the module guarantees.

Learners:

* DR: propensity on part 1, response ``mu(t, x)`` on part 2, doubly robust
  scores regressed on ``x`` over part 3.
* R: propensity on part 1, outcome ``eta(x)`` on part 2, weighted regression
  of ``(Y - eta) / (T - e)`` with weights ``(T - e)**2`` over part 3.
* S: one response model ``mu(t, x)`` on all rows; the effect is the constant
  ``f_T(1) - f_T(0)``.
"""

from __future__ import annotations

import asyncio
import logging
import threading

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from numpy.typing import ArrayLike

from dp_cate import dpgam
from dp_cate.accountant import PrivacyBudget
from dp_cate.config import (
    DEFAULT_RATIOS,
    DEFAULT_TARGET_RANGE,
    DEFAULT_TRIM,
    RATIO_TOLERANCE,
    BoostingParams,
)
from dp_cate.data_models import (
    TREATMENT_SPEC,
    FeatureSpec,
    FloatArray,
    IntArray,
    LearnerKind,
    Link,
    Observation,
    ObservationSet,
    as_feature_matrix,
)
from dp_cate.dpgam import AdditiveModel, ReleaseListener
from dp_cate.exceptions import (
    EmptyDataError,
    InsufficientDataError,
    InvalidInputError,
)
from dp_cate.tradeoff import TradeoffCurve, compose_parallel, zero_curve

logger = logging.getLogger(__name__)

TWO_STAGE_PARTS = 3


class Module(StrEnum):
    """Separately trained parts of a CATE fit."""

    PROPENSITY = "propensity"
    RESPONSE = "response"
    OUTCOME = "outcome"
    CATE = "cate"


LEARNER_MODULES: dict[LearnerKind, tuple[Module, ...]] = {
    LearnerKind.DR: (Module.PROPENSITY, Module.RESPONSE, Module.CATE),
    LearnerKind.R: (Module.PROPENSITY, Module.OUTCOME, Module.CATE),
    LearnerKind.S: (Module.RESPONSE,),
}

ModuleBudgets = PrivacyBudget | Mapping[str, PrivacyBudget | None] | None


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Assignment of every row to one part of a sample split."""

    ratios: tuple[float, ...]
    assignment: IntArray
    sizes: tuple[int, ...]

    @property
    def num_parts(self) -> int:
        return len(self.sizes)

    def part(self, index: int) -> IntArray:
        """Row indices of part ``index`` in ascending order."""
        return np.flatnonzero(self.assignment == index)

    def parts(self) -> list[IntArray]:
        return [self.part(index) for index in range(self.num_parts)]


def _part_sizes(n: int, ratios: Sequence[float]) -> tuple[int, ...]:
    raw = np.asarray(ratios, dtype=np.float64) * n
    sizes = np.floor(raw).astype(np.int64)
    shortfall = n - int(sizes.sum())
    # Largest remainders first; ties go to the earlier part.
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:shortfall]] += 1
    return tuple(int(size) for size in sizes)


def partition(
    data: ObservationSet | int,
    ratios: Sequence[float],
    seed: int | np.random.SeedSequence,
) -> SplitPlan:
    """Uniformly random split into parts of sizes ``round(ratio * n)``.

    Sizes use largest-remainder rounding so they sum to ``n``. Rows are
    shuffled with a seeded permutation and sliced contiguously, which is
    uniform over all partitions with those sizes.

    Raises:
        InvalidInputError: If the ratios are not positive or do not sum to 1.
        InsufficientDataError: If a part would be empty.
    """
    n = data if isinstance(data, int) else data.n
    if n < 1:
        raise EmptyDataError("cannot partition zero rows")
    if not ratios or any(ratio <= 0 for ratio in ratios):
        raise InvalidInputError(f"split ratios must be positive, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > RATIO_TOLERANCE:
        raise InvalidInputError(f"split ratios must sum to 1, got {sum(ratios)}")
    sizes = _part_sizes(n, ratios)
    if min(sizes) == 0:
        raise InsufficientDataError(
            f"splitting {n} rows by {tuple(ratios)} leaves an empty part"
        )
    permutation = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    start = 0
    for index, size in enumerate(sizes):
        assignment[permutation[start : start + size]] = index
        start += size
    assignment.flags.writeable = False
    logger.debug(f"Partitioned {n} rows into parts of sizes {sizes}")
    return SplitPlan(ratios=tuple(ratios), assignment=assignment, sizes=sizes)


def _outcome_treatment(z: Observation | ObservationSet) -> tuple[FloatArray, FloatArray]:
    if isinstance(z, Observation):
        return np.array([z.y], dtype=np.float64), np.array([z.t], dtype=np.float64)
    return z.y, z.t


def dr_pseudo_outcome(
    z: Observation | ObservationSet,
    e_hat: ArrayLike,
    mu1: ArrayLike,
    mu0: ArrayLike,
) -> FloatArray:
    """Doubly robust score of each row.

    ``psi = mu1 - mu0 + T (Y - mu1) / e - (1 - T) (Y - mu0) / (1 - e)``.
    A single :class:`Observation` yields a 0-d array.

    Raises:
        InvalidInputError: If a propensity lies outside ``(0, 1)``.
    """
    y, t = _outcome_treatment(z)
    e = np.asarray(e_hat, dtype=np.float64)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise InvalidInputError("propensity values must lie strictly in (0, 1)")
    m1 = np.asarray(mu1, dtype=np.float64)
    m0 = np.asarray(mu0, dtype=np.float64)
    psi = m1 - m0 + t * (y - m1) / e - (1.0 - t) * (y - m0) / (1.0 - e)
    return psi.reshape(()) if isinstance(z, Observation) else psi


def r_transform(
    z: Observation | ObservationSet, eta: ArrayLike, e_hat: ArrayLike
) -> tuple[FloatArray, FloatArray]:
    """Residual pair ``(Y - eta, T - e)``."""
    y, t = _outcome_treatment(z)
    y_residual = y - np.asarray(eta, dtype=np.float64)
    t_residual = t - np.asarray(e_hat, dtype=np.float64)
    if isinstance(z, Observation):
        return y_residual.reshape(()), t_residual.reshape(())
    return y_residual, t_residual


class AccessAudit:
    """Records which rows each module was trained on."""

    def __init__(self) -> None:
        self._rows: dict[str, IntArray] = {}
        self._lock = threading.Lock()

    def record(self, module: str, data: ObservationSet) -> ObservationSet:
        with self._lock:
            previous = self._rows.get(module, np.empty(0, dtype=np.int64))
            self._rows[module] = np.union1d(previous, data.row_ids)
        return data

    @property
    def modules(self) -> tuple[str, ...]:
        return tuple(self._rows)

    def rows(self, module: str) -> IntArray:
        return self._rows.get(module, np.empty(0, dtype=np.int64))

    def is_disjoint(self) -> bool:
        """True when no row was read by two modules."""
        seen = [self.rows(module) for module in self.modules]
        total = sum(rows.size for rows in seen)
        return total == np.unique(np.concatenate(seen)).size if seen else True

    def respects(self, plan: SplitPlan, modules: Sequence[str]) -> bool:
        """True when module ``i`` read only rows of part ``i``."""
        return all(
            np.all(plan.assignment[self.rows(module)] == index)
            for index, module in enumerate(modules)
        )


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """First-stage models; each field is set only when the learner needs it."""

    propensity_model: AdditiveModel | None = None
    response_model: AdditiveModel | None = None
    outcome_model: AdditiveModel | None = None
    trim: tuple[float, float] = DEFAULT_TRIM

    def propensity(self, x: ArrayLike) -> FloatArray:
        if self.propensity_model is None:
            raise InvalidInputError("this fit has no propensity model")
        low, high = self.trim
        return np.clip(dpgam.predict(self.propensity_model, x), low, high)

    def response(self, x: ArrayLike, treatment: float) -> FloatArray:
        if self.response_model is None:
            raise InvalidInputError("this fit has no response model")
        matrix = as_feature_matrix(x, self.response_model.num_features - 1)
        design = np.column_stack((np.full(matrix.shape[0], treatment), matrix))
        return dpgam.predict(self.response_model, design)

    def outcome(self, x: ArrayLike) -> FloatArray:
        if self.outcome_model is None:
            raise InvalidInputError("this fit has no outcome model")
        return dpgam.predict(self.outcome_model, x)

    def models(self) -> dict[str, AdditiveModel]:
        named = {
            Module.PROPENSITY.value: self.propensity_model,
            Module.RESPONSE.value: self.response_model,
            Module.OUTCOME.value: self.outcome_model,
        }
        return {name: model for name, model in named.items() if model is not None}


@dataclass(frozen=True, eq=False)
class CateModel:
    """A fitted meta-learner and the privacy guarantee of the whole fit."""

    kind: LearnerKind
    num_features: int
    nuisances: NuisanceSet
    module_curves: dict[str, TradeoffCurve]
    composed_privacy: TradeoffCurve
    second_stage: AdditiveModel | None = None
    constant: float | None = None
    split: SplitPlan | None = None
    audit: AccessAudit = field(default_factory=AccessAudit)

    def __post_init__(self) -> None:
        if (self.second_stage is None) == (self.constant is None):
            raise InvalidInputError("a CATE model has either a second stage or a constant")

    @property
    def release_count(self) -> int:
        models = list(self.nuisances.models().values())
        if self.second_stage is not None:
            models.append(self.second_stage)
        return sum(model.release_count for model in models)

    def modules(self) -> dict[str, AdditiveModel]:
        """Every fitted additive model keyed by module name."""
        models = self.nuisances.models()
        if self.second_stage is not None:
            models[Module.CATE.value] = self.second_stage
        return models

    def average_effect(self, x: ArrayLike) -> float:
        """Mean estimated effect over the supplied rows."""
        return float(np.mean(predict_cate(self, x)))


def predict_cate(model: CateModel, x: ArrayLike) -> FloatArray:
    """Estimated effect ``tau(x)``; a single feature vector yields a 0-d array.

    Raises:
        ArityMismatchError: If ``x`` does not have the fitted feature count.
    """
    single = np.ndim(x) == 1
    matrix = as_feature_matrix(x, model.num_features)
    if model.second_stage is not None:
        values = dpgam.predict(model.second_stage, matrix)
    else:
        values = np.full(matrix.shape[0], model.constant, dtype=np.float64)
    return values.reshape(()) if single else values


def module_budget(budgets: ModuleBudgets, module: str) -> PrivacyBudget | None:
    """Budget of one module: a shared budget, a per-module entry, or none."""
    if budgets is None or isinstance(budgets, PrivacyBudget):
        return budgets
    return budgets.get(module)


def module_curve(budget: PrivacyBudget | None) -> TradeoffCurve:
    return zero_curve() if budget is None else budget.curve()


def _require_rows(part: ObservationSet, num_bins: int, module: str) -> None:
    if part.n < num_bins:
        raise InsufficientDataError(
            f"the {module} part has {part.n} rows, fewer than {num_bins} bins; "
            f"use fewer bins or a larger sample"
        )


@dataclass(frozen=True)
class _FitContext:
    specs: tuple[FeatureSpec, ...]
    hyper: BoostingParams
    budgets: ModuleBudgets
    target_range: tuple[float, float]
    listener: ReleaseListener | None

    def response_specs(self) -> tuple[FeatureSpec, ...]:
        return (TREATMENT_SPEC, *self.specs)


async def _fit_module(
    context: _FitContext,
    module: Module,
    x: FloatArray,
    y: FloatArray,
    specs: Sequence[FeatureSpec],
    link: Link,
    seed: np.random.SeedSequence,
    weights: FloatArray | None = None,
) -> AdditiveModel:
    budget = module_budget(context.budgets, module.value)
    target_range = None if link is Link.LOGISTIC else context.target_range
    if weights is None:
        return await asyncio.to_thread(
            dpgam.fit,
            x,
            y,
            specs,
            budget,
            context.hyper,
            link,
            seed,
            target_range=target_range,
            listener=context.listener,
        )
    return await asyncio.to_thread(
        dpgam.fit_weighted,
        x,
        y,
        weights,
        specs,
        budget,
        context.hyper,
        link,
        seed,
        target_range=target_range,
        listener=context.listener,
    )


async def fit_cate_async(
    data: ObservationSet,
    kind: LearnerKind | str,
    budget: ModuleBudgets = None,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    hyper: BoostingParams | None = None,
    seed: int = 0,
    *,
    trim: tuple[float, float] = DEFAULT_TRIM,
    target_range: tuple[float, float] = DEFAULT_TARGET_RANGE,
    listener: ReleaseListener | None = None,
) -> CateModel:
    """Asynchronous form of :func:`fit_cate`; first-stage fits run concurrently."""
    kind = LearnerKind(kind)
    hyper = hyper or BoostingParams()
    context = _FitContext(
        specs=tuple(spec.with_bins(hyper.num_bins) for spec in data.feature_specs),
        hyper=hyper,
        budgets=budget,
        target_range=target_range,
        listener=listener,
    )
    split_seed, first_seed, second_seed, final_seed = np.random.SeedSequence(
        seed
    ).spawn(4)
    audit = AccessAudit()
    curves = {
        module.value: module_curve(module_budget(budget, module.value))
        for module in LEARNER_MODULES[kind]
    }

    if kind is LearnerKind.S:
        _require_rows(data, hyper.num_bins, Module.RESPONSE.value)
        audit.record(Module.RESPONSE.value, data)
        response = await _fit_module(
            context,
            Module.RESPONSE,
            data.design(),
            data.y,
            context.response_specs(),
            Link.IDENTITY,
            first_seed,
        )
        treatment_shape = response.shapes[0].values
        nuisances = NuisanceSet(response_model=response, trim=trim)
        model = CateModel(
            kind=kind,
            num_features=data.d,
            nuisances=nuisances,
            module_curves=curves,
            composed_privacy=compose_parallel(curves.values()),
            constant=float(treatment_shape[1] - treatment_shape[0]),
            audit=audit,
        )
        logger.info(f"Fitted S-learner on {data.n} rows, effect {model.constant:.4g}")
        return model

    if len(ratios) != TWO_STAGE_PARTS:
        raise InvalidInputError(
            f"the {kind.value}-learner needs {TWO_STAGE_PARTS} split ratios, "
            f"got {len(ratios)}"
        )
    split = partition(data, ratios, split_seed)
    modules = LEARNER_MODULES[kind]
    parts = [data.subset(rows) for rows in split.parts()]
    for module, part in zip(modules, parts, strict=True):
        _require_rows(part, hyper.num_bins, module.value)
        audit.record(module.value, part)
    propensity_part, nuisance_part, final_part = parts

    propensity_task = _fit_module(
        context,
        Module.PROPENSITY,
        propensity_part.x,
        propensity_part.t,
        context.specs,
        Link.LOGISTIC,
        first_seed,
    )
    if kind is LearnerKind.DR:
        nuisance_task = _fit_module(
            context,
            Module.RESPONSE,
            nuisance_part.design(),
            nuisance_part.y,
            context.response_specs(),
            Link.IDENTITY,
            second_seed,
        )
    else:
        nuisance_task = _fit_module(
            context,
            Module.OUTCOME,
            nuisance_part.x,
            nuisance_part.y,
            context.specs,
            Link.IDENTITY,
            second_seed,
        )
    propensity, nuisance = await asyncio.gather(propensity_task, nuisance_task)

    low, high = target_range
    if kind is LearnerKind.DR:
        nuisances = NuisanceSet(
            propensity_model=propensity, response_model=nuisance, trim=trim
        )
        psi = dr_pseudo_outcome(
            final_part,
            nuisances.propensity(final_part.x),
            nuisances.response(final_part.x, 1.0),
            nuisances.response(final_part.x, 0.0),
        )
        second_stage = await _fit_module(
            context,
            Module.CATE,
            final_part.x,
            np.clip(psi, low, high),
            context.specs,
            Link.IDENTITY,
            final_seed,
        )
    else:
        nuisances = NuisanceSet(
            propensity_model=propensity, outcome_model=nuisance, trim=trim
        )
        y_residual, t_residual = r_transform(
            final_part,
            nuisances.outcome(final_part.x),
            nuisances.propensity(final_part.x),
        )
        second_stage = await _fit_module(
            context,
            Module.CATE,
            final_part.x,
            np.clip(y_residual / t_residual, low, high),
            context.specs,
            Link.IDENTITY,
            final_seed,
            weights=t_residual**2,
        )

    logger.info(
        f"Fitted {kind.value}-learner on {data.n} rows split {split.sizes}"
    )
    return CateModel(
        kind=kind,
        num_features=data.d,
        nuisances=nuisances,
        module_curves=curves,
        composed_privacy=compose_parallel(curves.values()),
        second_stage=second_stage,
        split=split,
        audit=audit,
    )


def fit_cate(
    data: ObservationSet,
    kind: LearnerKind | str,
    budget: ModuleBudgets = None,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    hyper: BoostingParams | None = None,
    seed: int = 0,
    *,
    trim: tuple[float, float] = DEFAULT_TRIM,
    target_range: tuple[float, float] = DEFAULT_TARGET_RANGE,
    listener: ReleaseListener | None = None,
) -> CateModel:
    """Fit a DR-, R- or S-learner.

    Args:
        data: Training rows with public feature bounds.
        kind: Which meta-learner to fit.
        budget: One budget for every module, a mapping from module name
            (``propensity``, ``response``, ``outcome``, ``cate``) to budget,
            or ``None`` for a non-private fit.
        ratios: Split fractions of the two-stage learners; ignored by S.
        hyper: Booster hyperparameters; ``num_bins`` overrides the data's
            bin counts.
        seed: Root seed of the split and of every module's noise.
        trim: Bounds applied to propensity predictions before transforming.
        target_range: Public range of outcomes and transformed targets.
        listener: Receives every noisy release of every module.

    Returns:
        The fitted model with its composed privacy curve and access audit.

    Raises:
        InsufficientDataError: If a part has fewer rows than bins.
        InvalidInputError: For malformed ratios or data.

    Must not be called from a running event loop; use
    :func:`fit_cate_async` there.
    """
    return asyncio.run(
        fit_cate_async(
            data,
            kind,
            budget,
            ratios,
            hyper,
            seed,
            trim=trim,
            target_range=target_range,
            listener=listener,
        )
    )
