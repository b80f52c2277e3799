"""Transformed-instrument IV estimation for randomized saturation experiments.

The feasible estimator plugs the leave-one-out take-up/offer ratio Chat into
the design-implied moment matrices, transforms the endogenous regressors into
instruments Zhat = R(Chat, N)^+ W, and solves the just-identified IV system
with standard errors clustered by group.  Designs with a 0% saturation are
handled either by dropping pure-control groups (with moments conditioned on
S > 0) or by augmenting the instruments with a pure-control indicator and
solving the over-identified system by two-stage least squares.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import f as f_dist

from . import moments
from .design import SaturationDesign
from .dgp import ExperimentData, GroupData
from .errors import SingularSystemError, ValidationError
from .model import LABEL_COMPLIER, BasisSpec, MeanCoefficients

TARGET_JOINT = "joint"
TARGET_COMPLIER_PSI = "complier_psi"
TARGET_NEVER_TAKER = "never_taker"
TARGET_POPULATION = "population"
TARGET_COMPLIER_THETA = "complier_theta"
TARGET_NAIVE = "naive_iv"

RS_TARGETS = (TARGET_JOINT, TARGET_COMPLIER_PSI, TARGET_NEVER_TAKER, TARGET_POPULATION)
ALL_TARGETS = RS_TARGETS + (TARGET_COMPLIER_THETA, TARGET_NAIVE)

COND_LIMIT = 1e12
CSV_HEADER = ("group_id", "saturation", "z", "d", "y")


@dataclass
class EstimatorDiagnostics:
    """Numerical health indicators collected while building instruments."""

    n_pseudo_inverted: int = 0
    min_abs_det_r: float = math.inf
    cond_a: float = math.nan


@dataclass
class EstimateResult:
    target: str
    coefficients: np.ndarray
    vcov: np.ndarray
    G_used: int
    N_used: int
    diagnostics: EstimatorDiagnostics = field(default_factory=EstimatorDiagnostics)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))


@dataclass
class InstrumentSet:
    """Per-individual regressors, instrument building blocks, and instruments."""

    x: np.ndarray
    w: np.ndarray
    zhat: np.ndarray
    n_pseudo_inverted: int
    min_abs_det_r: float


@dataclass
class IORTestResult:
    """Regression-based test that take-up among the offered is saturation-free."""

    saturations: tuple[float, ...]
    offered_counts: tuple[int, ...]
    take_up_rates: tuple[float, ...]
    wald: float
    df: int
    n_clusters: int
    p_value: float


def estimate_chat(z: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Leave-one-out complier share estimate for one group.

    Chat_i = Dbar_i / Zbar_i where any neighbor was offered, else 0.
    """
    z = np.asarray(z, dtype=float)
    d = np.asarray(d, dtype=float)
    num = d.sum() - d
    den = z.sum() - z
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def compliance_rate(data: ExperimentData) -> float:
    """Sample take-up rate among offered individuals (the estimate of E[C])."""
    offered = data.z.sum()
    if offered == 0:
        raise ValidationError("no offered individuals; compliance rate undefined")
    return float(data.d.sum() / offered)


# ---------------------------------------------------------------------------
# internal estimation machinery
# ---------------------------------------------------------------------------


class _Rows:
    """Flat per-row arrays in a canonical order.

    Rows are sorted by (group, z, d, y) so that all sums are computed in an
    order invariant to permutations of individuals within a group, making
    estimates bit-stable.
    """

    def __init__(self, data: ExperimentData, sort: bool = True):
        gidx = data.group_index
        if sort:
            order = np.lexsort((data.y, data.d, data.z, gidx))
        else:
            order = np.arange(len(gidx))
        self.order = order
        self.y = data.y[order]
        self.z = data.z[order]
        self.d = data.d[order]
        self.saturation = data.saturation[order]
        self.n_per_row = data.n_per_row[order]
        self.gidx = gidx[order]
        self.sizes = data.sizes
        self.starts = data.starts
        self.group_ids = tuple(g.group_id for g in data.groups)
        self.n_groups = data.n_groups
        sum_d = np.add.reduceat(self.d, self.starts)[self.gidx]
        sum_z = np.add.reduceat(self.z, self.starts)[self.gidx]
        self.dbar = (sum_d - self.d) / (self.n_per_row - 1)
        zbar_num = sum_z - self.z
        self.zbar = zbar_num / (self.n_per_row - 1)
        self.chat = np.divide(
            sum_d - self.d, zbar_num, out=np.zeros_like(self.d), where=zbar_num > 0
        )
        self._cbar_true = None
        if data.has_latent:
            self._cbar_true = data.cbar_true[order]

    def cbar(self, chat_policy: str) -> np.ndarray:
        if chat_policy == "estimate":
            return self.chat
        if chat_policy == "oracle":
            if self._cbar_true is None:
                raise ValidationError("oracle chat policy requires latent complier flags")
            return self._cbar_true
        raise ValidationError(f"unknown chat policy {chat_policy!r}")

    def group_scores(self, contribs: np.ndarray) -> np.ndarray:
        """Per-group sums of per-row score contributions, in group order."""
        return np.add.reduceat(contribs, self.starts, axis=0)


class _QCache:
    """Memoized exact Q_z matrices at integer complier counts for one design."""

    def __init__(self, basis: BasisSpec, design: SaturationDesign):
        self.basis = basis
        self.design = design
        self._cache: dict[tuple[int, int, int], np.ndarray] = {}

    def at_count(self, count: int, n: int, z: int) -> np.ndarray:
        key = (count, n, z)
        out = self._cache.get(key)
        if out is None:
            out = moments.q_z_at_count(self.basis, count, n, self.design, z)
            self._cache[key] = out
        return out

    def blocks(self, cbar: float, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Extended (Q0, Q1) at a possibly non-integer (n-1)*cbar."""
        count = (n - 1) * cbar
        lower = math.floor(count)
        if abs(count - round(count)) <= moments.INTEGER_TOL:
            m = round(count)
            return self.at_count(m, n, 0), self.at_count(m, n, 1)
        omega = count - lower
        q0 = (1 - omega) * self.at_count(lower, n, 0) + omega * self.at_count(lower + 1, n, 0)
        q1 = (1 - omega) * self.at_count(lower, n, 1) + omega * self.at_count(lower + 1, n, 1)
        return q0, q1


def _pinv_with_flag(mat: np.ndarray) -> tuple[np.ndarray, bool]:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    cutoff = moments.PINV_RTOL * max(float(np.abs(vals).max()), 1.0)
    keep = np.abs(vals) > cutoff
    inv_vals = np.zeros_like(vals)
    inv_vals[keep] = 1.0 / vals[keep]
    pinv = (vecs * inv_vals) @ vecs.T
    return (pinv + pinv.T) / 2.0, not bool(keep.all())


def _target_arrays(
    rows: _Rows, basis: BasisSpec, target: str
) -> tuple[np.ndarray, np.ndarray]:
    """Regressors X and instrument building blocks W per the estimator table."""
    f = basis.values(rows.dbar)
    if target == TARGET_JOINT:
        x = np.hstack([f, rows.d[:, None] * f])
        w = np.hstack([f, rows.z[:, None] * f])
    elif target == TARGET_COMPLIER_PSI:
        x = f
        w = rows.d[:, None] * f
    elif target == TARGET_NEVER_TAKER:
        x = f
        w = (rows.z * (1.0 - rows.d))[:, None] * f
    elif target == TARGET_POPULATION:
        x = f
        w = (1.0 - rows.z)[:, None] * f
    else:
        raise ValidationError(f"unknown RS-IV target {target!r}")
    return x, w


def _transform_instruments(
    rows: _Rows,
    basis: BasisSpec,
    qcache: _QCache,
    target: str,
    cbar: np.ndarray,
    w: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, int, float]:
    """Zhat = R(cbar, n)^+ W row by row, grouping rows that share (cbar, n)."""
    if mask is None:
        mask = np.ones(len(cbar), dtype=bool)
    keys = np.column_stack([cbar[mask], rows.n_per_row[mask]])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    p = w.shape[1]
    rp = np.empty((len(uniq), p, p))
    deficient = np.zeros(len(uniq), dtype=bool)
    dets = np.empty(len(uniq))
    for u, (cb, n) in enumerate(uniq):
        q0, q1 = qcache.blocks(float(cb), int(n))
        if target == TARGET_JOINT:
            r = moments.assemble_q(q0, q1)
        elif target == TARGET_POPULATION:
            r = q0
        else:
            r = q1
        dets[u] = np.linalg.det(r)
        rp[u], deficient[u] = _pinv_with_flag(r)
    zhat = np.zeros_like(w)
    zhat[mask] = np.einsum("nij,nj->ni", rp[inv.ravel()], w[mask])
    n_pseudo = int(deficient[inv.ravel()].sum())
    min_det = float(np.abs(dets).min()) if len(dets) else math.inf
    return zhat, n_pseudo, min_det


def _check_clusters(rows: _Rows) -> None:
    if rows.n_groups < 2:
        raise ValidationError("need at least two clusters (groups)")


def _require_well_conditioned(cond: float, what: str) -> None:
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        raise SingularSystemError(
            f"{what} is singular (condition number {cond:.3e})",
            condition_number=float(cond),
        )


def _cluster_sandwich(
    a: np.ndarray,
    scores: np.ndarray,
    df_correction: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """CR0 sandwich: A^{-1} (sum_g s_g s_g') A^{-T}, optionally scaled by G/(G-1)."""
    ainv = np.linalg.inv(a)
    meat = scores.T @ scores
    if df_correction:
        g = scores.shape[0]
        meat = meat * (g / (g - 1))
    vcov = ainv @ meat @ ainv.T
    return (vcov + vcov.T) / 2.0, ainv


@dataclass
class _CoreResult:
    result: EstimateResult
    influence: np.ndarray  # (G, p) per-group influence contributions
    group_ids: tuple[int, ...]


def _solve_just_identified(
    rows: _Rows,
    x: np.ndarray,
    zhat: np.ndarray,
    target: str,
    diag: EstimatorDiagnostics,
    df_correction: bool,
) -> _CoreResult:
    _check_clusters(rows)
    a = zhat.T @ x
    diag.cond_a = float(np.linalg.cond(a))
    _require_well_conditioned(diag.cond_a, "instrument-regressor cross-product")
    coef = np.linalg.solve(a, zhat.T @ rows.y)
    u = rows.y - x @ coef
    scores = rows.group_scores(zhat * u[:, None])
    vcov, ainv = _cluster_sandwich(a, scores, df_correction)
    result = EstimateResult(
        target=target,
        coefficients=coef,
        vcov=vcov,
        G_used=rows.n_groups,
        N_used=len(rows.y),
        diagnostics=diag,
    )
    return _CoreResult(result, scores @ ainv.T, rows.group_ids)


def _solve_2sls(
    rows: _Rows,
    x: np.ndarray,
    zmat: np.ndarray,
    yv: np.ndarray,
    target: str,
    diag: EstimatorDiagnostics,
    df_correction: bool,
) -> _CoreResult:
    """Over-identified linear GMM with the 2SLS weight (Z'Z)^{-1}."""
    _check_clusters(rows)
    zz = zmat.T @ zmat
    _require_well_conditioned(float(np.linalg.cond(zz)), "instrument cross-product")
    proj = np.linalg.solve(zz, zmat.T @ x)
    xhat = zmat @ proj
    a = xhat.T @ x
    diag.cond_a = float(np.linalg.cond(a))
    _require_well_conditioned(diag.cond_a, "first-stage cross-product")
    coef = np.linalg.solve(a, xhat.T @ yv)
    u = yv - x @ coef
    scores = rows.group_scores(xhat * u[:, None])
    vcov, ainv = _cluster_sandwich(a, scores, df_correction)
    result = EstimateResult(
        target=target,
        coefficients=coef,
        vcov=vcov,
        G_used=rows.n_groups,
        N_used=len(yv),
        diagnostics=diag,
    )
    return _CoreResult(result, scores @ ainv.T, rows.group_ids)


def _validate_inputs(data: ExperimentData, design: SaturationDesign, basis: BasisSpec) -> None:
    if not design.interior_saturations:
        raise ValidationError("design has no interior saturation; effects not identified")
    valid = np.asarray(design.saturations)
    for g in data.groups:
        if np.abs(valid - g.saturation).min() > 1e-9:
            raise ValidationError(
                f"group {g.group_id}: saturation {g.saturation} not in the design"
            )


def _core_rsiv(
    rows: _Rows,
    basis: BasisSpec,
    qcache: _QCache,
    target: str,
    chat_policy: str,
    df_correction: bool,
) -> _CoreResult:
    x, w = _target_arrays(rows, basis, target)
    cbar = rows.cbar(chat_policy)
    zhat, n_pseudo, min_det = _transform_instruments(rows, basis, qcache, target, cbar, w)
    diag = EstimatorDiagnostics(n_pseudo_inverted=n_pseudo, min_abs_det_r=min_det)
    return _solve_just_identified(rows, x, zhat, target, diag, df_correction)


def _core_pure_control(
    rows: _Rows,
    basis: BasisSpec,
    qcache: _QCache,
    target: str,
    chat_policy: str,
    df_correction: bool,
) -> _CoreResult:
    if target not in (TARGET_JOINT, TARGET_POPULATION):
        raise ValidationError("pure-control GMM applies to the joint and population targets")
    pos = rows.saturation > 0.0
    if not pos.any():
        raise ValidationError("all groups are pure control; nothing to estimate")
    if pos.all():
        raise ValidationError("pure-control estimator requires pure-control groups in the data")
    x, w = _target_arrays(rows, basis, target)
    cbar = rows.cbar(chat_policy)
    zhat, n_pseudo, min_det = _transform_instruments(
        rows, basis, qcache, target, cbar, w, mask=pos
    )
    p = x.shape[1]
    zmat = np.zeros((len(rows.y), p + 1))
    zmat[:, :p] = zhat
    zmat[~pos, p] = 1.0
    if target == TARGET_POPULATION:
        x = (1.0 - rows.z)[:, None] * x
        yv = (1.0 - rows.z) * rows.y
    else:
        yv = rows.y
    diag = EstimatorDiagnostics(n_pseudo_inverted=n_pseudo, min_abs_det_r=min_det)
    return _solve_2sls(rows, x, zmat, yv, target, diag, df_correction)


# ---------------------------------------------------------------------------
# public estimators
# ---------------------------------------------------------------------------


def build_instruments(
    data: ExperimentData,
    basis: BasisSpec,
    design: SaturationDesign,
    target: str,
    chat_policy: str = "estimate",
) -> InstrumentSet:
    """Per-individual (X, W, Zhat) arrays in data row order for one target."""
    _validate_inputs(data, design, basis)
    if target not in RS_TARGETS:
        raise ValidationError(f"instruments defined for RS-IV targets only, not {target!r}")
    condition = design.has_pure_control
    design_eff = design.positive_part() if condition else design
    rows = _Rows(data, sort=False)
    qcache = _QCache(basis, design_eff)
    x, w = _target_arrays(rows, basis, target)
    cbar = rows.cbar(chat_policy)
    mask = rows.saturation > 0.0 if condition else None
    zhat, n_pseudo, min_det = _transform_instruments(
        rows, basis, qcache, target, cbar, w, mask=mask
    )
    return InstrumentSet(x, w, zhat, n_pseudo, min_det)


def complier_theta(
    population: EstimateResult, never_taker: EstimateResult, compliance: float
) -> MeanCoefficients:
    """Complier untreated-arm means from the population/never-taker estimates.

    E[theta|C=1] = E[theta|C=0] + (E[theta] - E[theta|C=0]) / E[C].
    """
    if not 0.0 < compliance < 1.0:
        raise ValidationError("compliance rate must lie strictly inside (0, 1)")
    pop = np.asarray(population.coefficients)
    nt = np.asarray(never_taker.coefficients)
    if pop.shape != nt.shape:
        raise ValidationError("population and never-taker estimates must have equal length")
    theta_c = nt + (pop - nt) / compliance
    return MeanCoefficients(LABEL_COMPLIER, theta_mean=tuple(float(v) for v in theta_c))


def _derive_complier_theta(
    data: ExperimentData,
    pop_core: _CoreResult,
    nt_core: _CoreResult,
) -> EstimateResult:
    """Delta-method vcov for the derived complier theta.

    Stacks the per-group influence contributions of the population and
    never-taker estimators with that of the compliance rate, then pushes the
    joint clustered covariance through the identity
    theta_c = theta_n + (theta - theta_n) / E[C].
    """
    rate = compliance_rate(data)
    if rate >= 1.0:
        raise ValidationError("full compliance: complier theta is not separately identified")
    k = len(pop_core.result.coefficients)
    all_ids = tuple(g.group_id for g in data.groups)
    pos = {gid: i for i, gid in enumerate(all_ids)}
    h = np.zeros((len(all_ids), 2 * k + 1))
    for core, sl in ((nt_core, slice(0, k)), (pop_core, slice(k, 2 * k))):
        for gid, infl in zip(core.group_ids, core.influence):
            h[pos[gid], sl] = infl
    total_z = data.z.sum()
    for i, g in enumerate(data.groups):
        h[i, 2 * k] = float((g.z * (g.d - rate)).sum()) / total_z

    theta_n = np.asarray(nt_core.result.coefficients)
    theta_pop = np.asarray(pop_core.result.coefficients)
    theta_c = theta_n + (theta_pop - theta_n) / rate
    jac = np.zeros((k, 2 * k + 1))
    jac[:, :k] = (1.0 - 1.0 / rate) * np.eye(k)
    jac[:, k : 2 * k] = (1.0 / rate) * np.eye(k)
    jac[:, 2 * k] = -(theta_pop - theta_n) / rate**2
    joint = h.T @ h
    vcov = jac @ joint @ jac.T
    diag = EstimatorDiagnostics(
        n_pseudo_inverted=pop_core.result.diagnostics.n_pseudo_inverted
        + nt_core.result.diagnostics.n_pseudo_inverted,
        min_abs_det_r=min(
            pop_core.result.diagnostics.min_abs_det_r,
            nt_core.result.diagnostics.min_abs_det_r,
        ),
        cond_a=max(
            pop_core.result.diagnostics.cond_a, nt_core.result.diagnostics.cond_a
        ),
    )
    return EstimateResult(
        target=TARGET_COMPLIER_THETA,
        coefficients=theta_c,
        vcov=(vcov + vcov.T) / 2.0,
        G_used=pop_core.result.G_used,
        N_used=pop_core.result.N_used,
        diagnostics=diag,
    )


def _estimate_cores(
    data: ExperimentData,
    basis: BasisSpec,
    design: SaturationDesign,
    targets,
    pure_control: str,
    chat_policy: str,
    df_correction: bool,
) -> dict[str, _CoreResult]:
    _validate_inputs(data, design, basis)
    if pure_control not in ("gmm", "drop"):
        raise ValidationError("pure_control policy must be 'gmm' or 'drop'")
    has_zero = design.has_pure_control
    condition = has_zero
    design_eff = design.positive_part() if condition else design
    qcache = _QCache(basis, design_eff)

    rows_full = None
    rows_dropped = None

    def full_rows() -> _Rows:
        nonlocal rows_full
        if rows_full is None:
            rows_full = _Rows(data)
        return rows_full

    def dropped_rows() -> _Rows:
        nonlocal rows_dropped
        if rows_dropped is None:
            rows_dropped = _Rows(data.drop_pure_control() if has_zero else data)
        return rows_dropped

    cores: dict[str, _CoreResult] = {}
    for target in targets:
        if target not in RS_TARGETS:
            raise ValidationError(f"unknown RS-IV target {target!r}")
        use_gmm = (
            has_zero
            and pure_control == "gmm"
            and data.has_pure_control_groups
            and target in (TARGET_JOINT, TARGET_POPULATION)
        )
        if use_gmm:
            cores[target] = _core_pure_control(
                full_rows(), basis, qcache, target, chat_policy, df_correction
            )
        else:
            cores[target] = _core_rsiv(
                dropped_rows(), basis, qcache, target, chat_policy, df_correction
            )
    return cores


def rsiv_estimate(
    data: ExperimentData,
    basis: BasisSpec,
    design: SaturationDesign,
    target: str,
    *,
    pure_control: str = "gmm",
    chat_policy: str = "estimate",
    df_correction: bool = False,
) -> EstimateResult:
    """The RS-IV estimator for one target.

    ``pure_control`` selects how 0% saturation groups are handled when the
    design includes them: "gmm" augments the instruments per the pure-control
    construction (joint and population targets), "drop" discards those groups
    and conditions the moment matrices on S > 0.
    """
    if target == TARGET_NAIVE:
        return naive_iv(data, df_correction=df_correction)
    if target == TARGET_COMPLIER_THETA:
        return rsiv_complier_theta(
            data,
            basis,
            design,
            pure_control=pure_control,
            chat_policy=chat_policy,
            df_correction=df_correction,
        )
    cores = _estimate_cores(
        data, basis, design, (target,), pure_control, chat_policy, df_correction
    )
    return cores[target].result


def rsiv_pure_control(
    data: ExperimentData,
    basis: BasisSpec,
    design: SaturationDesign,
    target: str,
    *,
    chat_policy: str = "estimate",
    df_correction: bool = False,
) -> EstimateResult:
    """Over-identified 2SLS using pure-control groups as extra instruments."""
    _validate_inputs(data, design, basis)
    if not design.has_pure_control:
        raise ValidationError("design has no 0% saturation; use rsiv_estimate")
    if not data.has_pure_control_groups:
        raise ValidationError("data has no pure-control groups")
    qcache = _QCache(basis, design.positive_part())
    core = _core_pure_control(_Rows(data), basis, qcache, target, chat_policy, df_correction)
    return core.result


def rsiv_complier_theta(
    data: ExperimentData,
    basis: BasisSpec,
    design: SaturationDesign,
    *,
    pure_control: str = "gmm",
    chat_policy: str = "estimate",
    df_correction: bool = False,
) -> EstimateResult:
    """Complier untreated-arm means, derived from the population and
    never-taker targets with a joint delta-method clustered covariance."""
    rate = compliance_rate(data)
    if not 0.0 < rate < 1.0:
        raise ValidationError(
            f"compliance rate {rate} is degenerate; complier theta not separately identified"
        )
    cores = _estimate_cores(
        data,
        basis,
        design,
        (TARGET_NEVER_TAKER, TARGET_POPULATION),
        pure_control,
        chat_policy,
        df_correction,
    )
    return _derive_complier_theta(
        data, cores[TARGET_POPULATION], cores[TARGET_NEVER_TAKER]
    )


def estimate_all(
    data: ExperimentData,
    basis: BasisSpec,
    design: SaturationDesign,
    *,
    pure_control: str = "gmm",
    chat_policy: str = "estimate",
    df_correction: bool = False,
    include_naive: bool = True,
) -> dict[str, EstimateResult]:
    """All RS-IV targets, the derived complier theta, and (optionally) naive IV."""
    cores = _estimate_cores(
        data, basis, design, RS_TARGETS, pure_control, chat_policy, df_correction
    )
    out = {t: cores[t].result for t in RS_TARGETS}
    out[TARGET_COMPLIER_THETA] = _derive_complier_theta(
        data, cores[TARGET_POPULATION], cores[TARGET_NEVER_TAKER]
    )
    if include_naive:
        out[TARGET_NAIVE] = naive_iv(data, df_correction=df_correction)
    return out


def naive_iv(data: ExperimentData, *, df_correction: bool = False) -> EstimateResult:
    """IV regression of Y on (1, D, Dbar, D*Dbar) with instruments (1, Z, S, ZS)."""
    rows = _Rows(data)
    _check_clusters(rows)
    x = np.column_stack([np.ones_like(rows.y), rows.d, rows.dbar, rows.d * rows.dbar])
    zmat = np.column_stack(
        [np.ones_like(rows.y), rows.z, rows.saturation, rows.z * rows.saturation]
    )
    a = zmat.T @ x
    diag = EstimatorDiagnostics(n_pseudo_inverted=0, min_abs_det_r=math.nan)
    diag.cond_a = float(np.linalg.cond(a))
    _require_well_conditioned(diag.cond_a, "naive IV cross-product")
    coef = np.linalg.solve(a, zmat.T @ rows.y)
    u = rows.y - x @ coef
    scores = rows.group_scores(zmat * u[:, None])
    vcov, _ = _cluster_sandwich(a, scores, df_correction)
    return EstimateResult(
        target=TARGET_NAIVE,
        coefficients=coef,
        vcov=vcov,
        G_used=rows.n_groups,
        N_used=len(rows.y),
        diagnostics=diag,
    )


def ior_test(data: ExperimentData) -> IORTestResult:
    """Test that take-up among offered individuals does not vary with saturation.

    On the Z=1 subsample, regress D on an intercept plus saturation-bin
    dummies (lowest bin excluded) and Wald-test the dummies with a
    cluster-robust covariance.  Uses the standard small-sample cluster
    correction and an F(df, G-1) reference distribution so the test holds
    size at a few hundred clusters.
    """
    rows = _Rows(data)
    offered = rows.z == 1.0
    if not offered.any():
        raise ValidationError("no offered individuals; IOR test undefined")
    sats = np.unique(rows.saturation[offered])
    if len(sats) < 2:
        raise ValidationError("IOR test needs at least two saturation bins with offers")
    d = rows.d[offered]
    sat = rows.saturation[offered]
    g = rows.gidx[offered]
    dummies = np.column_stack([(sat == s).astype(float) for s in sats[1:]])
    x = np.column_stack([np.ones_like(d), dummies])
    xtx = x.T @ x
    coef = np.linalg.solve(xtx, x.T @ d)
    u = d - x @ coef
    # cluster scores on the subsample
    order = np.argsort(g, kind="stable")
    xs = (x * u[:, None])[order]
    gs = g[order]
    cuts = np.concatenate([[0], np.where(np.diff(gs) != 0)[0] + 1])
    scores = np.add.reduceat(xs, cuts, axis=0)
    n_clusters = scores.shape[0]
    if n_clusters < 2:
        raise ValidationError("IOR test needs offered individuals in at least two groups")
    n_obs, n_par = x.shape
    correction = (n_clusters / (n_clusters - 1)) * ((n_obs - 1) / (n_obs - n_par))
    xtx_inv = np.linalg.inv(xtx)
    vcov = correction * (xtx_inv @ (scores.T @ scores) @ xtx_inv.T)
    b = coef[1:]
    vb = vcov[1:, 1:]
    wald = float(b @ np.linalg.solve(vb, b))
    df = len(sats) - 1
    p = float(f_dist.sf(wald / df, df, n_clusters - 1))
    rates = tuple(float(d[sat == s].mean()) for s in sats)
    counts = tuple(int((sat == s).sum()) for s in sats)
    return IORTestResult(
        saturations=tuple(float(s) for s in sats),
        offered_counts=counts,
        take_up_rates=rates,
        wald=wald,
        df=df,
        n_clusters=n_clusters,
        p_value=p,
    )


def ingest_csv(path) -> ExperimentData:
    """Read the data CSV (header group_id,saturation,z,d,y), validating each row."""
    groups: dict[int, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValidationError(
                f"bad header {header}; expected {','.join(CSV_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ValidationError(f"row {lineno}: expected 5 fields, got {len(row)}")
            try:
                gid = int(row[0])
                sat = float(row[1])
                z = int(row[2])
                d = int(row[3])
                y = float(row[4])
            except ValueError as exc:
                raise ValidationError(f"row {lineno}: {exc}") from None
            if z not in (0, 1) or d not in (0, 1):
                raise ValidationError(f"row {lineno}: z and d must be 0 or 1")
            if d > z:
                raise ValidationError(
                    f"row {lineno}: one-sided compliance violated (d=1 with z=0)"
                )
            if not 0.0 <= sat <= 1.0:
                raise ValidationError(f"row {lineno}: saturation {sat} outside [0, 1]")
            if not math.isfinite(y):
                raise ValidationError(f"row {lineno}: outcome must be finite")
            rec = groups.get(gid)
            if rec is None:
                groups[gid] = {"sat": sat, "z": [z], "d": [d], "y": [y], "line": lineno}
            else:
                if rec["sat"] != sat:
                    raise ValidationError(
                        f"row {lineno}: saturation differs within group {gid}"
                    )
                rec["z"].append(z)
                rec["d"].append(d)
                rec["y"].append(y)
    if not groups:
        raise ValidationError("data file contains no rows")
    out = []
    for gid, rec in groups.items():
        if len(rec["z"]) < 2:
            raise ValidationError(
                f"group {gid} has a single member (first row {rec['line']}); need at least two"
            )
        out.append(
            GroupData(
                group_id=gid,
                saturation=rec["sat"],
                z=np.array(rec["z"], dtype=np.int8),
                d=np.array(rec["d"], dtype=np.int8),
                y=np.array(rec["y"], dtype=float),
            )
        )
    return ExperimentData(out)
