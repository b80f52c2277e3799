"""Monte Carlo harness: replicate simulate -> estimate, report bias/SD/coverage.

Replication r draws its entire experiment from the splittable seed
(root, r), so reports are identical for any degree of parallelism and the
per-replication results can be combined in index order for bit-stable output.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import dgp, estimator
from .dgp import SimConfig
from .errors import SingularSystemError, ValidationError
from .model import LABEL_COMPLIER, LABEL_NEVER_TAKER, LABEL_POPULATION, linear_basis
from .streams import replication_seed

Z_95 = 1.959963984540054

RS_ROWS = ("alpha", "gamma", "alpha_n", "gamma_n", "alpha_c", "beta_c", "gamma_c", "delta_c")
NAIVE_ROWS = ("naive_alpha", "naive_beta", "naive_gamma", "naive_delta")

ESTIMATOR_RS = "rs_iv"
ESTIMATOR_NAIVE = "naive"


@dataclass
class MCRow:
    name: str
    truth: float
    mean: float
    sd: float
    coverage: float | None


@dataclass
class MCReport:
    rows: list[MCRow]
    reps: int
    reps_used: int
    n_singular_excluded: int
    estimators: tuple[str, ...]
    pure_control: str
    config: dict
    runtime_seconds: float
    per_replication: list[dict[str, tuple[float, float]] | None]


def config_dict(cfg: SimConfig) -> dict:
    """JSON-friendly echo of a simulation config."""
    out = {
        "G": cfg.G,
        "n": cfg.n,
        "design": {
            "saturations": list(cfg.design.saturations),
            **(
                {"counts": list(cfg.design.counts)}
                if cfg.design.counts is not None
                else {"probs": list(cfg.design.weights)}
            ),
        },
        "means": list(cfg.means),
        "kappa": list(cfg.kappa),
        "sigma": list(cfg.sigma),
        "complier_shares": list(cfg.complier_shares),
        "share_probs": list(cfg.probs),
        "seed": cfg.seed if isinstance(cfg.seed, int) else list(cfg.seed),
    }
    return out


def oracle_truths(
    cfg: SimConfig, estimators=(ESTIMATOR_RS, ESTIMATOR_NAIVE), oracle_draws: int = 10**6
) -> dict[str, float]:
    """Ground-truth parameter values from the brute-force DGP oracle.

    Naive rows are measured against the causal truths (so their coverage
    reflects the bias of the naive estimands for the spillover terms).
    """
    means = dgp.oracle_subpopulation_means(cfg, oracle_draws)
    pop = means[LABEL_POPULATION]
    com = means[LABEL_COMPLIER]
    nt = means[LABEL_NEVER_TAKER]
    truths = {
        "alpha": pop.theta_mean[0],
        "gamma": pop.theta_mean[1],
        "alpha_n": nt.theta_mean[0],
        "gamma_n": nt.theta_mean[1],
        "alpha_c": com.theta_mean[0],
        "gamma_c": com.theta_mean[1],
        "beta_c": com.contrast_mean[0],
        "delta_c": com.contrast_mean[1],
    }
    if ESTIMATOR_NAIVE in estimators:
        truths.update(
            {
                "naive_alpha": pop.theta_mean[0],
                "naive_beta": com.contrast_mean[0],
                "naive_gamma": pop.theta_mean[1],
                "naive_delta": com.contrast_mean[1],
            }
        )
    return truths


def replicate_once(
    cfg: SimConfig, rep: int, estimators=(ESTIMATOR_RS, ESTIMATOR_NAIVE), pure_control="gmm"
) -> dict[str, tuple[float, float]] | None:
    """One simulate -> estimate replication; None if the system was singular."""
    rep_cfg = replace(cfg, seed=replication_seed(cfg.seed, rep))
    data = dgp.simulate_experiment(rep_cfg)
    basis = linear_basis()
    out: dict[str, tuple[float, float]] = {}
    try:
        if ESTIMATOR_RS in estimators:
            res = estimator.estimate_all(
                data, basis, cfg.design, pure_control=pure_control, include_naive=False
            )
            joint = res[estimator.TARGET_JOINT]
            nt = res[estimator.TARGET_NEVER_TAKER]
            ct = res[estimator.TARGET_COMPLIER_THETA]
            for i, name in enumerate(("alpha", "gamma", "beta_c", "delta_c")):
                out[name] = (float(joint.coefficients[i]), float(joint.se[i]))
            for i, name in enumerate(("alpha_n", "gamma_n")):
                out[name] = (float(nt.coefficients[i]), float(nt.se[i]))
            for i, name in enumerate(("alpha_c", "gamma_c")):
                out[name] = (float(ct.coefficients[i]), float(ct.se[i]))
        if ESTIMATOR_NAIVE in estimators:
            nv = estimator.naive_iv(data)
            for i, name in enumerate(NAIVE_ROWS):
                out[name] = (float(nv.coefficients[i]), float(nv.se[i]))
    except SingularSystemError:
        return None
    return out


def _worker(args) -> dict[str, tuple[float, float]] | None:
    cfg, rep, estimators, pure_control = args
    return replicate_once(cfg, rep, estimators, pure_control)


def run_mc(
    cfg: SimConfig,
    reps: int,
    estimators=(ESTIMATOR_RS, ESTIMATOR_NAIVE),
    jobs: int = 1,
    pure_control: str = "gmm",
    oracle_draws: int = 10**6,
) -> MCReport:
    """Run the replication study and summarize mean, SD, and 95% coverage."""
    if reps < 2:
        raise ValidationError("need at least two replications")
    for e in estimators:
        if e not in (ESTIMATOR_RS, ESTIMATOR_NAIVE):
            raise ValidationError(f"unknown estimator {e!r}")
    t0 = time.perf_counter()
    truths = oracle_truths(cfg, estimators, oracle_draws)

    tasks = [(cfg, r, tuple(estimators), pure_control) for r in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_worker, tasks, chunksize=max(1, reps // (4 * jobs))))
    else:
        results = [_worker(t) for t in tasks]

    used = [r for r in results if r is not None]
    n_excluded = len(results) - len(used)
    if not used:
        raise SingularSystemError("every replication produced a singular system")

    row_names = (RS_ROWS if ESTIMATOR_RS in estimators else ()) + (
        NAIVE_ROWS if ESTIMATOR_NAIVE in estimators else ()
    )
    rows = []
    for name in row_names:
        est = np.array([r[name][0] for r in used])
        se = np.array([r[name][1] for r in used])
        truth = truths[name]
        sd = float(est.std(ddof=1))
        if sd <= 1e-9 * max(1.0, float(np.abs(est).max())):
            coverage = None  # zero-variance row: coverage degenerate
        else:
            covered = np.abs(est - truth) <= Z_95 * se
            coverage = float(covered.mean())
        rows.append(MCRow(name, float(truth), float(est.mean()), sd, coverage))

    return MCReport(
        rows=rows,
        reps=reps,
        reps_used=len(used),
        n_singular_excluded=n_excluded,
        estimators=tuple(estimators),
        pure_control=pure_control,
        config=config_dict(cfg),
        runtime_seconds=time.perf_counter() - t0,
        per_replication=results,
    )


def report_to_json(report: MCReport) -> str:
    """Canonical JSON for an MCReport.

    Excludes wall-clock runtime and per-replication details so that reports
    from runs with different parallelism are byte-identical.
    """
    payload = {
        "reps": report.reps,
        "reps_used": report.reps_used,
        "n_singular_excluded": report.n_singular_excluded,
        "estimators": list(report.estimators),
        "pure_control": report.pure_control,
        "config": report.config,
        "rows": [asdict(r) for r in report.rows],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def per_replication_csv_lines(report: MCReport):
    """CSV lines (rep, name, estimate, se) for external plotting."""
    yield "rep,name,estimate,se"
    for rep, rec in enumerate(report.per_replication):
        if rec is None:
            continue
        for name, (est, se) in rec.items():
            yield f"{rep},{name},{est!r},{se!r}"
