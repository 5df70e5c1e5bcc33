"""Bootstrap significance, OLS association, Cox survival and disparity ratios."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

Z_975 = sps.norm.ppf(0.975)
COVARIATES = ("disease", "age", "sex", "bmi")
GROUPS = ("White", "NonWhite")


@dataclass
class SubjectRecord:
    id: str
    age: float
    sex: int
    bmi: float
    disease: int
    time: float
    event: int
    group: str
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"{self.id}: survival time must be non-negative")
        if self.bmi <= 0:
            raise ValueError(f"{self.id}: BMI must be positive")
        if self.group not in GROUPS:
            raise ValueError(f"{self.id}: group must be one of {GROUPS}")


# ---------------------------------------------------------------------------
# bootstrap


def significance_tier(p: float | None) -> str:
    if p is None or not np.isfinite(p):
        return "ns"
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


@dataclass
class BootstrapResult:
    metric: str
    mean: float
    std: float
    replicates: np.ndarray
    comparator_mean: float | None = None
    comparator_std: float | None = None
    comparator_replicates: np.ndarray | None = None
    p_value: float | None = None
    tier: str | None = None

    @property
    def n_replicates(self) -> int:
        return len(self.replicates)


def _per_subject(values) -> np.ndarray:
    """Average over seeds if given as ``(n_seeds, n_subjects)``."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2:
        arr = arr.mean(axis=0)
    if arr.ndim != 1:
        raise ValueError("metrics must be (n_subjects,) or (n_seeds, n_subjects)")
    return arr


def bootstrap_indices(n: int, n_boot: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=(n_boot, n))


def bootstrap_summary(values, n_boot: int = 100, rng=None, metric: str = "metric") -> BootstrapResult:
    a = _per_subject(values)
    if a.size < 2:
        raise ValueError("bootstrap needs at least two subjects")
    rng = np.random.default_rng(rng)
    reps = a[bootstrap_indices(a.size, n_boot, rng)].mean(axis=1)
    return BootstrapResult(metric, float(reps.mean()), float(reps.std(ddof=1)), reps)


def ttest_replicates(ra: np.ndarray, rb: np.ndarray) -> float:
    """Two-sided independent t-test; zero pooled variance is handled explicitly."""
    if np.var(ra) == 0 and np.var(rb) == 0:
        return 1.0 if ra.mean() == rb.mean() else 0.0
    return float(sps.ttest_ind(ra, rb).pvalue)


def bootstrap_compare(metrics_a, metrics_b, n_boot: int = 100, rng=None, metric: str = "metric") -> BootstrapResult:
    """Paired-resampling bootstrap of two arms and a t-test on the replicate means.

    Both arms are resampled with the same subject indices. Inputs of shape
    ``(n_seeds, n_subjects)`` are averaged over seeds per subject first.
    """
    a, b = _per_subject(metrics_a), _per_subject(metrics_b)
    if a.shape != b.shape:
        raise ValueError("both arms must cover the same subjects")
    if a.size < 2:
        raise ValueError("bootstrap needs at least two subjects")
    rng = np.random.default_rng(rng)
    idx = bootstrap_indices(a.size, n_boot, rng)
    ra, rb = a[idx].mean(axis=1), b[idx].mean(axis=1)
    p = ttest_replicates(ra, rb)
    return BootstrapResult(
        metric=metric,
        mean=float(ra.mean()),
        std=float(ra.std(ddof=1)),
        replicates=ra,
        comparator_mean=float(rb.mean()),
        comparator_std=float(rb.std(ddof=1)),
        comparator_replicates=rb,
        p_value=p,
        tier=significance_tier(p),
    )


# ---------------------------------------------------------------------------
# OLS


class RankDeficientError(ValueError):
    pass


@dataclass
class RegressionResult:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    p: np.ndarray
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> dict[str, float]:
        i = self.names.index(name)
        return {
            "coef": float(self.coef[i]),
            "se": float(self.se[i]),
            "ci": (float(self.ci_low[i]), float(self.ci_high[i])),
            "p": float(self.p[i]),
        }

    def table(self) -> list[dict]:
        return [{"covariate": n, **{k: v for k, v in self[n].items()}} for n in self.names]


def _design(covariates, names) -> tuple[np.ndarray, list[str]]:
    if isinstance(covariates, dict):
        names = list(names or covariates)
        X = np.column_stack([np.asarray(covariates[n], float) for n in names])
    else:
        X = np.asarray(covariates, float)
        if X.ndim == 1:
            X = X[:, None]
        names = list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]
    return X, names


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    for j in range(1, X.shape[1] + 1):
        if np.linalg.matrix_rank(X[:, :j]) < j:
            raise RankDeficientError(f"design matrix is rank deficient at column {names[j - 1]!r}")


def ols_fit(y, covariates, names=None, alpha: float = 0.05) -> RegressionResult:
    """Least squares with an intercept; t-based CIs and two-sided p-values."""
    y = np.asarray(y, float)
    X, names = _design(covariates, names)
    X = np.column_stack([np.ones(len(y)), X])
    names = ["const"] + names
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need more than {k} observations, got {n}")
    _check_rank(X, names)
    Q, R = np.linalg.qr(X)
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coef
    dof = n - k
    sigma2 = resid @ resid / dof
    Rinv = np.linalg.inv(R)
    se = np.sqrt(sigma2 * np.sum(Rinv**2, axis=1))
    tcrit = sps.t.ppf(1 - alpha / 2, dof)
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.inf))
    p = 2 * sps.t.sf(np.abs(tstat), dof)
    return RegressionResult(names, coef, se, coef - tcrit * se, coef + tcrit * se, p, {"dof": dof, "resid": resid})


# ---------------------------------------------------------------------------
# Cox proportional hazards


class CoxError(ValueError):
    pass


class NonIdentifiableError(CoxError):
    pass


class ConvergenceError(CoxError):
    pass


class MonotoneLikelihoodError(CoxError):
    pass


def _breslow_terms(beta, X, time, event):
    """Log partial likelihood, gradient and Hessian with Breslow ties."""
    order = np.argsort(-time, kind="stable")
    Xs, ts, es = X[order], time[order], event[order]
    eta = Xs @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    S0 = np.cumsum(w)
    S1 = np.cumsum(w[:, None] * Xs, axis=0)
    S2 = np.cumsum(w[:, None, None] * Xs[:, :, None] * Xs[:, None, :], axis=0)
    # Risk set for a tied block includes every member of the block: use the
    # cumulative sums at the block's last row (in descending-time order).
    last = np.r_[ts[1:] != ts[:-1], True]
    block_end = np.flip(np.minimum.accumulate(np.flip(np.where(last, np.arange(len(ts)), len(ts)))))
    d = es.astype(bool)
    ends = block_end[d]
    s0, s1, s2 = S0[ends], S1[ends], S2[ends]
    xbar = s1 / s0[:, None]
    ll = float(np.sum(eta[d]) - np.sum(np.log(s0) + shift))
    grad = np.sum(Xs[d] - xbar, axis=0)
    hess = -np.sum(s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :], axis=0)
    return ll, grad, hess


def cox_partial_loglik(beta, X, time, event) -> float:
    return _breslow_terms(np.asarray(beta, float), np.asarray(X, float), np.asarray(time, float), np.asarray(event))[0]


def cox_fit(
    time,
    event,
    covariates,
    names=None,
    tol: float = 1e-8,
    max_iter: int = 100,
    separation_bound: float = 25.0,
) -> RegressionResult:
    """Newton-Raphson on the Breslow log partial likelihood with step halving.

    Converges when the gradient's infinity norm drops below ``tol``. A
    standardised coefficient beyond ``separation_bound``, or a standardised
    standard error beyond four times it, is treated as a monotone likelihood
    (perfect separation).
    """
    time = np.asarray(time, float)
    event = np.asarray(event).astype(int)
    X, names = _design(covariates, names)
    if np.any(time < 0):
        raise CoxError("survival times must be non-negative")
    if event.sum() == 0:
        raise NonIdentifiableError("no events observed")
    sd = X.std(axis=0)
    for n_, s in zip(names, sd):
        if s == 0:
            raise NonIdentifiableError(f"covariate {n_!r} is constant")
    _check_rank(np.column_stack([np.ones(len(time)), X]), ["const"] + names)
    mu = X.mean(axis=0)
    Xc = X - mu
    beta = np.zeros(X.shape[1])
    ll, grad, hess = _breslow_terms(beta, Xc, time, event)
    history = [ll]
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise MonotoneLikelihoodError("information matrix is singular") from None
        for _ in range(60):
            cand = beta + step
            ll_new, g_new, h_new = _breslow_terms(cand, Xc, time, event)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        else:
            raise ConvergenceError("step halving failed to increase the likelihood")
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        history.append(ll)
        if np.any(np.abs(beta * sd) > separation_bound):
            bad = names[int(np.argmax(np.abs(beta * sd)))]
            raise MonotoneLikelihoodError(f"coefficient for {bad!r} diverges (monotone likelihood)")
    else:
        if np.max(np.abs(grad)) >= tol:
            raise ConvergenceError(f"no convergence after {max_iter} iterations")
    cov = np.linalg.inv(-hess)
    se = np.sqrt(np.diag(cov))
    # under separation the gradient vanishes together with the information,
    # so "convergence" can be reached with a standard error that explodes
    if np.any(se * sd > separation_bound * 4):
        bad = names[int(np.argmax(se * sd))]
        raise MonotoneLikelihoodError(f"information for {bad!r} vanishes (monotone likelihood)")
    z = beta / se
    p = 2 * sps.norm.sf(np.abs(z))
    return RegressionResult(
        names,
        beta,
        se,
        beta - Z_975 * se,
        beta + Z_975 * se,
        p,
        {"loglik": ll, "loglik_history": history, "n_iter": len(history) - 1, "hazard_ratio": np.exp(beta)},
    )


# ---------------------------------------------------------------------------
# demographic disparity


@dataclass
class DisparityResult:
    q: float
    threshold: float
    ratio: float
    n_white: int
    n_white_pos: int
    n_nonwhite: int
    n_nonwhite_pos: int


def disparity_ratio(values, groups, q: float, reference: str = "White") -> DisparityResult:
    """Ratio of ``value > threshold`` rates, reference group over the rest.

    The threshold is the ``q``-th percentile (linear interpolation) of all
    values. A zero rate in the denominator group gives ``inf``.
    """
    values = np.asarray(values, float)
    groups = np.asarray(groups)
    ref = groups == reference
    if ref.all() or not ref.any():
        raise ValueError("both groups must be non-empty")
    thr = float(np.percentile(values, q))
    pos = values > thr
    nw, nwp = int(ref.sum()), int(pos[ref].sum())
    nn, nnp = int((~ref).sum()), int(pos[~ref].sum())
    rate_w, rate_n = nwp / nw, nnp / nn
    if rate_n == 0:
        ratio = float("inf")
    else:
        ratio = rate_w / rate_n
    return DisparityResult(q, thr, ratio, nw, nwp, nn, nnp)


def disparity_curve(values, groups, qs=tuple(range(25, 80, 5)), reference: str = "White") -> list[DisparityResult]:
    return [disparity_ratio(values, groups, q, reference) for q in qs]
