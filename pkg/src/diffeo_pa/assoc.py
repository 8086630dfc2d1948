"""Random-intercept linear mixed models for deformation features vs. outcome.

Model: ``y_ij = x_ij' beta + b_i + e_ij`` with ``b_i ~ N(0, tau2)`` and
``e_ij ~ N(0, sigma2)``.  Writing ``theta = tau2 / sigma2`` the marginal
covariance of participant ``i`` is ``sigma2 * (I + theta J)``; for fixed
``theta`` both ``beta`` and ``sigma2`` have closed forms, so the likelihood is
maximised by a one-dimensional golden-section search over ``log theta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, sparse, stats
from scipy.linalg import qr

from diffeo_pa.errors import NumericError, ValidationError

ALPHA_BONFERRONI = 0.025
COLLINEAR_R = 0.8
LOG_THETA_BOUNDS = (-12.0, 12.0)
KEY = ["participant_id", "period"]
ENERGY = "deformation_energy"
PERIOD = "period"
INTERACTION = f"{ENERGY}:{PERIOD}"
BASELINE_PF = "baseline_pf"
OUTCOME = "pf"


@dataclass
class FeatureTable:
    data: pd.DataFrame
    categorical: dict = field(default_factory=dict)
    n_dropped: int = 0
    collinear: list = field(default_factory=list)
    correlations: dict = field(default_factory=dict)

    @property
    def n_complete(self) -> int:
        return len(self.data)

    def co_includable(self, a: str, b: str) -> bool:
        return not any({a, b} == {x, y} for x, y, *_ in self.collinear)


@dataclass
class LmmFit:
    names: list
    beta: np.ndarray
    se: np.ndarray
    tvalues: np.ndarray
    pvalues: np.ndarray
    var_random: float
    var_resid: float
    theta: float
    loglik: float
    n_obs: int
    n_groups: int
    bic: float
    reml: bool
    boundary: bool
    terms: list
    rows_key: int
    cov_beta: np.ndarray | None = None

    @property
    def n_params(self) -> int:
        return len(self.names) + 2

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"estimate": self.beta, "se": self.se, "t": self.tvalues, "p": self.pvalues}, index=self.names
        )

    def to_dict(self) -> dict:
        return {
            "coefficients": {
                n: {"estimate": float(b), "se": float(s), "t": float(t), "p": float(p)}
                for n, b, s, t, p in zip(self.names, self.beta, self.se, self.tvalues, self.pvalues)
            },
            "var_random": self.var_random,
            "var_resid": self.var_resid,
            "loglik": self.loglik,
            "bic": self.bic,
            "n_obs": self.n_obs,
            "n_groups": self.n_groups,
            "reml": self.reml,
            "boundary": self.boundary,
            "bic_sample_size": "observation rows",
        }


@dataclass
class LrtResult:
    statistic: float
    df: int
    pvalue: float

    def to_dict(self) -> dict:
        return asdict(self)


# --- features ---------------------------------------------------------------


def _check_unique(df: pd.DataFrame, keys: list, name: str):
    dup = df.duplicated(keys)
    if dup.any():
        raise ValidationError(f"duplicate {keys} keys in {name}: {df.loc[dup, keys].head().values.tolist()}")


def assemble_features(
    scores: pd.DataFrame,
    energies: pd.DataFrame,
    aucs: pd.DataFrame,
    covariates: pd.DataFrame,
    outcomes: pd.DataFrame,
    *,
    categorical: dict | None = None,
    corr_columns: Sequence[str] = ("pc1", "delta_net_auc", ENERGY),
) -> FeatureTable:
    """Inner-join all per-(participant, period) sources and keep complete cases.

    ``covariates`` is keyed by participant only.  Pearson correlations among
    ``corr_columns`` are computed per period and pairs with ``|r| > 0.8`` are
    recorded as not co-includable.
    """
    for name, df in (("scores", scores), ("energies", energies), ("aucs", aucs), ("outcomes", outcomes)):
        _check_unique(df, KEY, name)
    _check_unique(covariates, ["participant_id"], "covariates")
    merged = scores.merge(energies, on=KEY).merge(aucs, on=KEY).merge(outcomes, on=KEY)
    merged = merged.merge(covariates, on="participant_id")
    n_before = len(merged)
    complete = merged.dropna().reset_index(drop=True)
    if len(complete) == 0:
        raise ValidationError("feature join has zero complete cases")
    categorical = dict(categorical or {})
    for col, ref in categorical.items():
        if col in complete and ref not in set(complete[col]):
            raise ValidationError(f"reference level {ref!r} absent from column {col!r}")
    correlations, collinear = {}, []
    cols = [c for c in corr_columns if c in complete]
    for period, block in complete.groupby(PERIOD):
        for i, a in enumerate(cols):
            for b in cols[i + 1 :]:
                if len(block) < 3 or block[a].std() == 0 or block[b].std() == 0:
                    continue
                r = float(np.corrcoef(block[a], block[b])[0, 1])
                correlations[f"{a}~{b}@{period}"] = r
                if abs(r) > COLLINEAR_R:
                    collinear.append((a, b, int(period), r))
    return FeatureTable(complete, categorical, n_before - len(complete), collinear, correlations)


# --- design -----------------------------------------------------------------


def design_matrix(df: pd.DataFrame, terms: Sequence[str], categorical: dict | None = None):
    """Intercept plus ``terms``; ``a:b`` is a product interaction.

    Categorical columns expand to treatment dummies against their declared
    reference level.  Returns ``(X, names, term_of_column)``.
    """
    categorical = categorical or {}
    cols = [np.ones(len(df))]
    names = ["intercept"]
    owner = ["intercept"]

    def expand(var):
        if var in categorical:
            levels = [lv for lv in sorted(df[var].unique(), key=str) if lv != categorical[var]]
            return [((df[var] == lv).to_numpy(float), f"{var}[{lv}]") for lv in levels]
        if var not in df:
            raise ValidationError(f"column {var!r} not in table")
        return [(df[var].to_numpy(float), var)]

    for term in terms:
        parts = term.split(":")
        expanded = [(np.ones(len(df)), "")]
        for part in parts:
            expanded = [(a * b, f"{na}:{nb}" if na else nb) for a, na in expanded for b, nb in expand(part)]
        for col, name in expanded:
            cols.append(col)
            names.append(name)
            owner.append(term)
    return np.column_stack(cols), names, owner


def _collinear_columns(X: np.ndarray, names: list) -> list:
    _, R, piv = qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > d[0] * max(X.shape) * np.finfo(float).eps * 10)) if d.size else 0
    return [names[i] for i in piv[rank:]]


# --- fitting ----------------------------------------------------------------


class _Profile:
    """Closed-form profiled likelihood of the random-intercept model in ``theta``."""

    def __init__(self, y, X, groups):
        codes, uniques = pd.factorize(pd.Series(groups), sort=True)
        self.n_groups = len(uniques)
        self.N, self.p = X.shape
        G = sparse.csr_matrix((np.ones(self.N), (codes, np.arange(self.N))), shape=(self.n_groups, self.N))
        self.ni = np.asarray(G.sum(axis=1)).ravel()
        self.Sx = np.asarray(G @ X)
        self.Sy = np.asarray(G @ y).ravel()
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.codes = codes

    def solve(self, theta: float, reml: bool):
        c = theta / (1.0 + self.ni * theta)
        A = self.XtX - (self.Sx.T * c) @ self.Sx
        b = self.Xty - (self.Sx.T * c) @ self.Sy
        yHy = self.yty - float(np.sum(c * self.Sy**2))
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise NumericError("X' H^-1 X is not positive definite") from exc
        beta = np.linalg.solve(A, b)
        rss = max(yHy - float(beta @ b), 1e-300)
        logdetH = float(np.sum(np.log1p(self.ni * theta)))
        if reml:
            dof = self.N - self.p
            sigma2 = rss / dof
            logdetA = 2.0 * float(np.sum(np.log(np.diag(L))))
            ll = -0.5 * (dof * math.log(2 * math.pi * sigma2) + logdetH + logdetA + dof)
        else:
            sigma2 = rss / self.N
            ll = -0.5 * (self.N * math.log(2 * math.pi * sigma2) + logdetH + self.N)
        return ll, beta, sigma2, A

    def score(self, log_theta: float, reml: bool) -> float:
        """Derivative of the profiled log-likelihood with respect to ``log theta``."""
        theta = math.exp(log_theta)
        ll, beta, sigma2, A = self.solve(theta, reml)
        s = self.Sy - self.Sx @ beta  # group sums of the residual
        d = 1.0 / (1.0 + self.ni * theta)
        drss = -float(np.sum((s * d) ** 2))
        rss = sigma2 * (self.N - self.p if reml else self.N)
        dof = self.N - self.p if reml else self.N
        g = -0.5 * dof * drss / rss - 0.5 * float(np.sum(self.ni * d))
        if reml:
            dA = -(self.Sx.T * d**2) @ self.Sx
            g -= 0.5 * float(np.trace(np.linalg.solve(A, dA)))
        return theta * g


def golden_section_max(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 500):
    """Maximise a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x))``."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def _polish(prof: _Profile, reml: bool, log_t: float, ll: float):
    """Refine the golden-section optimum with a root of the analytic score.

    Golden section stalls near ``sqrt(eps)`` in the argument; the score root
    is accurate to rounding, which keeps fits exactly equivariant.
    """
    lo, hi = max(log_t - 1e-3, LOG_THETA_BOUNDS[0]), min(log_t + 1e-3, LOG_THETA_BOUNDS[1])
    try:
        g_lo, g_hi = prof.score(lo, reml), prof.score(hi, reml)
    except (NumericError, OverflowError):
        return log_t, ll
    if not (g_lo > 0 > g_hi):
        return log_t, ll
    root = optimize.brentq(lambda lt: prof.score(lt, reml), lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    ll_root = prof.solve(math.exp(root), reml)[0]
    return (root, ll_root) if ll_root >= ll - 1e-10 * max(1.0, abs(ll)) else (log_t, ll)


def _rows_key(df: pd.DataFrame) -> int:
    if set(KEY) <= set(df.columns):
        return hash(tuple(sorted(zip(df["participant_id"].astype(str), df["period"].astype(int)))))
    return hash(len(df))


def _as_frame(table) -> tuple[pd.DataFrame, dict]:
    if isinstance(table, FeatureTable):
        return table.data, table.categorical
    return table, {}


def fit_lmm(
    table,
    terms: Sequence[str],
    *,
    outcome: str = OUTCOME,
    group: str = "participant_id",
    reml: bool = False,
    categorical: dict | None = None,
) -> LmmFit:
    """Fit a random-intercept LMM by profiled (RE)ML.

    ``terms`` lists fixed-effect columns; an intercept is always added.  The
    variance ratio is searched on ``log theta in [-12, 12]`` and compared with
    the ``tau2 = 0`` boundary; the boundary wins ties.
    """
    df, cat = _as_frame(table)
    cat = {**cat, **(categorical or {})}
    X, names, _ = design_matrix(df, terms, cat)
    y = df[outcome].to_numpy(float)
    groups = df[group].to_numpy()
    n_groups = len(pd.unique(groups))
    if n_groups < 2:
        raise ValidationError("need at least two groups")
    bad = _collinear_columns(X, names)
    if bad:
        raise ValidationError(f"design matrix is rank deficient; collinear columns: {bad}")
    prof = _Profile(y, X, groups)
    log_t, ll_best = golden_section_max(lambda lt: prof.solve(math.exp(lt), reml)[0], *LOG_THETA_BOUNDS)
    log_t, ll_best = _polish(prof, reml, log_t, ll_best)
    ll_zero = prof.solve(0.0, reml)[0]
    boundary = ll_zero >= ll_best
    theta = 0.0 if boundary else math.exp(log_t)
    ll, beta, sigma2, A = prof.solve(theta, reml)
    cov = sigma2 * np.linalg.inv(A)
    se = np.sqrt(np.diag(cov))
    tvals = beta / se
    dof = max(prof.N - prof.p, 1)
    pvals = 2.0 * stats.t.sf(np.abs(tvals), dof)
    k = prof.p + 2
    return LmmFit(
        names=names,
        beta=beta,
        se=se,
        tvalues=tvals,
        pvalues=pvals,
        var_random=theta * sigma2,
        var_resid=sigma2,
        theta=theta,
        loglik=ll,
        n_obs=prof.N,
        n_groups=prof.n_groups,
        bic=-2.0 * ll + k * math.log(prof.N),
        reml=reml,
        boundary=boundary,
        terms=list(terms),
        rows_key=_rows_key(df),
        cov_beta=cov,
    )


def lrt(full: LmmFit, reduced: LmmFit) -> LrtResult:
    """Likelihood-ratio test of nested ML fits against a chi-square reference."""
    if full.reml or reduced.reml:
        raise ValidationError("likelihood-ratio tests on fixed effects need ML fits")
    if not set(reduced.names) <= set(full.names):
        raise ValidationError("reduced model is not nested in the full model")
    if full.rows_key != reduced.rows_key or full.n_obs != reduced.n_obs:
        raise ValidationError("models were fit on different rows")
    df = full.n_params - reduced.n_params
    stat = max(2.0 * (full.loglik - reduced.loglik), 0.0)
    p = 1.0 if df == 0 or stat == 0.0 else float(stats.chi2.sf(stat, df))
    return LrtResult(stat, int(df), p)


# --- penalised selection ----------------------------------------------------


@dataclass
class LassoPath:
    lambdas: np.ndarray
    coefs: np.ndarray  # (n_lambda, p) on the original scale
    bic: np.ndarray
    n_nonzero: np.ndarray
    names: list
    penalized: np.ndarray
    best_index: int
    selected_terms: list
    refit: LmmFit
    base_fit: LmmFit

    def to_dict(self) -> dict:
        return {
            "lambdas": self.lambdas.tolist(),
            "bic": self.bic.tolist(),
            "n_nonzero": self.n_nonzero.tolist(),
            "names": self.names,
            "penalized": [n for n, pen in zip(self.names, self.penalized) if pen],
            "chosen_lambda": float(self.lambdas[self.best_index]),
            "selected_terms": self.selected_terms,
            "coefs": self.coefs.tolist(),
            "variance_components": "frozen at unpenalized ML fit",
        }


def _whiten(v, prof: _Profile, theta):
    """Apply ``H^{-1/2}`` block-wise: ``v - a_i * groupsum(v)`` with ``a_i = (1 - (1+n_i theta)^{-1/2}) / n_i``."""
    a = (1.0 - 1.0 / np.sqrt(1.0 + prof.ni * theta)) / prof.ni
    G = sparse.csr_matrix((np.ones(prof.N), (prof.codes, np.arange(prof.N))), shape=(prof.n_groups, prof.N))
    sums = G @ v
    if v.ndim == 1:
        return v - (a * sums)[prof.codes]
    return v - (a[:, None] * sums)[prof.codes]


def _coordinate_descent(X, y, lam, penalized, beta, tol=1e-10, max_sweeps=10000):
    n = X.shape[0]
    col_sq = np.einsum("ij,ij->j", X, X) / n
    r = y - X @ beta
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(X.shape[1]):
            if col_sq[j] == 0:
                continue
            old = beta[j]
            rho = X[:, j] @ r / n + col_sq[j] * old
            if penalized[j]:
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            else:
                new = rho / col_sq[j]
            if new != old:
                r -= X[:, j] * (new - old)
                beta[j] = new
                delta = max(delta, abs(new - old) * math.sqrt(col_sq[j]))
        if delta < tol:
            break
    return beta


def default_lambda_grid(n: int = 40, lo: float = 1e-4, hi: float = 10.0) -> np.ndarray:
    return np.geomspace(hi, lo, n)


def lasso_lmm(
    table,
    terms: Sequence[str],
    lambda_grid: Iterable[float] | None = None,
    *,
    unpenalized: Sequence[str] = (ENERGY, PERIOD, INTERACTION, BASELINE_PF),
    outcome: str = OUTCOME,
    group: str = "participant_id",
    categorical: dict | None = None,
) -> LassoPath:
    """L1-penalised fixed effects with variance components frozen at the ML fit.

    Penalised predictors are scaled to unit sample SD before penalisation.
    BIC at each ``lambda`` uses the ML log-likelihood of the unpenalised refit
    on the active set (``theta`` frozen, ``sigma2`` re-profiled) and
    ``df = nonzero coefficients + 2``.  The chosen
    support (terms with any nonzero column) is refit without penalty.
    """
    grid = np.asarray(list(lambda_grid) if lambda_grid is not None else default_lambda_grid(), dtype=float)
    if grid.size == 0:
        raise ValidationError("lambda grid is empty")
    if np.any(np.diff(grid) > 0):
        raise ValidationError("lambda grid must be decreasing")
    df, cat = _as_frame(table)
    cat = {**cat, **(categorical or {})}
    base = fit_lmm(df, terms, outcome=outcome, group=group, categorical=cat)
    X, names, owner = design_matrix(df, terms, cat)
    y = df[outcome].to_numpy(float)
    prof = _Profile(y, X, df[group].to_numpy())
    penalized = np.array([o != "intercept" and o not in set(unpenalized) for o in owner])
    sd = np.where(penalized, X.std(axis=0, ddof=1), 1.0)
    sd[sd == 0] = 1.0
    Xw = _whiten(X / sd, prof, base.theta)
    yw = _whiten(y, prof, base.theta)
    N = prof.N
    logdetH = float(np.sum(np.log1p(prof.ni * base.theta)))

    beta = np.zeros(X.shape[1])
    coefs, bics, nnz = [], [], []
    for lam in grid:
        beta = _coordinate_descent(Xw, yw, lam, penalized, beta.copy())
        # likelihood of the unpenalised refit on the active set
        active = (beta != 0) | ~penalized
        sub = np.linalg.lstsq(Xw[:, active], yw, rcond=None)[0]
        rss = float(np.sum((yw - Xw[:, active] @ sub) ** 2))
        sigma2 = max(rss / N, 1e-300)
        ll = -0.5 * (N * math.log(2 * math.pi * sigma2) + logdetH + N)
        k = int(np.sum(beta != 0)) + 2
        coefs.append(beta / sd)
        bics.append(-2 * ll + k * math.log(N))
        nnz.append(int(np.sum(beta[penalized] != 0)))
    bics = np.asarray(bics)
    best = int(np.flatnonzero(bics == bics.min())[0])
    chosen = coefs[best]
    keep_terms = [t for t in terms if any(chosen[i] != 0 for i, o in enumerate(owner) if o == t) or t in unpenalized]
    refit = fit_lmm(df, keep_terms, outcome=outcome, group=group, categorical=cat)
    return LassoPath(
        lambdas=grid,
        coefs=np.asarray(coefs),
        bic=bics,
        n_nonzero=np.asarray(nnz),
        names=names,
        penalized=penalized,
        best_index=best,
        selected_terms=keep_terms,
        refit=refit,
        base_fit=base,
    )


# --- the two reported models -----------------------------------------------


@dataclass
class ModelsReport:
    model1: LmmFit
    model2: LmmFit
    lrt1: LrtResult
    lrt2: LrtResult
    selection1: LassoPath | None
    selection2: LassoPath | None
    alpha: float = ALPHA_BONFERRONI

    def significant(self, fit: LmmFit) -> dict:
        return {n: bool(p < self.alpha) for n, p in zip(fit.names, fit.pvalues)}

    def to_dict(self) -> dict:
        out = {"alpha": self.alpha}
        for i, (fit, test, sel) in enumerate(
            ((self.model1, self.lrt1, self.selection1), (self.model2, self.lrt2, self.selection2)), start=1
        ):
            out[f"model{i}"] = {
                **fit.to_dict(),
                "terms": fit.terms,
                "interaction_lrt": test.to_dict(),
                "interaction_significant": bool(test.pvalue < self.alpha),
                "significant": self.significant(fit),
                "selection": sel.to_dict() if sel is not None else None,
            }
        return out


def _with_interaction_lrt(df, terms, cat, outcome):
    full = fit_lmm(df, terms, outcome=outcome, categorical=cat)
    if INTERACTION not in terms:
        return full, LrtResult(0.0, 0, 1.0)
    reduced = fit_lmm(df, [t for t in terms if t != INTERACTION], outcome=outcome, categorical=cat)
    return full, lrt(full, reduced)


def run_models(
    table: FeatureTable,
    pc_columns: Sequence[str],
    covariates: Sequence[str] = (),
    *,
    select: bool = True,
    lambda_grid: Iterable[float] | None = None,
    outcome: str = OUTCOME,
) -> ModelsReport:
    """Fit Model 1 (PC scores) and Model 2 (delta net-AUC) with the energy x period LRT.

    Both models share the core terms ``deformation_energy``, ``period``, their
    interaction and ``baseline_pf``; these are never penalised.  With
    ``select`` the PCs and covariates go through :func:`lasso_lmm` first.
    """
    df, cat = table.data, table.categorical
    core = [ENERGY, PERIOD, INTERACTION, BASELINE_PF]
    terms1 = list(pc_columns) + core + list(covariates)
    terms2 = ["delta_net_auc"] + core + list(covariates)
    sel1 = sel2 = None
    if select:
        grid = list(lambda_grid) if lambda_grid is not None else None
        sel1 = lasso_lmm(table, terms1, grid, outcome=outcome)
        sel2 = lasso_lmm(table, terms2, grid, outcome=outcome)
        terms1 = [t for t in terms1 if t in sel1.selected_terms]
        terms2 = [t for t in terms2 if t in sel2.selected_terms]
    fit1, test1 = _with_interaction_lrt(df, terms1, cat, outcome)
    fit2, test2 = _with_interaction_lrt(df, terms2, cat, outcome)
    return ModelsReport(fit1, fit2, test1, test2, sel1, sel2)


def format_table(fit: LmmFit, title: str) -> str:
    """Plain-text coefficient table: variable, coefficient (s.e.), p-value."""
    lines = [title, f"{'Variable':<36}{'Coefficient (s.e.)':>24}{'p-value':>12}", "-" * 72]
    for n, b, s, p in zip(fit.names, fit.beta, fit.se, fit.pvalues):
        ptxt = "< 0.0001" if p < 1e-4 else f"{p:.4f}"
        lines.append(f"{n:<36}{f'{b:.4g} ({s:.4g})':>24}{ptxt:>12}")
    lines.append("-" * 72)
    lines.append(
        f"N obs = {fit.n_obs}, groups = {fit.n_groups}, tau2 = {fit.var_random:.4g}, "
        f"sigma2 = {fit.var_resid:.4g}, logLik = {fit.loglik:.3f}, BIC = {fit.bic:.3f}"
    )
    return "\n".join(lines)


def save_report(path, report: ModelsReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
