"""Minute-level accelerometer counts to smoothed, scaled diurnal curves.

The pipeline for one participant-visit is::

    records -> filter_valid_days -> average_daily_profile -> smooth_curve
            -> (pooled) fit_scaling -> scale_curve -> net_auc

Curves live on the 1080-minute window 6:00-24:00.  Before scaling the grid
is ``t = 1, ..., 1080``; after scaling it is the affine image of that grid on
``[-1, 1]``.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import eigh, solve_banded

from diffeo_pa.errors import DegenerateDataError, NumericError, ValidationError

N_MINUTES = 1080
WINDOW_START = 360  # 6:00 as minute-of-day
WINDOW_END = WINDOW_START + N_MINUTES  # exclusive, i.e. midnight
MAX_NONWEAR = 240
MIN_WEAR = 840
MIN_VALID_DAYS = 4
VISITS = ("Baseline", "W1", "W2")


class Stage(str, enum.Enum):
    RAW_MEAN = "RawMean"
    SMOOTHED = "Smoothed"
    SCALED = "Scaled"


def minute_grid() -> np.ndarray:
    return np.arange(1, N_MINUTES + 1, dtype=float)


def scaled_grid() -> np.ndarray:
    return minutes_to_unit(minute_grid())


def minutes_to_unit(t):
    """Map minute index ``1..1080`` affinely onto ``[-1, 1]``."""
    return 2.0 * (np.asarray(t, dtype=float) - 1.0) / (N_MINUTES - 1) - 1.0


def unit_to_minutes(x):
    return (np.asarray(x, dtype=float) + 1.0) * (N_MINUTES - 1) / 2.0 + 1.0


@dataclass(frozen=True)
class MinuteRecord:
    participant_id: str
    visit: str
    day_index: int
    minute_of_day: int
    axis_counts: tuple[float, float, float]
    wear: bool

    def __post_init__(self):
        if self.visit not in VISITS:
            raise ValidationError(f"unknown visit {self.visit!r}")
        if self.day_index < 1:
            raise ValidationError("day_index must be a positive integer")
        if not 0 <= self.minute_of_day <= 1439:
            raise ValidationError(f"minute_of_day {self.minute_of_day} outside 0-1439")
        a = np.asarray(self.axis_counts, dtype=float)
        if a.shape != (3,) or not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValidationError(f"axis counts must be three finite non-negative values, got {self.axis_counts}")


@dataclass(frozen=True)
class DiurnalCurve:
    participant_id: str
    visit: str
    grid: np.ndarray
    values: np.ndarray
    stage: Stage

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.shape != (N_MINUTES,) or values.shape != (N_MINUTES,):
            raise ValidationError(
                f"curve must have {N_MINUTES} grid points and values, got {grid.shape} / {values.shape}"
            )
        if np.any(np.diff(grid) <= 0):
            raise ValidationError("curve grid must be strictly increasing")
        stage = Stage(self.stage)
        if stage is Stage.SCALED and (grid[0] < -1 - 1e-12 or grid[-1] > 1 + 1e-12):
            raise ValidationError("scaled curve grid must lie in [-1, 1]")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "stage", stage)

    @property
    def points(self) -> np.ndarray:
        """The curve as an ``(N, 2)`` polyline."""
        return np.column_stack([self.grid, self.values])


@dataclass(frozen=True)
class ScalingParams:
    grand_mean: float
    grand_sd: float

    def __post_init__(self):
        if not self.grand_sd > 0:
            raise ValidationError("grand_sd must be positive")


@dataclass
class ValidDays:
    """Outcome of the valid-day filter for one participant-visit.

    ``vm`` and ``wear`` hold the retained days only, one row per day.
    """

    participant_id: str
    visit: str
    days: list[int]
    vm: np.ndarray
    wear: np.ndarray
    n_days_seen: int
    reason: str | None = None
    dropped_days: dict[int, str] = field(default_factory=dict)

    @property
    def excluded(self) -> bool:
        return self.reason is not None


def compute_vm(va, ha, ppa):
    """Vector magnitude ``sqrt(va^2 + ha^2 + ppa^2)``; scalars or arrays."""
    parts = [np.asarray(v, dtype=float) for v in (va, ha, ppa)]
    for v in parts:
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("axis counts must be finite and non-negative")
    out = np.sqrt(parts[0] ** 2 + parts[1] ** 2 + parts[2] ** 2)
    return float(out) if out.ndim == 0 else out


def _records_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    rows = [
        {
            "participant_id": r.participant_id,
            "visit": r.visit,
            "day": r.day_index,
            "minute": r.minute_of_day,
            "va": r.axis_counts[0],
            "ha": r.axis_counts[1],
            "ppa": r.axis_counts[2],
            "wear": int(r.wear),
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=["participant_id", "visit", "day", "minute", "va", "ha", "ppa", "wear"])


def day_arrays(records) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Pivot one participant-visit's records into per-day window arrays.

    Minutes outside 6:00-24:00 are discarded.  In-window minutes with no
    record count as non-wear with zero VM.
    """
    df = _records_frame(records)
    if len(df) == 0:
        raise ValidationError("empty record set")
    if df.duplicated(["day", "minute"]).any():
        raise ValidationError("minute_of_day must be unique within each day")
    days = sorted(int(d) for d in df["day"].unique())
    win = df[(df["minute"] >= WINDOW_START) & (df["minute"] < WINDOW_END)]
    vm = np.zeros((len(days), N_MINUTES))
    wear = np.zeros((len(days), N_MINUTES), dtype=bool)
    if len(win):
        row = np.searchsorted(days, win["day"].to_numpy())
        col = win["minute"].to_numpy().astype(int) - WINDOW_START
        vm[row, col] = compute_vm(win["va"].to_numpy(), win["ha"].to_numpy(), win["ppa"].to_numpy())
        wear[row, col] = win["wear"].to_numpy().astype(bool)
    return days, vm, wear


def filter_valid_days(
    records,
    *,
    max_nonwear: int = MAX_NONWEAR,
    min_wear: int = MIN_WEAR,
    min_days: int = MIN_VALID_DAYS,
) -> ValidDays:
    """Apply the wear-time rules to one participant-visit.

    A day is kept when in-window non-wear is strictly below ``max_nonwear``
    minutes *and* wear is at least ``min_wear`` minutes.  The participant-visit
    is excluded when fewer than ``min_days`` days survive.
    """
    df = _records_frame(records)
    if len(df) == 0:
        raise ValidationError("empty record set")
    pid = str(df["participant_id"].iloc[0]) if "participant_id" in df else ""
    visit = str(df["visit"].iloc[0]) if "visit" in df else ""
    days, vm, wear = day_arrays(df)
    n_wear = wear.sum(axis=1)
    n_nonwear = N_MINUTES - n_wear
    keep = (n_nonwear < max_nonwear) & (n_wear >= min_wear)
    dropped = {
        d: f"{int(nw)} non-wear minutes" for d, k, nw in zip(days, keep, n_nonwear) if not k
    }
    result = ValidDays(
        participant_id=pid,
        visit=visit,
        days=[d for d, k in zip(days, keep) if k],
        vm=vm[keep],
        wear=wear[keep],
        n_days_seen=len(days),
        dropped_days=dropped,
    )
    if len(result.days) < min_days:
        result.reason = "too few valid days"
    return result


def average_daily_profile(
    valid: ValidDays | tuple[np.ndarray, np.ndarray],
    *,
    participant_id: str | None = None,
    visit: str | None = None,
    min_days: int = 2,
) -> DiurnalCurve:
    """Per-minute mean over days, using worn minutes only.

    Clock minutes that are non-wear on every day are filled by linear
    interpolation between the nearest covered minutes (constant extrapolation
    at the window edges).
    """
    if isinstance(valid, ValidDays):
        vm, wear = valid.vm, valid.wear
        participant_id = valid.participant_id if participant_id is None else participant_id
        visit = valid.visit if visit is None else visit
    else:
        vm, wear = valid
    vm = np.atleast_2d(np.asarray(vm, dtype=float))
    wear = np.atleast_2d(np.asarray(wear, dtype=bool))
    if vm.shape != wear.shape or vm.shape[1] != N_MINUTES:
        raise ValidationError(f"expected (days, {N_MINUTES}) arrays, got {vm.shape} and {wear.shape}")
    if vm.shape[0] < min_days:
        raise ValidationError(f"need at least {min_days} retained days, got {vm.shape[0]}")
    counts = wear.sum(axis=0)
    covered = counts > 0
    if not covered.any():
        raise ValidationError("no worn minutes in any retained day")
    mean = np.zeros(N_MINUTES)
    mean[covered] = (vm * wear).sum(axis=0)[covered] / counts[covered]
    if not covered.all():
        idx = np.arange(N_MINUTES)
        mean[~covered] = np.interp(idx[~covered], idx[covered], mean[covered])
    return DiurnalCurve(participant_id or "", visit or "", minute_grid(), mean, Stage.RAW_MEAN)


# --- cubic smoothing spline -------------------------------------------------


class SplineSmoother:
    """Cubic smoothing spline with knots at every abscissa.

    Minimises ``sum (y_i - g(x_i))^2 + lam * int g''(x)^2 dx``.  The fitted
    values are ``(I + lam K)^{-1} y`` with ``K = Q R^{-1} Q^T`` the natural
    cubic spline roughness matrix.  ``K`` is eigendecomposed once so that the
    trace of the smoother (effective degrees of freedom) is a cheap scalar
    function of ``lam`` and independent of ``y``.
    """

    def __init__(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        n = x.size
        if n < 3 or np.any(np.diff(x) <= 0):
            raise ValidationError("smoothing grid must be strictly increasing with >= 3 points")
        h = np.diff(x)
        Q = np.zeros((n, n - 2))
        cols = np.arange(n - 2)
        Q[cols, cols] = 1.0 / h[:-1]
        Q[cols + 1, cols] = -1.0 / h[:-1] - 1.0 / h[1:]
        Q[cols + 2, cols] = 1.0 / h[1:]
        ab = np.zeros((3, n - 2))
        ab[0, 1:] = h[1:-1] / 6.0
        ab[1, :] = (h[:-1] + h[1:]) / 3.0
        ab[2, :-1] = h[1:-1] / 6.0
        K = Q @ solve_banded((1, 1), ab, Q.T)
        # linear functions are exactly unpenalised; split them off so that
        # rounding in K does not leak into the null space
        basis, _ = np.linalg.qr(np.column_stack([np.ones(n), x - x.mean()]), mode="complete")
        null, rest = basis[:, :2], basis[:, 2:]
        Kr = rest.T @ K @ rest
        evals, evecs = eigh((Kr + Kr.T) / 2.0)
        self.x = x
        self.eigenvalues = np.concatenate([[0.0, 0.0], np.clip(evals, 0.0, None)])
        self.eigenvectors = np.column_stack([null, rest @ evecs])

    def trace(self, lam: float) -> float:
        return float(np.sum(1.0 / (1.0 + lam * self.eigenvalues)))

    def lambda_for_df(self, target_df: float, *, lo: float = -20.0, hi: float = 20.0, tol: float = 1e-3) -> float:
        """Bisection on ``log(lam)`` until the smoother trace is within ``tol`` of ``target_df``."""
        df_lo, df_hi = self.trace(np.exp(lo)), self.trace(np.exp(hi))
        if not df_hi <= target_df <= df_lo:
            raise NumericError(
                f"target df {target_df} not bracketed: df(exp({lo}))={df_lo:.4f}, df(exp({hi}))={df_hi:.4f}"
            )
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            df_mid = self.trace(np.exp(mid))
            if abs(df_mid - target_df) < tol:
                return float(np.exp(mid))
            # trace decreases in lam
            if df_mid > target_df:
                lo = mid
            else:
                hi = mid
        raise NumericError(f"bisection for df {target_df} did not converge; last bracket [{lo}, {hi}]")

    def smooth(self, y: np.ndarray, lam: float) -> np.ndarray:
        U = self.eigenvectors
        return U @ ((U.T @ np.asarray(y, dtype=float)) / (1.0 + lam * self.eigenvalues))

    def matrix(self, lam: float) -> np.ndarray:
        U = self.eigenvectors
        return (U / (1.0 + lam * self.eigenvalues)) @ U.T


@functools.lru_cache(maxsize=8)
def _smoother_for(grid_bytes: bytes) -> SplineSmoother:
    return SplineSmoother(np.frombuffer(grid_bytes, dtype=float))


def get_smoother(grid: np.ndarray) -> SplineSmoother:
    return _smoother_for(np.ascontiguousarray(grid, dtype=float).tobytes())


@functools.lru_cache(maxsize=32)
def _lambda_cached(grid_bytes: bytes, target_df: float) -> float:
    return _smoother_for(grid_bytes).lambda_for_df(target_df)


def smoothing_lambda(grid: np.ndarray, target_df: float = 25.0) -> float:
    return _lambda_cached(np.ascontiguousarray(grid, dtype=float).tobytes(), float(target_df))


def smooth_curve(curve: DiurnalCurve, target_df: float = 25.0) -> DiurnalCurve:
    """Cubic smoothing spline fit whose smoother trace equals ``target_df``."""
    if not np.all(np.isfinite(curve.values)):
        raise ValidationError("curve contains non-finite values")
    lam = smoothing_lambda(curve.grid, target_df)
    fitted = get_smoother(curve.grid).smooth(curve.values, lam)
    return DiurnalCurve(curve.participant_id, curve.visit, curve.grid, fitted, Stage.SMOOTHED)


# --- pooled scaling ---------------------------------------------------------


def fit_scaling(curves: Sequence[DiurnalCurve]) -> ScalingParams:
    """Grand mean and sample SD pooled over every participant-visit-minute."""
    if len(curves) < 2:
        raise ValidationError("need at least two curves to fit scaling")
    pooled = np.concatenate([c.values for c in curves])
    sd = float(np.std(pooled, ddof=1))
    if not sd > 0:
        raise DegenerateDataError("pooled SD is zero; all curve values identical")
    return ScalingParams(float(np.mean(pooled)), sd)


def scale_curve(curve: DiurnalCurve, params: ScalingParams) -> DiurnalCurve:
    values = (curve.values - params.grand_mean) / (4.0 * params.grand_sd)
    return DiurnalCurve(curve.participant_id, curve.visit, minutes_to_unit(curve.grid), values, Stage.SCALED)


def unscale_curve(curve: DiurnalCurve, params: ScalingParams) -> DiurnalCurve:
    """Inverse of :func:`scale_curve`, back to minute grid and count units."""
    values = curve.values * (4.0 * params.grand_sd) + params.grand_mean
    return DiurnalCurve(curve.participant_id, curve.visit, unit_to_minutes(curve.grid), values, Stage.SMOOTHED)


def net_auc(curve: DiurnalCurve) -> float:
    """Signed area under a scaled curve, trapezoid rule over its grid."""
    if curve.stage is not Stage.SCALED:
        raise ValidationError("net_auc expects a scaled curve")
    return float(np.trapezoid(curve.values, curve.grid))


def delta_net_auc(earlier: DiurnalCurve, later: DiurnalCurve) -> float:
    if earlier.grid.shape != later.grid.shape or not np.allclose(earlier.grid, later.grid, rtol=0, atol=1e-12):
        raise ValidationError("curves are not on the same grid")
    return net_auc(later) - net_auc(earlier)


def preprocess(
    records: pd.DataFrame,
    target_df: float = 25.0,
    *,
    max_nonwear: int = MAX_NONWEAR,
    min_wear: int = MIN_WEAR,
    min_days: int = MIN_VALID_DAYS,
):
    """Run the full per-participant-visit prep over a minute-level table.

    Returns ``(scaled, smoothed, params, exclusions)`` where ``scaled`` and
    ``smoothed`` map ``(participant_id, visit)`` to curves and ``exclusions``
    lists dicts describing every dropped participant-visit.
    """
    smoothed: dict[tuple[str, str], DiurnalCurve] = {}
    exclusions: list[dict] = []
    for (pid, visit), block in records.groupby(["participant_id", "visit"], sort=True):
        valid = filter_valid_days(block, max_nonwear=max_nonwear, min_wear=min_wear, min_days=min_days)
        if valid.excluded:
            exclusions.append(
                {
                    "participant_id": str(pid),
                    "visit": str(visit),
                    "reason": valid.reason,
                    "valid_days": len(valid.days),
                    "days_seen": valid.n_days_seen,
                }
            )
            continue
        raw = average_daily_profile(valid, participant_id=str(pid), visit=str(visit))
        smoothed[(str(pid), str(visit))] = smooth_curve(raw, target_df)
    params = fit_scaling(list(smoothed.values()))
    scaled = {k: scale_curve(c, params) for k, c in smoothed.items()}
    return scaled, smoothed, params, exclusions


def transition_pairs(keys: Iterable[tuple[str, str]]) -> list[tuple[str, int, str, str]]:
    """Consecutive-visit pairs ``(pid, period, earlier_visit, later_visit)`` present in ``keys``."""
    have = set(keys)
    pids = sorted({k[0] for k in have})
    out = []
    for pid in pids:
        for period, (a, b) in enumerate(zip(VISITS[:-1], VISITS[1:])):
            if (pid, a) in have and (pid, b) in have:
                out.append((pid, period, a, b))
    return out
