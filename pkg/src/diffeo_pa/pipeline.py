"""End-to-end orchestration: prep, matching, MFPCA, features, models, plot data.

Every stage writes its artifacts under ``<out>/<stage>/`` and is recorded in
``<out>/manifest.json`` together with a stage key, the hash of everything
the stage depends on.  A rerun skips any stage whose key and artifact hashes
still match, so changing one setting reruns only the stages downstream of
it.  Individual matchings are additionally cached by content hash in the
cache directory (``DIFFEO_PA_CACHE`` or ``~/.cache/diffeo_pa``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

import diffeo_pa
from diffeo_pa import assoc, fpca, io, prep
from diffeo_pa.errors import DiffeoPAError, NumericError, StageError, ValidationError
from diffeo_pa.geodesics import KernelConfig, MomentaField, apply_momenta, match_curves

log = logging.getLogger(__name__)

STAGES = ("prep", "match", "mfpca", "features", "assoc", "plots")
CACHE_ENV = "DIFFEO_PA_CACHE"
PLOT_PCS = 5
INTERACTION_POINTS = 50


@dataclass
class PipelineConfig:
    minutes: Path | None = None
    outcomes: Path | None = None
    covariates: Path | None = None
    out_dir: Path = Path("diffeo_pa_out")
    # prep
    target_df: float = 25.0
    max_nonwear: int = prep.MAX_NONWEAR
    min_wear: int = prep.MIN_WEAR
    min_days: int = prep.MIN_VALID_DAYS
    kernel: KernelConfig = field(default_factory=KernelConfig)
    # fpca
    pve_univariate: float = 0.99
    pve_multivariate: float = 0.90
    concat_bandwidth: float | None = 0.05
    # models
    covariate_columns: tuple[str, ...] = ("age", "bmi", "health")
    categorical: dict = field(default_factory=lambda: {"health": "excellent"})
    max_pcs: int | None = None
    select: bool = True
    lambda_grid: tuple[float, ...] | None = None
    # execution
    workers: int = 1
    cache_dir: Path | None = None
    render: bool = False
    seed: int = 0  # recorded only; no pipeline step draws random numbers

    def __post_init__(self):
        for name in ("minutes", "outcomes", "covariates", "out_dir", "cache_dir"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, Path(v))
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig(**self.kernel)
        self.covariate_columns = tuple(self.covariate_columns)
        if self.lambda_grid is not None:
            self.lambda_grid = tuple(float(v) for v in self.lambda_grid)
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")
        if not 0 < self.pve_univariate <= 1 or not 0 < self.pve_multivariate <= 1:
            raise ValidationError("PVE targets must lie in (0, 1]")
        if self.target_df <= 2:
            raise ValidationError("target_df must exceed 2")
        if self.max_pcs is not None and self.max_pcs < 1:
            raise ValidationError("max_pcs must be positive")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "PipelineConfig":
        """Accept either flat keys or the sectioned layout used by config files."""
        flat = {}
        for k, v in d.items():
            if k == "simulate":
                continue
            if k in ("inputs", "prep", "fpca", "models", "run") and isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
        if "out" in flat:
            flat["out_dir"] = flat.pop("out")
        unknown = set(flat) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown pipeline config keys: {sorted(unknown)}")
        if base_dir is not None:
            for key in ("minutes", "outcomes", "covariates", "out_dir", "cache_dir"):
                if flat.get(key) is not None and not Path(flat[key]).is_absolute():
                    flat[key] = Path(base_dir) / flat[key]
        try:
            return cls(**flat)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Path):
                d[k] = str(v)
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d

    def resolved_cache_dir(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        if env:
            return Path(env)
        if self.cache_dir is not None:
            return self.cache_dir
        return Path.home() / ".cache" / "diffeo_pa"

    def check_paths(self, stages=STAGES, provided=()) -> None:
        needs = {"prep": ["minutes"], "features": ["outcomes", "covariates"]}
        for stage in stages:
            for key in needs.get(stage, []):
                if key in provided:
                    continue
                path = getattr(self, key)
                if path is None or not path.exists():
                    raise ValidationError(f"input {key!r} not found: {path}")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.out_dir, os.W_OK):
            raise ValidationError(f"output directory {self.out_dir} is not writable")


def load_config(path) -> PipelineConfig:
    """Read a YAML (or JSON) pipeline config; relative paths resolve against its folder."""
    import yaml

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path} must hold a mapping")
    return PipelineConfig.from_dict(raw, base_dir=path.parent)


# --- hashing ----------------------------------------------------------------


def _sha(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(part)
        elif isinstance(part, np.ndarray):
            h.update(np.ascontiguousarray(part).tobytes())
        else:
            h.update(json.dumps(part, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()


def file_sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def frame_sha(df: pd.DataFrame) -> str:
    return _sha(list(df.columns), pd.util.hash_pandas_object(df, index=False).to_numpy())


def versions() -> dict:
    import matplotlib
    import numba
    import scipy

    return {
        "diffeo_pa": diffeo_pa.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "numba": numba.__version__,
        "matplotlib": matplotlib.__version__,
    }


# --- manifest ---------------------------------------------------------------


class Manifest:
    """Single writer for ``manifest.json``; rewritten after every stage."""

    def __init__(self, out_dir: Path, cfg: PipelineConfig):
        self.path = out_dir / "manifest.json"
        self.out_dir = out_dir
        previous = io.read_json(self.path) if self.path.exists() else {}
        self.previous = previous.get("stages", {})
        self.data = {
            "config": cfg.to_dict(),
            "config_hash": _sha(cfg.to_dict()),
            "versions": versions(),
            "stages": dict(self.previous),
            "status": "running",
        }

    def reusable(self, stage: str, key: str) -> bool:
        rec = self.previous.get(stage)
        if not rec or rec.get("key") != key or rec.get("status") != "ok":
            return False
        for rel, digest in rec.get("artifacts", {}).items():
            p = self.out_dir / rel
            if not p.exists() or file_sha(p) != digest:
                return False
        return True

    def record(self, stage: str, key: str, paths, *, cached: bool = False, extra: dict | None = None):
        self.data["stages"][stage] = {
            "key": key,
            "status": "ok",
            "cached": cached,
            "artifacts": {str(Path(p).relative_to(self.out_dir)): file_sha(p) for p in paths},
            **(extra or {}),
        }
        self.flush()

    def fail(self, stage: str, key: str, err: StageError):
        self.data["stages"][stage] = {
            "key": key,
            "status": "failed",
            "error": str(err),
            "participants": err.participants,
        }
        self.data["status"] = f"failed at {stage}"
        self.flush()

    def invalidate(self, stages):
        for s in stages:
            self.data["stages"].pop(s, None)

    def flush(self):
        io.write_json(self.path, self.data)


# --- context ----------------------------------------------------------------


@dataclass
class Context:
    cfg: PipelineConfig
    out: Path
    manifest: Manifest
    inputs: dict = field(default_factory=dict)  # in-memory frames overriding file inputs
    state: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)

    def stage_dir(self, name: str) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def need(self, name: str):
        if name not in self.state:
            self.state[name] = LOADERS[name](self)
        return self.state[name]

    def frame(self, name: str) -> pd.DataFrame:
        if name in self.inputs:
            return self.inputs[name]
        path = getattr(self.cfg, name)
        if path is None or not Path(path).exists():
            raise ValidationError(f"input {name!r} not found: {path}")
        if name == "minutes":
            return io.read_minutes_csv(path)
        return pd.read_csv(path, dtype={"participant_id": str}, float_precision="round_trip")

    def input_sha(self, name: str) -> str:
        if name in self.inputs:
            return frame_sha(self.inputs[name])
        path = getattr(self.cfg, name)
        if path is None or not Path(path).exists():
            raise ValidationError(f"input {name!r} not found: {path}")
        return file_sha(path)


# --- stage: prep ------------------------------------------------------------


def _prep_key(ctx: Context) -> str:
    c = ctx.cfg
    return _sha("prep", ctx.input_sha("minutes"), c.target_df, c.max_nonwear, c.min_wear, c.min_days)


def _run_prep(ctx: Context):
    c = ctx.cfg
    records = ctx.frame("minutes")
    try:
        scaled, smoothed, params, exclusions = prep.preprocess(
            records, c.target_df, max_nonwear=c.max_nonwear, min_wear=c.min_wear, min_days=c.min_days
        )
    except DiffeoPAError as exc:
        raise StageError("prep", sorted(records["participant_id"].astype(str).unique())[:50], exc) from exc
    d = ctx.stage_dir("prep")
    auc_rows = [{"participant_id": k[0], "visit": k[1], "net_auc": prep.net_auc(v)} for k, v in sorted(scaled.items())]
    delta_rows = [
        {"participant_id": pid, "period": eta, "delta_net_auc": prep.delta_net_auc(scaled[(pid, a)], scaled[(pid, b)])}
        for pid, eta, a, b in prep.transition_pairs(scaled.keys())
    ]
    paths = {
        "scaled": d / "curves_scaled.csv",
        "smoothed": d / "curves_smoothed.csv",
        "net_auc": d / "net_auc.csv",
        "delta": d / "delta_net_auc.csv",
        "summary": d / "summary.json",
    }
    io.write_curves_csv(paths["scaled"], scaled)
    io.write_curves_csv(paths["smoothed"], smoothed)
    pd.DataFrame(auc_rows, columns=["participant_id", "visit", "net_auc"]).to_csv(
        paths["net_auc"], index=False, float_format="%.17g"
    )
    pd.DataFrame(delta_rows, columns=["participant_id", "period", "delta_net_auc"]).to_csv(
        paths["delta"], index=False, float_format="%.17g"
    )
    io.write_json(
        paths["summary"],
        {
            "grand_mean": params.grand_mean,
            "grand_sd": params.grand_sd,
            "target_df": c.target_df,
            "smoothing_lambda": prep.smoothing_lambda(prep.minute_grid(), c.target_df),
            "n_curves": len(scaled),
            "n_transitions": len(delta_rows),
            "exclusions": exclusions,
        },
    )
    ctx.state["prep"] = {"scaled": scaled, "delta": pd.DataFrame(delta_rows)}
    return list(paths.values())


def _load_prep(ctx: Context):
    d = ctx.out / "prep"
    return {
        "scaled": io.read_curves_csv(d / "curves_scaled.csv"),
        "delta": pd.read_csv(d / "delta_net_auc.csv", dtype={"participant_id": str}, float_precision="round_trip"),
    }


# --- stage: match -----------------------------------------------------------


def _match_key(ctx: Context) -> str:
    return _sha("match", ctx.keys["prep"], ctx.cfg.kernel.to_dict())


def match_cache_key(source: np.ndarray, target: np.ndarray, kernel: KernelConfig) -> str:
    """Content hash of one matching problem."""
    return _sha("match-v1", source, target, kernel.to_dict())


def _match_one(job):
    pid, eta, source, target, kernel, cache_path = job
    if cache_path is not None and cache_path.exists():
        with np.load(cache_path) as z:
            info = json.loads(str(z["info"]))
            return pid, eta, z["control_points"], z["momenta"], info, True
    try:
        res = match_curves(source, target, kernel, participant_id=pid, period=eta)
    except NumericError as exc:
        return pid, eta, None, None, {"error": str(exc)}, False
    f = res.momenta_field
    info = {
        "energy": f.energy,
        "kernel_energy": res.kernel_energy,
        "attachment_residual": res.attachment_residual,
        "objective": res.objective,
        "iterations": res.iterations,
        "converged": res.converged,
        "message": res.message,
    }
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_path.with_name(cache_path.stem + f".{os.getpid()}.tmp.npz")
        np.savez(tmp, control_points=f.control_points, momenta=f.momenta, info=json.dumps(info))
        os.replace(tmp, cache_path)
    return pid, eta, f.control_points, f.momenta, info, False


def _run_match(ctx: Context):
    c = ctx.cfg
    scaled = ctx.need("prep")["scaled"]
    pairs = prep.transition_pairs(scaled.keys())
    if not pairs:
        raise StageError("match", [], ValidationError("no participant has two consecutive visits"))
    cache = c.resolved_cache_dir() / "momenta"
    jobs = []
    for pid, eta, a, b in pairs:
        src, tgt = scaled[(pid, a)], scaled[(pid, b)]
        key = match_cache_key(src.points, tgt.points, c.kernel)
        jobs.append((pid, eta, src, tgt, c.kernel, cache / f"{key}.npz"))
    results = _parallel_map(_match_one, jobs, c.workers)
    failed = [r[0] for r in results if r[2] is None]
    if failed:
        err = next(r[4]["error"] for r in results if r[2] is None)
        raise StageError("match", failed, NumericError(err))
    fields = [MomentaField.from_momenta(pid, eta, q, p) for pid, eta, q, p, _, _ in results]
    d = ctx.stage_dir("match")
    paths = {"momenta": d / "momenta.csv", "sidecar": d / "momenta.json", "energies": d / "energies.csv"}
    io.write_momenta_csv(paths["momenta"], fields)
    fits = [{"participant_id": pid, "period": eta, **info} for pid, eta, _, _, info, _ in results]
    io.write_json(
        paths["sidecar"],
        {
            "kernel": c.kernel.to_dict(),
            "n_fits": len(fits),
            "n_cache_hits": int(sum(r[5] for r in results)),
            "n_not_converged": int(sum(not f["converged"] for f in fits)),
            "fits": fits,
        },
    )
    energies = pd.DataFrame(
        [
            {
                "participant_id": f["participant_id"],
                "period": f["period"],
                assoc.ENERGY: f["energy"],
                "kernel_energy": f["kernel_energy"],
            }
            for f in fits
        ]
    )
    energies.to_csv(paths["energies"], index=False, float_format="%.17g")
    ctx.state["match"] = {"fields": fields, "energies": energies, "cache_hits": int(sum(r[5] for r in results))}
    return list(paths.values())


def _load_match(ctx: Context):
    d = ctx.out / "match"
    return {
        "fields": io.read_momenta_csv(d / "momenta.csv"),
        "energies": pd.read_csv(d / "energies.csv", dtype={"participant_id": str}, float_precision="round_trip"),
        "cache_hits": None,
    }


def _parallel_map(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (8 * workers))))


# --- stage: mfpca -----------------------------------------------------------


def _mfpca_key(ctx: Context) -> str:
    c = ctx.cfg
    return _sha("mfpca", ctx.keys["match"], c.pve_univariate, c.pve_multivariate, c.concat_bandwidth)


def _align(model: fpca.MfpcaModel, reference: fpca.MfpcaModel) -> fpca.MfpcaModel:
    """Flip components of ``model`` whose eigenfunctions point against ``reference``'s."""
    m = min(model.L, reference.L)
    for l in range(m):
        dot = sum(float(np.dot(model.eigenfunctions[d][l], reference.eigenfunctions[d][l])) for d in ("X", "Y"))
        if dot < 0:
            for d in ("X", "Y"):
                model.eigenfunctions[d][l] *= -1.0
            model.weights[:, l] *= -1.0
            model.all_weights[:, l] *= -1.0
            model.scores[:, l] *= -1.0
    return model


def _fit_period(fields, c: PipelineConfig):
    sx, sy = fpca.momenta_samples(fields)
    ux = fpca.ufpca(sx, c.pve_univariate)
    uy = fpca.ufpca(sy, c.pve_univariate)
    model = fpca.mfpca(ux, uy, c.pve_multivariate)
    concat = fpca.concat_ufpca(sx, sy, c.pve_univariate, bandwidth=c.concat_bandwidth)
    return model, ux, uy, concat


def _run_mfpca(ctx: Context):
    c = ctx.cfg
    fields = ctx.need("match")["fields"]
    periods = sorted({f.period for f in fields})
    d = ctx.stage_dir("mfpca")
    models, paths, score_rows = {}, [], []
    for eta in periods:
        group = sorted((f for f in fields if f.period == eta), key=lambda f: f.participant_id)
        try:
            model, ux, uy, concat = _fit_period(group, c)
        except DiffeoPAError as exc:
            raise StageError("mfpca", [f.participant_id for f in group], exc) from exc
        if models:
            _align(model, models[periods[0]]["model"])
        models[eta] = {"model": model, "concat": concat, "fields": group}
        p_model = d / f"mfpca_period{eta}.json"
        fpca.save_mfpca_json(p_model, model, ux, uy)
        p_concat = d / f"concat_period{eta}.json"
        io.write_json(
            p_concat,
            {
                "eigenvalues": concat.eigenvalues,
                "eigenfunctions": concat.eigenfunctions,
                "pve": concat.pve,
                "grid": concat.grid,
                "mean": concat.mean,
                "bandwidth": c.concat_bandwidth,
                "boundary_coupling": fpca.boundary_coupling(concat),
                "mfpca_boundary_coupling": fpca.boundary_coupling(model),
            },
        )
        paths += [p_model, p_concat]
        for i, f in enumerate(group):
            for l in range(model.L):
                score_rows.append((f.participant_id, eta, l + 1, float(model.scores[i, l])))
    p_scores = d / "scores.csv"
    io.write_scores_csv(p_scores, score_rows)
    p_pve = d / "pve.csv"
    pd.DataFrame(fpca.pve_table({eta: m["model"] for eta, m in models.items()})).to_csv(p_pve, index=False)
    ctx.state["mfpca"] = {"models": models, "scores": io.read_scores_wide(p_scores)}
    return paths + [p_scores, p_pve]


def _load_mfpca(ctx: Context):
    # downstream stages only need the score table from disk; plots refit cheaply
    d = ctx.out / "mfpca"
    fields = ctx.need("match")["fields"]
    models = {}
    ref = None
    for eta in sorted({f.period for f in fields}):
        group = sorted((f for f in fields if f.period == eta), key=lambda f: f.participant_id)
        model, _, _, concat = _fit_period(group, ctx.cfg)
        if ref is not None:
            _align(model, ref)
        ref = ref or model
        models[eta] = {"model": model, "concat": concat, "fields": group}
    return {"models": models, "scores": io.read_scores_wide(d / "scores.csv")}


# --- stage: features --------------------------------------------------------


def _features_key(ctx: Context) -> str:
    c = ctx.cfg
    return _sha(
        "features",
        ctx.keys["mfpca"],
        ctx.keys["prep"],
        ctx.input_sha("outcomes"),
        ctx.input_sha("covariates"),
        list(c.covariate_columns),
        c.categorical,
    )


def _run_features(ctx: Context):
    c = ctx.cfg
    scores = ctx.need("mfpca")["scores"]
    # stacking across periods keeps only components every period has
    shared = [col for col in scores.columns if col.startswith("pc") and scores[col].notna().all()]
    scores = scores[["participant_id", "period", *shared]]
    energies = ctx.need("match")["energies"][["participant_id", "period", assoc.ENERGY]]
    aucs = ctx.need("prep")["delta"]
    outcomes = ctx.frame("outcomes").astype({"participant_id": str})
    covariates = ctx.frame("covariates").astype({"participant_id": str})
    missing = [col for col in (assoc.BASELINE_PF, *c.covariate_columns) if col not in covariates]
    if missing:
        raise StageError("features", [], ValidationError(f"covariate table lacks columns {missing}"))
    covariates = covariates[["participant_id", assoc.BASELINE_PF, *c.covariate_columns]]
    categorical = {k: v for k, v in c.categorical.items() if k in c.covariate_columns}
    try:
        table = assoc.assemble_features(scores, energies, aucs, covariates, outcomes, categorical=categorical)
    except DiffeoPAError as exc:
        raise StageError("features", sorted(set(scores["participant_id"]))[:50], exc) from exc
    d = ctx.stage_dir("features")
    p_table, p_summary = d / "features.csv", d / "summary.json"
    table.data.to_csv(p_table, index=False, float_format="%.17g")
    io.write_json(
        p_summary,
        {
            "n_complete": table.n_complete,
            "n_dropped": table.n_dropped,
            "collinear": [list(x) for x in table.collinear],
            "correlations": table.correlations,
            "categorical": categorical,
        },
    )
    ctx.state["features"] = table
    return [p_table, p_summary]


def _load_features(ctx: Context):
    d = ctx.out / "features"
    summary = io.read_json(d / "summary.json")
    data = pd.read_csv(d / "features.csv", dtype={"participant_id": str}, float_precision="round_trip")
    for col in summary["categorical"]:
        data[col] = data[col].astype(str)
    return assoc.FeatureTable(
        data, summary["categorical"], summary["n_dropped"], [tuple(x) for x in summary["collinear"]], summary["correlations"]
    )


# --- stage: assoc -----------------------------------------------------------


def _assoc_key(ctx: Context) -> str:
    c = ctx.cfg
    return _sha("assoc", ctx.keys["features"], c.max_pcs, c.select, c.lambda_grid, list(c.covariate_columns))


def pc_columns(table: assoc.FeatureTable, max_pcs: int | None = None) -> list[str]:
    """PC score columns present for every stacked row, in order."""
    cols = []
    l = 1
    while f"pc{l}" in table.data and (max_pcs is None or l <= max_pcs):
        cols.append(f"pc{l}")
        l += 1
    return cols


def _run_assoc(ctx: Context):
    c = ctx.cfg
    table = ctx.need("features")
    pcs = pc_columns(table, c.max_pcs)
    try:
        report = assoc.run_models(table, pcs, list(c.covariate_columns), select=c.select, lambda_grid=c.lambda_grid)
    except DiffeoPAError as exc:
        raise StageError("assoc", sorted(set(table.data["participant_id"]))[:50], exc) from exc
    d = ctx.stage_dir("assoc")
    p_json, p_txt = d / "models.json", d / "tables.txt"
    out = report.to_dict()
    out["pc_columns"] = pcs
    out["never_penalized"] = [assoc.ENERGY, assoc.PERIOD, assoc.INTERACTION, assoc.BASELINE_PF, "intercept"]
    out["estimation"] = "ML; lasso with variance components frozen at the unpenalised ML fit"
    io.write_json(p_json, out)
    with open(p_txt, "w") as fh:
        fh.write(assoc.format_table(report.model1, "Model 1: deformation PC scores") + "\n\n")
        fh.write(assoc.format_table(report.model2, "Model 2: delta net-AUC") + "\n\n")
        for i, t in ((1, report.lrt1), (2, report.lrt2)):
            fh.write(f"Model {i} energy x period LRT: statistic={t.statistic:.4f} df={t.df} p={t.pvalue:.4g}\n")
    ctx.state["assoc"] = report
    return [p_json, p_txt]


def _load_assoc(ctx: Context):
    return io.read_json(ctx.out / "assoc" / "models.json")


# --- stage: plots -----------------------------------------------------------


def _plots_key(ctx: Context) -> str:
    return _sha("plots", ctx.keys["assoc"], ctx.keys["mfpca"], ctx.cfg.kernel.to_dict())


def _mean_curve(fields, scaled, eta):
    visit = prep.VISITS[eta]
    ys = np.array([scaled[(f.participant_id, visit)].values for f in fields])
    return prep.DiurnalCurve("mean", visit, prep.scaled_grid(), ys.mean(axis=0), prep.Stage.SCALED)


def _coef_dict(report) -> dict[int, dict]:
    if isinstance(report, assoc.ModelsReport):
        return {i: dict(zip(fit.names, map(float, fit.beta))) for i, fit in ((1, report.model1), (2, report.model2))}
    return {i: {n: v["estimate"] for n, v in report[f"model{i}"]["coefficients"].items()} for i in (1, 2)}


def interaction_curves(table: assoc.FeatureTable, coefs: dict, n_points: int = INTERACTION_POINTS) -> pd.DataFrame:
    """Predicted outcome over each period's observed energy range, other terms at their means."""
    df = table.data
    rows = []
    for eta, block in df.groupby(assoc.PERIOD):
        lo, hi = float(block[assoc.ENERGY].min()), float(block[assoc.ENERGY].max())
        energy = np.linspace(lo, hi, n_points)
        energy[0], energy[-1] = lo, hi
        base = coefs.get("intercept", 0.0)
        for name, b in coefs.items():
            if name in ("intercept", assoc.ENERGY, assoc.PERIOD, assoc.INTERACTION):
                continue
            base += b * _column_mean(df, name, table.categorical)
        pred = (
            base
            + coefs.get(assoc.ENERGY, 0.0) * energy
            + coefs.get(assoc.PERIOD, 0.0) * eta
            + coefs.get(assoc.INTERACTION, 0.0) * energy * eta
        )
        rows.append(pd.DataFrame({"period": int(eta), "energy": energy, "predicted_pf": pred}))
    return pd.concat(rows, ignore_index=True)


def _column_mean(df, name, categorical) -> float:
    if "[" in name:
        var, level = name[:-1].split("[", 1)
        return float((df[var].astype(str) == level).mean())
    if ":" in name:
        a, b = name.split(":", 1)
        return float((df[a] * df[b]).mean())
    return float(df[name].mean())


def _run_plots(ctx: Context):
    c = ctx.cfg
    models = ctx.need("mfpca")["models"]
    scaled = ctx.need("prep")["scaled"]
    table = ctx.need("features")
    report = ctx.state.get("assoc") or ctx.need("assoc")
    d = ctx.stage_dir("plots")
    paths = []
    for eta, m in sorted(models.items()):
        model, concat, group = m["model"], m["concat"], m["fields"]
        source = _mean_curve(group, scaled, eta)
        idx = np.arange(0, prep.N_MINUTES, c.kernel.control_stride)
        q = source.points[idx]
        mean_field = fpca.mean_momenta_field(model, q, eta)
        minutes = prep.unit_to_minutes(q[:, 0]) + prep.WINDOW_START - 1
        p_mean = d / f"mean_momenta_period{eta}.csv"
        pd.DataFrame(
            {"point_index": np.arange(len(q)), "clock_minute": minutes, "x": q[:, 0], "y": q[:, 1],
             "mx": mean_field.momenta[:, 0], "my": mean_field.momenta[:, 1]}
        ).to_csv(p_mean, index=False, float_format="%.10g")

        arrows, curves = [], []
        variants = [("mean", mean_field)]
        for l in range(1, min(model.L, PLOT_PCS) + 1):
            s = float(np.sqrt(model.eigenvalues[l - 1]))
            variants.append((f"pc{l}+", fpca.pc_deformation(model, mean_field, l, s)))
            variants.append((f"pc{l}-", fpca.pc_deformation(model, mean_field, l, -s)))
        for name, fld in variants:
            moved = apply_momenta(source, fld, c.kernel, dense=True)
            arrows.append(pd.DataFrame(
                {"component": name, "point_index": np.arange(len(q)), "x": q[:, 0], "y": q[:, 1],
                 "mx": fld.momenta[:, 0], "my": fld.momenta[:, 1]}
            ))
            curves.append(pd.DataFrame(
                {"component": name, "vertex": np.arange(prep.N_MINUTES), "source_x": source.grid,
                 "source_y": source.values, "deformed_x": moved[:, 0], "deformed_y": moved[:, 1]}
            ))
        p_arrows = d / f"pc_arrows_period{eta}.csv"
        p_curves = d / f"pc_curves_period{eta}.csv"
        pd.concat(arrows).to_csv(p_arrows, index=False, float_format="%.10g")
        pd.concat(curves).to_csv(p_curves, index=False, float_format="%.10g")

        p_overlay = d / f"mfpca_vs_concat_period{eta}.csv"
        _overlay(model, concat).to_csv(p_overlay, index=False, float_format="%.10g")
        paths += [p_mean, p_arrows, p_curves, p_overlay]

    coefs = _coef_dict(report)
    for i in (1, 2):
        p = d / f"interaction_model{i}.csv"
        interaction_curves(table, coefs[i]).to_csv(p, index=False, float_format="%.17g")
        paths.append(p)
    return paths


def _overlay(model: fpca.MfpcaModel, concat: fpca.FpcaModel, n: int = 3) -> pd.DataFrame:
    """Per-domain eigenfunctions of both fits; concatenated ones sign-aligned to MFPCA."""
    frames = []
    m = min(n, model.L, concat.n_components)
    for dom in ("X", "Y"):
        grid = model.grids[dom]
        data = {"domain": dom, "point_index": np.arange(grid.size), "x": grid}
        for l in range(m):
            psi = model.eigenfunctions[dom][l]
            phi = concat.eigenfunctions[l, concat.domain_slice(dom)]
            full_dot = sum(
                float(np.dot(model.eigenfunctions[dd][l], concat.eigenfunctions[l, concat.domain_slice(dd)]))
                for dd in ("X", "Y")
            )
            data[f"mfpca_pc{l + 1}"] = psi
            data[f"concat_pc{l + 1}"] = phi if full_dot >= 0 else -phi
        frames.append(pd.DataFrame(data))
    return pd.concat(frames, ignore_index=True)


def _load_plots(ctx: Context):
    return None


RUNNERS = {
    "prep": _run_prep,
    "match": _run_match,
    "mfpca": _run_mfpca,
    "features": _run_features,
    "assoc": _run_assoc,
    "plots": _run_plots,
}
KEYS = {
    "prep": _prep_key,
    "match": _match_key,
    "mfpca": _mfpca_key,
    "features": _features_key,
    "assoc": _assoc_key,
    "plots": _plots_key,
}
LOADERS = {
    "prep": _load_prep,
    "match": _load_match,
    "mfpca": _load_mfpca,
    "features": _load_features,
    "assoc": _load_assoc,
    "plots": _load_plots,
}


@dataclass
class PipelineResult:
    out_dir: Path
    manifest: dict
    state: dict
    ran: list[str]
    reused: list[str]


def run_pipeline(
    cfg: PipelineConfig,
    *,
    stages=STAGES,
    inputs: dict | None = None,
    force: bool = False,
) -> PipelineResult:
    """Run ``stages`` (all by default) in order; see the module docstring for caching.

    ``inputs`` may map ``minutes``, ``outcomes`` and ``covariates`` to data
    frames that replace the corresponding files.
    """
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValidationError(f"unknown stages {unknown}")
    inputs = dict(inputs or {})
    cfg.check_paths(stages, provided=inputs)
    out = cfg.out_dir
    manifest = Manifest(out, cfg)
    ctx = Context(cfg, out, manifest, inputs)
    ran, reused = [], []
    first = STAGES.index(stages[0])
    # keys of stages before the requested range come from artifacts already on disk
    for name in STAGES[:first]:
        rec = manifest.previous.get(name)
        if not rec or rec.get("status") != "ok":
            raise ValidationError(f"stage {name!r} has no recorded artifacts in {out}; run it first")
        ctx.keys[name] = rec["key"]
    for name in stages:
        key = KEYS[name](ctx)
        ctx.keys[name] = key
        if not force and manifest.reusable(name, key):
            manifest.data["stages"][name]["cached"] = True
            reused.append(name)
            log.info("stage %s: reusing artifacts", name)
            continue
        log.info("stage %s: running", name)
        try:
            paths = RUNNERS[name](ctx)
        except StageError as err:
            manifest.fail(name, key, err)
            raise
        except DiffeoPAError as exc:
            err = StageError(name, [], exc)
            manifest.fail(name, key, err)
            raise err from exc
        extra = {}
        if name == "match":
            extra["cache_hits"] = ctx.state["match"]["cache_hits"]
        manifest.record(name, key, paths, extra=extra)
        ran.append(name)
    # stages after the requested range are stale once anything upstream reran
    if ran:
        manifest.invalidate([s for s in STAGES[STAGES.index(stages[-1]) + 1 :]])
    manifest.data["status"] = "ok"
    manifest.flush()
    if cfg.render and "plots" in stages:
        from diffeo_pa.plotting import render_report

        render_report(out)
    return PipelineResult(out, manifest.data, ctx.state, ran, reused)
