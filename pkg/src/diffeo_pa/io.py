"""Readers and writers for every on-disk artifact."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from diffeo_pa.errors import ValidationError
from diffeo_pa.geodesics import MomentaField
from diffeo_pa.prep import DiurnalCurve, N_MINUTES, Stage

MINUTE_COLUMNS = ["participant_id", "visit", "day", "minute", "va", "ha", "ppa", "wear"]
CURVE_COLUMNS = ["participant_id", "visit", "x", "y"]
MOMENTA_COLUMNS = ["participant_id", "period", "point_index", "x", "y", "mx", "my"]
SCORE_COLUMNS = ["participant_id", "period", "pc", "score"]

MAGIC = b"DPA1"
_HEADER = struct.Struct("<4sIB7x")


def read_minutes_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"participant_id": str, "visit": str}, float_precision="round_trip")
    missing = set(MINUTE_COLUMNS) - set(df.columns)
    if missing:
        raise ValidationError(f"{path}: missing columns {sorted(missing)}")
    if not df["minute"].between(0, 1439).all():
        raise ValidationError(f"{path}: minute outside 0-1439")
    if not df["wear"].isin([0, 1]).all():
        raise ValidationError(f"{path}: wear must be 0 or 1")
    counts = df[["va", "ha", "ppa"]].to_numpy(float)
    if not np.all(np.isfinite(counts)) or np.any(counts < 0):
        raise ValidationError(f"{path}: axis counts must be finite and non-negative")
    return df[MINUTE_COLUMNS]


def write_minutes_csv(path, df: pd.DataFrame) -> None:
    df[MINUTE_COLUMNS].to_csv(path, index=False)


def write_curves_csv(path, curves: Mapping[tuple, DiurnalCurve]) -> None:
    frames = [
        pd.DataFrame({"participant_id": c.participant_id, "visit": c.visit, "x": c.grid, "y": c.values})
        for _, c in sorted(curves.items())
    ]
    pd.concat(frames, ignore_index=True)[CURVE_COLUMNS].to_csv(path, index=False, float_format="%.17g")


def read_curves_csv(path, stage: Stage = Stage.SCALED) -> dict[tuple, DiurnalCurve]:
    df = pd.read_csv(path, dtype={"participant_id": str, "visit": str}, float_precision="round_trip")
    out = {}
    for (pid, visit), block in df.groupby(["participant_id", "visit"], sort=True):
        if len(block) != N_MINUTES:
            raise ValidationError(f"{path}: curve {pid}/{visit} has {len(block)} rows, expected {N_MINUTES}")
        out[(pid, visit)] = DiurnalCurve(pid, visit, block["x"].to_numpy(), block["y"].to_numpy(), stage)
    return out


def write_momenta_csv(path, fields: Iterable[MomentaField]) -> None:
    frames = []
    for f in fields:
        P = f.momenta.shape[0]
        frames.append(
            pd.DataFrame(
                {
                    "participant_id": f.participant_id,
                    "period": f.period,
                    "point_index": np.arange(P),
                    "x": f.control_points[:, 0],
                    "y": f.control_points[:, 1],
                    "mx": f.momenta[:, 0],
                    "my": f.momenta[:, 1],
                }
            )
        )
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=MOMENTA_COLUMNS)
    df[MOMENTA_COLUMNS].to_csv(path, index=False, float_format="%.17g")


def read_momenta_csv(path) -> list[MomentaField]:
    df = pd.read_csv(path, dtype={"participant_id": str}, float_precision="round_trip")
    out = []
    for (pid, period), block in df.groupby(["participant_id", "period"], sort=True):
        block = block.sort_values("point_index")
        out.append(
            MomentaField.from_momenta(
                pid, int(period), block[["x", "y"]].to_numpy(), block[["mx", "my"]].to_numpy()
            )
        )
    return out


def write_momenta_binary(path, field: MomentaField) -> None:
    """16-byte header (magic, P as uint32, period as uint8, 7 pad) then P x 4 float64 rows ``x, y, mx, my``."""
    P = field.momenta.shape[0]
    body = np.column_stack([field.control_points, field.momenta]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, P, int(field.period)))
        fh.write(body.tobytes(order="C"))


def read_momenta_binary(path, participant_id: str = "") -> MomentaField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, P, period = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + P * 4 * 8
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(P, 4)
    return MomentaField.from_momenta(participant_id, period, body[:, :2].copy(), body[:, 2:].copy())


def write_scores_csv(path, rows: Iterable[tuple]) -> None:
    pd.DataFrame(list(rows), columns=SCORE_COLUMNS).to_csv(path, index=False, float_format="%.17g")


def read_scores_wide(path) -> pd.DataFrame:
    """Scores CSV pivoted to one row per (participant, period) with ``pc1, pc2, ...`` columns."""
    df = pd.read_csv(path, dtype={"participant_id": str}, float_precision="round_trip")
    wide = df.pivot_table(index=["participant_id", "period"], columns="pc", values="score").reset_index()
    wide.columns = [c if isinstance(c, str) else f"pc{int(c)}" for c in wide.columns]
    return wide


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
