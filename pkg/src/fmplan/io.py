"""On-disk formats: FMPL checkpoints, case/plan JSON, PGM images and CSV tables."""
from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .domain import Arc, Case, MachineConstraints, Phantom, Plan, Provenance
from .dose import build_deposition, compute_dose
from .leafseq import Aperture, SequencedPlan

MAGIC = b"FMPL"
VERSION = 1
PGM_MAX = 65535


class DataError(ValueError):
    """Malformed or missing input data."""


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# checkpoints

def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """FMPL magic, u32 version, u64 metadata length, JSON metadata, little-endian f32 payload."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} is not finite")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset,
                        "length": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    meta = _dumps({"tensors": entries, "metadata": metadata or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        for ch in chunks:
            fh.write(ch)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise DataError(f"{path} is not an FMPL checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        head = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint metadata in {path}") from exc
    payload = np.frombuffer(raw[16 + n:], dtype="<f4")
    total = sum(e["length"] for e in head["tensors"])
    if payload.size != total:
        raise DataError(f"checkpoint payload has {payload.size} floats, expected {total}")
    tensors = {}
    for e in head["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["length"]]
        tensors[e["name"]] = chunk.astype(np.float64).reshape(tuple(e["shape"]))
    return tensors, head["metadata"]


# run-length encoding

def rle_encode(a: np.ndarray) -> list:
    """[[value, count], ...] over the C-order flattening."""
    flat = np.asarray(a).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], change])
    counts = np.diff(np.concatenate([starts, [flat.size]]))
    return [[flat[s].item(), int(c)] for s, c in zip(starts, counts)]


def rle_decode(runs: list, shape, dtype=np.float64) -> np.ndarray:
    if not runs:
        return np.zeros(shape, dtype=dtype)
    vals = np.array([r[0] for r in runs], dtype=dtype)
    counts = np.array([r[1] for r in runs], dtype=np.int64)
    out = np.repeat(vals, counts)
    if out.size != int(np.prod(shape)):
        raise DataError("run-length data does not match shape")
    return out.reshape(shape)


# cases and plans

def plan_to_dict(plan: Plan) -> dict:
    d = {"fluence": np.asarray(plan.fluence).tolist(), "mu": np.asarray(plan.mu).tolist(),
         "provenance": plan.provenance.value}
    if plan.leaves is not None:
        d["leaves"] = np.asarray(plan.leaves).tolist()
    return d


def plan_from_dict(d: dict) -> Plan:
    try:
        leaves = np.asarray(d["leaves"], dtype=np.float64) if "leaves" in d else None
        return Plan(np.asarray(d["fluence"], dtype=np.float64), np.asarray(d["mu"], dtype=np.float64),
                    Provenance(d.get("provenance", Provenance.GENERATED.value)), leaves)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed plan: {exc}") from exc


def case_to_dict(case: Case) -> dict:
    p = case.phantom
    c = case.constraints
    return {
        "format": "fmplan-case/1",
        "case_id": case.case_id,
        "seed": case.seed,
        "attempts": case.attempts,
        "grid_shape": list(p.mu.shape),
        "n_cp": case.arc.n_cp,
        "constraints": {k: getattr(c, k) for k in c.__dataclass_fields__},
        "phantom": {
            "seed": p.seed,
            "mu": rle_encode(p.mu),
            "body": rle_encode(p.body_mask.astype(np.uint8)),
            "ptv": rle_encode(p.ptv_mask.astype(np.uint8)),
            "oars": [rle_encode(m.astype(np.uint8)) for m in p.oar_masks],
        },
        "reference_plan": plan_to_dict(case.reference_plan),
    }


def case_from_dict(d: dict) -> Case:
    """Rebuild a case; the deposition operator and target dose are recomputed from the stored geometry."""
    try:
        if d.get("format") != "fmplan-case/1":
            raise DataError("not an fmplan case file")
        shape = tuple(d["grid_shape"])
        ph = d["phantom"]
        phantom = Phantom(
            mu=rle_decode(ph["mu"], shape),
            ptv_mask=rle_decode(ph["ptv"], shape, np.uint8).astype(bool),
            oar_masks=[rle_decode(o, shape, np.uint8).astype(bool) for o in ph["oars"]],
            body_mask=rle_decode(ph["body"], shape, np.uint8).astype(bool),
            seed=int(ph["seed"]),
        )
        c = MachineConstraints(**d["constraints"])
        arc = Arc(int(d["n_cp"]))
        plan = plan_from_dict(d["reference_plan"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed case: {exc}") from exc
    op = build_deposition(phantom, arc, c)
    target = compute_dose(op, plan.fluence, plan.mu)
    return Case(d["case_id"], int(d["seed"]), phantom, arc, c, target, plan, int(d.get("attempts", 1)), op)


def write_json(path, obj) -> None:
    Path(path).write_text(_dumps(obj) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc.msg}") from exc


def save_case(path, case: Case) -> None:
    write_json(path, case_to_dict(case))


def load_case(path) -> Case:
    return case_from_dict(read_json(path))


def sequenced_to_dict(sp: SequencedPlan) -> dict:
    return {
        "apertures": [{"left": a.left.tolist(), "right": a.right.tolist(), "intensity": a.intensity,
                       "closed": a.closed.astype(int).tolist()} for a in sp.apertures],
        "mu": np.asarray(sp.mu).tolist(),
        "f_ls": np.asarray(sp.f_ls).tolist(),
    }


def sequenced_from_dict(d: dict) -> SequencedPlan:
    aps = [Aperture(np.asarray(a["left"], float), np.asarray(a["right"], float), float(a["intensity"]),
                    np.asarray(a["closed"], dtype=bool)) for a in d["apertures"]]
    return SequencedPlan(aps, np.asarray(d["mu"], float), np.asarray(d["f_ls"], float))


# images

def pgm_bytes(img: np.ndarray, vmax: float | None = None) -> bytes:
    """Plain (P2) 16-bit PGM; pixel = round(65535 * clamp(v / vmax, 0, 1)), vmax noted in a comment."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    if vmax is None:
        vmax = float(img.max())
    scale = np.clip(img / vmax, 0.0, 1.0) if vmax > 0 else np.zeros_like(img)
    px = np.rint(PGM_MAX * scale).astype(np.int64)
    h, w = img.shape
    lines = ["P2", f"# vmax={vmax!r}", f"{w} {h}", str(PGM_MAX)]
    lines += [" ".join(str(v) for v in row) for row in px]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_pgm(path, img: np.ndarray, vmax: float | None = None) -> None:
    Path(path).write_bytes(pgm_bytes(img, vmax))


def read_pgm(path) -> tuple[np.ndarray, float]:
    """Pixel values and the vmax from the comment line."""
    text = Path(path).read_text().split("\n")
    if text[0] != "P2":
        raise DataError(f"{path} is not a plain PGM")
    vmax = float(text[1].split("=", 1)[1])
    w, h = (int(x) for x in text[2].split())
    px = np.array([int(v) for line in text[4:4 + h] for v in line.split()], dtype=np.int64)
    return px.reshape(h, w), vmax


def write_dose_pgms(out_dir, dose: np.ndarray, stem: str = "dose") -> list[Path]:
    """One PGM per axial slice, all sharing the volume maximum."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vmax = float(dose.max())
    paths = []
    for s in range(dose.shape[2]):
        p = out_dir / f"{stem}_z{s:02d}.pgm"
        write_pgm(p, dose[:, :, s], vmax)
        paths.append(p)
    return paths


def write_map_grid(path, maps: np.ndarray, cols: int = 8, vmax: float | None = None) -> None:
    """Tile (N, H, W) maps into one PGM with one-pixel gutters."""
    maps = np.asarray(maps, dtype=np.float64)
    n, h, w = maps.shape
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for i, m in enumerate(maps):
        r, c = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = m
    write_pgm(path, grid, float(maps.max()) if vmax is None else vmax)


# tables

def fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


TRACE_HEADER = ["step", "L_dose", "L_cont_z", "L_cont_mu", "total"]
METRICS_HEADER = ["case_id", "optimizer", "steps", "stage", "mae", "mae_ptv", "mae_oars", "psnr", "ssim", "hi",
                  "frechet", "loss", "seconds"]


def write_trace(path, rows) -> None:
    write_csv(path, TRACE_HEADER, rows)


def write_dvh(path, curve) -> None:
    write_csv(path, ["dose", "volume"], zip(curve.doses.tolist(), curve.volume.tolist()))
