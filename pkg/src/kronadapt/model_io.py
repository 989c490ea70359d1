"""On-disk formats.

Matrix container (``.kamx``), all integers little-endian::

    offset  size  field
    0       4     magic b"KAMX"
    4       2     format version (u16), currently 1
    6       8     rows (u64)
    14      8     cols (u64)
    22      8*rows*cols  float64 payload, row-major

An adapter checkpoint is a directory holding ``manifest.json`` plus one
container per array. The manifest lists every payload with its shape and
SHA-256 digest; it never records absolute paths or timestamps, so saving the
same adapter twice produces identical bytes.

Reports (rank decisions, cost reports, training logs, comparisons) are
written as a CSV table and a JSON document carrying the same values. Floats
use 17 significant digits so they round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .adapters import (Adapter, CostReport, FullAdapter, LoraAdapter, PissaAdapter,
                       SokaAdapter)
from .errors import ConsistencyError, CorruptFileError, DimensionError, FormatError, VersionError
from .rank import RankDecision, RankPolicy, manual_decision, select_rank
from .tensor import KronShape, as_matrix
from .toybench import ComparisonReport, MethodSummary, TrainLog

MAGIC = b"KAMX"
MATRIX_VERSION = 1
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHQQ")
MANIFEST = "manifest.json"


# --------------------------------------------------------------------------
# atomic writes
# --------------------------------------------------------------------------

def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# matrices
# --------------------------------------------------------------------------

def matrix_bytes(M) -> bytes:
    M = as_matrix(M, "M")
    rows, cols = M.shape
    return _HEADER.pack(MAGIC, MATRIX_VERSION, rows, cols) + M.astype("<f8").tobytes(order="C")


def matrix_from_bytes(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[:len(data[:4])]:
            raise FormatError(f"{source}: not a KAMX file")
        raise CorruptFileError(f"{source}: header truncated ({len(data)} bytes)")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise VersionError(f"{source}: unsupported version {version}")
    if rows < 1 or cols < 1:
        raise CorruptFileError(f"{source}: invalid dimensions {rows}x{cols}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "has trailing bytes"
        raise CorruptFileError(f"{source}: payload {kind} ({len(data)} of {expected} bytes)")
    M = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols)
    return M.astype(np.float64)


def save_matrix(M, path) -> None:
    atomic_write(path, matrix_bytes(M))


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CorruptFileError(f"{path}: no such file") from None
    return matrix_from_bytes(data, str(path))


# --------------------------------------------------------------------------
# structured text with 17-digit floats
# --------------------------------------------------------------------------

def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with floats at 17 significant digits and sorted keys."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}"
                 for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in seq):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in seq) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_report(stem, header: list[str], rows: list[list], document: dict) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json``; returns both paths."""
    stem = Path(stem)
    csv_path = stem.with_suffix(".csv")
    json_path = stem.with_suffix(".json")
    atomic_write(csv_path, csv_text(header, rows).encode())
    atomic_write(json_path, (dumps(document) + "\n").encode())
    return csv_path, json_path


# --------------------------------------------------------------------------
# report encodings
# --------------------------------------------------------------------------

RANK_HEADER = ["k", "sigma", "energy", "gap", "r_energy", "r_elbow", "r_final",
               "clamped", "mode", "tau", "r_min", "r_max"]


def policy_dict(policy: RankPolicy) -> dict:
    return {"tau": policy.tau, "r_min": policy.r_min, "r_max": policy.r_max,
            "log_gaps": policy.log_gaps}


def rank_decision_dict(d: RankDecision) -> dict:
    return {
        "spectrum": list(d.spectrum),
        "energy_curve": list(d.energy_curve),
        "gaps": list(d.gaps),
        "r_energy": d.r_energy,
        "r_elbow": d.r_elbow,
        "r_final": d.r_final,
        "clamped": d.clamped,
        "mode": d.mode,
        "policy": policy_dict(d.policy),
    }


def rank_decision_from_dict(doc: dict) -> RankDecision:
    pol = doc.get("policy", {})
    return RankDecision(
        spectrum=tuple(doc["spectrum"]),
        energy_curve=tuple(doc["energy_curve"]),
        gaps=tuple(doc["gaps"]),
        r_energy=int(doc["r_energy"]),
        r_elbow=int(doc["r_elbow"]),
        r_final=int(doc["r_final"]),
        clamped=bool(doc["clamped"]),
        policy=RankPolicy(tau=pol.get("tau", 0.95), r_min=pol.get("r_min", 1),
                          r_max=pol.get("r_max"), log_gaps=pol.get("log_gaps", False)),
        mode=doc.get("mode", "auto"),
    )


def write_rank_decision(d: RankDecision, stem):
    rows = []
    for k, (s, e) in enumerate(zip(d.spectrum, d.energy_curve), start=1):
        gap = d.gaps[k - 1] if k - 1 < len(d.gaps) else None
        rows.append([k, s, e, gap, d.r_energy, d.r_elbow, d.r_final, d.clamped, d.mode,
                     d.policy.tau, d.policy.r_min, d.policy.r_max])
    return write_report(stem, RANK_HEADER, rows, rank_decision_dict(d))


COST_HEADER = ["method", "trainable_params", "matvec_flops", "dense_equivalent_flops"]


def write_cost_reports(reports: dict[str, CostReport], stem, extra: dict | None = None):
    rows = [[name, r.trainable_params, r.matvec_flops, r.dense_equivalent_flops]
            for name, r in reports.items()]
    doc = {"methods": {name: asdict(r) for name, r in reports.items()}}
    if extra:
        doc.update(extra)
    return write_report(stem, COST_HEADER, rows, doc)


TRAIN_HEADER = ["step", "loss", "grad_norm"]


def train_log_dict(lg: TrainLog) -> dict:
    return {
        "method": lg.method,
        "task_id": lg.task_id,
        "steps": lg.steps,
        "failed": lg.failed,
        "failed_step": lg.failed_step,
        "trainable_params": lg.trainable_params,
        "rank": lg.rank,
        "step": list(lg.step),
        "loss": list(lg.loss),
        "grad_norm": list(lg.grad_norm),
    }


def write_train_log(lg: TrainLog, stem):
    rows = [[s, l, g] for s, l, g in zip(lg.step, lg.loss, lg.grad_norm)]
    return write_report(stem, TRAIN_HEADER, rows, train_log_dict(lg))


COMPARISON_HEADER = [f.name for f in fields(MethodSummary)]


def write_comparison(report: ComparisonReport, stem):
    rows = [[getattr(s, h) for h in COMPARISON_HEADER] for s in report.methods]
    doc = {"task_id": report.task_id, "steps": report.steps, "reference": report.reference,
           "methods": [asdict(s) for s in report.methods]}
    return write_report(stem, COMPARISON_HEADER, rows, doc)


def write_curves(logs: list[TrainLog], path) -> Path:
    """Plot-ready columns: step, then loss and grad_norm per method."""
    header = ["step"]
    for lg in logs:
        header += [f"loss_{lg.method}", f"grad_norm_{lg.method}"]
    n = max(lg.steps for lg in logs)
    rows = []
    for k in range(n):
        row = [k]
        for lg in logs:
            row += [lg.loss[k], lg.grad_norm[k]] if k < len(lg.loss) else [None, None]
        rows.append(row)
    path = Path(path)
    atomic_write(path, csv_text(header, rows).encode())
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# --------------------------------------------------------------------------
# adapter checkpoints
# --------------------------------------------------------------------------

def _arrays(adapter: Adapter) -> dict[str, np.ndarray]:
    """Checkpoint payloads as 2-D matrices, keyed by file stem."""
    out = {"base": adapter.base}
    if isinstance(adapter, SokaAdapter):
        out["sigma"] = adapter.sigma.reshape(-1, 1)
        for k in range(adapter.rank):
            out[f"U_{k}"] = adapter.U[k]
            out[f"V_{k}"] = adapter.V[k]
    elif isinstance(adapter, FullAdapter):
        out["W"] = adapter.W
    else:
        out["A"] = adapter.A
        out["B"] = adapter.B
    return out


def save_adapter(adapter: Adapter, path, state: str = "init", seeds: dict | None = None,
                 spectrum=None) -> Path:
    """Write a checkpoint directory.

    ``state`` labels the checkpoint (``"init"`` right after initialization,
    ``"trained"`` otherwise). ``spectrum`` defaults to the rank decision's
    spectrum for SoKA adapters.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = _arrays(adapter)
    if isinstance(adapter, SokaAdapter) and adapter.rank == 0:
        arrays.pop("sigma")
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": adapter.kind,
        "state": state,
        "rows": adapter.out_dim,
        "cols": adapter.in_dim,
        "seeds": dict(seeds or {}),
        "files": {},
    }
    if isinstance(adapter, SokaAdapter):
        manifest["shape"] = list(adapter.shape.as_tuple())
        manifest["rank"] = adapter.rank
        if adapter.rank_decision is not None:
            d = adapter.rank_decision
            manifest["rank_decision"] = {
                "r_energy": d.r_energy, "r_elbow": d.r_elbow, "r_final": d.r_final,
                "clamped": d.clamped, "mode": d.mode, "policy": policy_dict(d.policy)}
            manifest["tau"] = d.policy.tau
            if spectrum is None:
                spectrum = d.spectrum
    elif isinstance(adapter, (LoraAdapter, PissaAdapter)):
        manifest["rank"] = adapter.rank
        manifest["scale"] = adapter.scale
    if spectrum is not None:
        arrays["spectrum"] = np.asarray(spectrum, dtype=np.float64).reshape(-1, 1)
    for name, arr in arrays.items():
        data = matrix_bytes(arr)
        fname = f"{name}.kamx"
        atomic_write(path / fname, data)
        manifest["files"][name] = {"file": fname, "rows": int(arr.shape[0]),
                                   "cols": int(arr.shape[1]),
                                   "sha256": hashlib.sha256(data).hexdigest()}
    atomic_write(path / MANIFEST, (dumps(manifest) + "\n").encode())
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text()
    except FileNotFoundError:
        raise CorruptFileError(f"{path}: missing {MANIFEST}") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path / MANIFEST}: invalid JSON ({exc})") from None
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version!r}")
    return manifest


def verify_checksums(path) -> list[str]:
    """Names of payloads whose bytes no longer match the manifest digest."""
    path = Path(path)
    manifest = read_manifest(path)
    bad = []
    for name, entry in manifest["files"].items():
        try:
            data = (path / entry["file"]).read_bytes()
        except FileNotFoundError:
            bad.append(name)
            continue
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            bad.append(name)
    return bad


def _load_payload(path: Path, manifest: dict, name: str) -> np.ndarray:
    entry = manifest["files"].get(name)
    if entry is None:
        raise CorruptFileError(f"{path}: manifest lists no payload {name!r}")
    file = path / entry["file"]
    if not file.exists():
        raise CorruptFileError(f"{path}: missing payload file {entry['file']}")
    M = load_matrix(file)
    if not np.all(np.isfinite(M)):
        raise CorruptFileError(f"{file}: payload holds NaN or Inf")
    if M.shape != (entry["rows"], entry["cols"]):
        raise ConsistencyError(
            f"{file}: payload is {M.shape[0]}x{M.shape[1]}, manifest says "
            f"{entry['rows']}x{entry['cols']}")
    return M


def load_adapter(path) -> Adapter:
    """Rebuild an adapter from a checkpoint directory."""
    path = Path(path)
    manifest = read_manifest(path)
    kind = manifest.get("kind")
    rows, cols = manifest["rows"], manifest["cols"]
    base = _load_payload(path, manifest, "base")
    if base.shape != (rows, cols):
        raise ConsistencyError(f"{path}: base is {base.shape}, manifest says {(rows, cols)}")
    try:
        if kind == "soka":
            shape = KronShape(*manifest["shape"])
            r = int(manifest["rank"])
            if (shape.rows, shape.cols) != (rows, cols):
                raise ConsistencyError(f"{path}: shape {shape.as_tuple()} does not compose to "
                                       f"{rows}x{cols}")
            if r:
                sigma = _load_payload(path, manifest, "sigma")
                if sigma.shape != (r, 1):
                    raise ConsistencyError(f"{path}: sigma has {sigma.shape[0]} entries, rank {r}")
                U = [_load_payload(path, manifest, f"U_{k}") for k in range(r)]
                V = [_load_payload(path, manifest, f"V_{k}") for k in range(r)]
                for k in range(r):
                    if U[k].shape != (shape.m, shape.n) or V[k].shape != (shape.p, shape.q):
                        raise ConsistencyError(f"{path}: factor {k} shapes disagree with {shape}")
            else:
                sigma, U, V = np.zeros((0, 1)), [], []
            decision = None
            if "spectrum" in manifest["files"] and "rank_decision" in manifest:
                spec = _load_payload(path, manifest, "spectrum")[:, 0]
                rd = manifest["rank_decision"]
                pol = rd["policy"]
                policy = RankPolicy(pol["tau"], pol["r_min"], pol["r_max"], pol["log_gaps"])
                decision = (manual_decision(spec, rd["r_final"], policy) if rd["mode"] == "manual"
                            else select_rank(spec, policy))
            return SokaAdapter(base, sigma[:, 0], np.array(U).reshape(r, shape.m, shape.n),
                               np.array(V).reshape(r, shape.p, shape.q), shape, decision)
        if kind in ("lora", "pissa"):
            A = _load_payload(path, manifest, "A")
            B = _load_payload(path, manifest, "B")
            cls = LoraAdapter if kind == "lora" else PissaAdapter
            return cls(base, A, B, manifest.get("scale", 1.0))
        if kind == "full":
            return FullAdapter(_load_payload(path, manifest, "W"))
    except DimensionError as exc:
        raise ConsistencyError(f"{path}: {exc}") from None
    raise CorruptFileError(f"{path}: unknown adapter kind {kind!r}")


def load_spectrum(path) -> np.ndarray | None:
    path = Path(path)
    manifest = read_manifest(path)
    if "spectrum" not in manifest["files"]:
        return None
    return _load_payload(path, manifest, "spectrum")[:, 0]
