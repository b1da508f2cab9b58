"""Storage utilities: atomic writes, CSV tables, draw files and run manifests."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .config import FLOAT_FORMAT, MANIFEST_SUFFIX

logger = logging.getLogger(__name__)

DRAWS_MAGIC = b"THERMOPOOL-DRAWS 1\n"


def atomic_write(path: str | Path, data: bytes) -> None:
    """Atomic write: write to temp file in same dir, then replace."""
    path = str(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as tmp:
            tmp.write(data)
            tmp.flush()
            os.fsync(tmp.fileno())
        os.replace(tmp_path, path)
    finally:
        try:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
        except OSError:
            pass


def write_csv(path: str | Path, frame: pd.DataFrame) -> None:
    """Write a table with a fixed float format so identical inputs give identical bytes."""
    buf = io.StringIO()
    frame.to_csv(buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    atomic_write(path, buf.getvalue().encode("utf-8"))
    logger.info("Wrote %d rows to %s", len(frame), path)


def file_digest(path: str | Path) -> str:
    """SHA256 content hash of a file."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_digests(paths: Iterable[str | Path]) -> Dict[str, str]:
    digests: Dict[str, str] = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for child in sorted(p.glob("*.csv")):
                digests[str(child)] = file_digest(child)
        elif p.exists():
            digests[str(p)] = file_digest(p)
    return digests


# -------------------- posterior draws --------------------
def save_draws(path: str | Path, draws: Any) -> None:
    """Serialize PosteriorDraws as a magic line, a JSON header line and raw float64 blocks.

    Block order: draws[chain][iteration][parameter], then each sampler
    statistic as [chain][iteration] in header order.
    """
    stat_names = sorted(draws.sampler_stats)
    header = {
        "shape": list(draws.draws.shape),
        "column_labels": list(draws.column_labels),
        "stat_names": stat_names,
        "metadata": draws.metadata,
    }
    buf = io.BytesIO()
    buf.write(DRAWS_MAGIC)
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    buf.write(b"\n")
    buf.write(np.ascontiguousarray(draws.draws, dtype="<f8").tobytes())
    for name in stat_names:
        buf.write(np.ascontiguousarray(draws.sampler_stats[name], dtype="<f8").tobytes())
    atomic_write(path, buf.getvalue())
    logger.info("Saved draws %s to %s", tuple(draws.draws.shape), path)


def load_draws(path: str | Path):
    from .sampler import PosteriorDraws

    with open(path, "rb") as f:
        magic = f.readline()
        if magic != DRAWS_MAGIC:
            raise ValueError(f"{path} is not a draws file")
        header = json.loads(f.readline().decode("utf-8"))
        payload = f.read()
    shape = tuple(header["shape"])
    n_draw = int(np.prod(shape))
    values = np.frombuffer(payload, dtype="<f8")
    draws = values[:n_draw].reshape(shape).copy()
    stats: Dict[str, np.ndarray] = {}
    offset = n_draw
    per_stat = shape[0] * shape[1]
    for name in header["stat_names"]:
        stats[name] = values[offset:offset + per_stat].reshape(shape[:2]).copy()
        offset += per_stat
    return PosteriorDraws(
        draws=draws,
        sampler_stats=stats,
        column_labels=list(header["column_labels"]),
        metadata=header.get("metadata", {}),
    )


def draws_to_frame(draws: Any) -> pd.DataFrame:
    """Long-form CSV export: chain, iteration, one column per parameter, then sampler stats."""
    n_chain, n_iter, _ = draws.draws.shape
    frame = pd.DataFrame(draws.draws.reshape(n_chain * n_iter, -1), columns=draws.column_labels)
    frame.insert(0, "iteration", np.tile(np.arange(n_iter), n_chain))
    frame.insert(0, "chain", np.repeat(np.arange(n_chain), n_iter))
    for name in sorted(draws.sampler_stats):
        frame[f"{name}__"] = draws.sampler_stats[name].reshape(-1)
    return frame


# -------------------- run manifests --------------------
class RunManifest(BaseModel):
    command: str
    flags: Dict[str, Any] = Field(default_factory=dict)
    input_digests: Dict[str, str] = Field(default_factory=dict)
    seed: Optional[int] = None
    tool_version: str
    started_at: str
    finished_at: Optional[str] = None
    outputs: List[str] = Field(default_factory=list)
    notes: Dict[str, str] = Field(default_factory=dict)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def manifest_path_for(output: str | Path) -> Path:
    output = Path(output)
    if output.is_dir() or not output.suffix:
        return output / f"run{MANIFEST_SUFFIX}"
    return output.with_name(output.name + MANIFEST_SUFFIX)


def write_manifest(manifest: RunManifest, output: str | Path) -> Path:
    path = manifest_path_for(output)
    payload = json.dumps(manifest.model_dump(), ensure_ascii=False, indent=2, sort_keys=True, default=str)
    atomic_write(path, payload.encode("utf-8"))
    logger.info("Wrote run manifest to %s", path)
    return path
