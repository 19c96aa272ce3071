# tools/reporting.py
# Round records and the files they end up in (JSONL stream, CSV tables).
# Every file is written to a temp sibling first and renamed into place.

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.17g"


@dataclass
class RoundRecord:
    round: int
    loss: float
    accuracy: Optional[float]
    top5_accuracy: Optional[float]
    dist_to_opt: Optional[float]
    retained: list[int]
    excluded_jaccard: list[int]
    excluded_cluster: list[int]
    precision: Optional[float]
    recall: Optional[float]
    f_p: list[float]
    rho: float
    bytes_uplink: int
    degenerate_filter: bool
    attackers: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def record_line(record: RoundRecord) -> str:
    # json writes floats with repr, which reloads bit-exact
    return json.dumps(record.to_dict(), default=_jsonable, allow_nan=False)


def format_record(record: RoundRecord) -> str:
    """One-line human summary for the log."""
    parts = [f"round {record.round:>3}", f"loss={record.loss:.4f}"]
    if record.accuracy is not None:
        parts.append(f"acc={record.accuracy:.4f}")
    if record.dist_to_opt is not None:
        parts.append(f"dist={record.dist_to_opt:.4g}")
    parts.append(f"kept={len(record.retained)}")
    if record.recall is not None:
        parts.append(f"P/R={record.precision:.2f}/{record.recall:.2f}")
    parts.append(f"rho={record.rho:.3g}")
    if record.degenerate_filter:
        parts.append("DEGENERATE")
    return " ".join(parts)


# -------- Atomic writers --------
def atomic_write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_jsonl(records: Iterable[RoundRecord], path: str | Path) -> Path:
    lines = [record_line(r) for r in records]
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(frame: pd.DataFrame, path: str | Path, index: bool = False) -> Path:
    return atomic_write_text(path, frame.to_csv(index=index, float_format=FLOAT_FORMAT, lineterminator="\n"))


def matrix_frame(matrix: np.ndarray, client_ids: Sequence[int]) -> pd.DataFrame:
    """Square matrix with client ids as both header and index."""
    labels = [str(c) for c in client_ids]
    frame = pd.DataFrame(np.asarray(matrix, dtype=np.float64), columns=labels, index=labels)
    frame.index.name = "client"
    return frame


# -------- Summary --------
def summarize(records: Sequence[RoundRecord], initial: dict[str, Any]) -> dict[str, Any]:
    """
    Experiment summary. With no rounds the final metrics are those of the
    initial model.
    """
    last = records[-1] if records else None
    attacked = [r for r in records if r.recall is not None]
    peak_fp = max((max(r.f_p) if r.f_p else 0.0 for r in records), default=0.0)
    return {
        "rounds": len(records),
        "final_loss": last.loss if last else initial["loss"],
        "final_accuracy": last.accuracy if last else initial.get("accuracy"),
        "final_top5_accuracy": last.top5_accuracy if last else initial.get("top5_accuracy"),
        "final_dist_to_opt": last.dist_to_opt if last else initial.get("dist_to_opt"),
        "mean_precision": float(np.mean([r.precision for r in attacked])) if attacked else None,
        "mean_recall": float(np.mean([r.recall for r in attacked])) if attacked else None,
        "peak_fp": float(peak_fp),
        "mean_rho": float(np.mean([r.rho for r in records])) if records else 0.0,
        "total_bytes": int(sum(r.bytes_uplink for r in records)),
        "degenerate_rounds": int(sum(r.degenerate_filter for r in records)),
    }
