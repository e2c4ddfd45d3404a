"""CSV readers and writers.

Floats are written with ``%.10g`` so repeated runs give byte-identical
files; all files are UTF-8 with ``\\n`` line endings.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .bundles import all_outcomes, bundle_index


class SchemaError(ValueError):
    """Input table does not match the expected columns or values."""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v) + 0.0:.10g}" if np.isfinite(v) else "nan"
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    return path


def read_binary_table(path: str | Path) -> tuple[NDArray[np.int8], Optional[NDArray[np.float64]]]:
    """Read outcome columns ``Y1..YM`` (0/1) and optional covariates ``X1..Xd``.

    Columns are matched by prefix; any other column is a schema error.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2:
        raise SchemaError(f"{path}: need a header and at least one row")
    head = [h.strip() for h in rows[0]]
    y_cols = [i for i, h in enumerate(head) if h.startswith("Y")]
    x_cols = [i for i, h in enumerate(head) if h.startswith("X")]
    other = [h for i, h in enumerate(head) if i not in y_cols and i not in x_cols]
    if other:
        raise SchemaError(f"{path}: unexpected columns {other}; use Y1..YM and X1..Xd")
    if len(y_cols) < 2:
        raise SchemaError(f"{path}: need at least two outcome columns")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric entry ({exc})") from None
    if data.shape[1] != len(head):
        raise SchemaError(f"{path}: ragged rows")
    Y = data[:, y_cols]
    if not np.all((Y == 0) | (Y == 1)):
        raise SchemaError(f"{path}: outcome columns must be 0/1")
    X = data[:, x_cols] if x_cols else None
    return Y.astype(np.int8), X


def write_binary_table(path: str | Path, Y: NDArray, X: Optional[NDArray] = None) -> Path:
    Y = np.asarray(Y)
    head = [f"Y{j + 1}" for j in range(Y.shape[1])]
    rows = [list(map(int, y)) for y in Y]
    if X is not None:
        X = np.asarray(X, dtype=float).reshape(Y.shape[0], -1)
        head += [f"X{k + 1}" for k in range(X.shape[1])]
        rows = [r + [f"{v:.17g}" for v in x] for r, x in zip(rows, X)]
    return write_text(Path(path), to_csv(head, rows))


def coefficients_csv(r: NDArray) -> str:
    idx = bundle_index(int(_M_from_p(len(r))))
    return to_csv(["bundle", "coefficient"], zip(idx.labels(), r))


def local_fit_csv(fits) -> str:
    """Long format: one row per (anchor, bundle, component)."""
    rows = []
    for f in fits:
        labels = bundle_index(int(_M_from_p(f.a.size))).labels()
        x = ";".join(fmt(v) for v in f.anchor)
        for l, lab in enumerate(labels):
            rows.append([x, lab, "level", f.a[l]])
            for k in range(f.b.shape[1]):
                rows.append([x, lab, f"slope{k + 1}", f.b[l, k]])
    return to_csv(["anchor", "bundle", "component", "value"], rows)


def pmf_csv(table: NDArray, M: int, anchor: Optional[str] = None) -> str:
    outs = all_outcomes(M)
    labels = ["".join(map(str, y)) for y in outs]
    if anchor is None:
        return to_csv(["y", "probability"], zip(labels, table))
    return to_csv(["anchor", "y", "probability"], ([anchor, l, v] for l, v in zip(labels, table)))


def _M_from_p(p: int) -> int:
    M = 1
    while 2**M - M - 1 < p:
        M += 1
    if 2**M - M - 1 != p:
        raise ValueError(f"{p} is not 2^M - M - 1 for any M")
    return M
