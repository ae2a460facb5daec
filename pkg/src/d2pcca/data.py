"""Panel data ingestion, sliding windows, metrics and reconstruction bands.

Input table: comma-separated, header row, an ISO-8601 ``date`` column and
numeric columns.  Manifest (YAML)::

    sets:
      - name: tech
        columns: [AAPL, MSFT]
      - name: energy
        columns: [XOM, CVX]
    split: 453        # optional: rows in the training part

Band files have the header ``step,column,set,truth,mean,lower,upper`` and
metric files ``variant,elbo_per_step,rmse``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
import yaml

from d2pcca import lds
from d2pcca.errors import DataError, ShapeError

BAND_FIELDS = ["step", "column", "set", "truth", "mean", "lower", "upper"]
METRIC_FIELDS = ["variant", "elbo_per_step", "rmse"]
Z95 = 1.96


@dataclass(frozen=True)
class PanelDataset:
    dates: tuple[str, ...]
    values: np.ndarray  # (rows, p), columns grouped by set
    set_names: tuple[str, ...]
    set_columns: tuple[tuple[str, ...], ...]
    split: int | None = None

    @property
    def obs_dims(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.set_columns)

    @property
    def columns(self) -> list[str]:
        return [c for cols in self.set_columns for c in cols]

    @property
    def n_sets(self) -> int:
        return len(self.set_names)

    def column_sets(self) -> list[str]:
        return [name for name, cols in zip(self.set_names, self.set_columns) for _ in cols]


def read_manifest(path) -> tuple[list[str], list[list[str]], int | None]:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: malformed manifest: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("sets"), list) or not doc["sets"]:
        raise DataError(f"{path}: manifest needs a non-empty 'sets' list")
    names, cols = [], []
    for k, entry in enumerate(doc["sets"]):
        if not isinstance(entry, dict) or "name" not in entry or not entry.get("columns"):
            raise DataError(f"{path}: set #{k} needs a 'name' and a non-empty 'columns' list")
        names.append(str(entry["name"]))
        cols.append([str(c) for c in entry["columns"]])
    flat = [c for cs in cols for c in cs]
    dup = {c for c in flat if flat.count(c) > 1}
    if dup:
        raise DataError(f"{path}: columns assigned to more than one set: {sorted(dup)}")
    split = doc.get("split")
    return names, cols, None if split is None else int(split)


def load_panel(table, manifest) -> PanelDataset:
    names, set_cols, split = read_manifest(manifest)
    with open(table, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{table}: empty table") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    if "date" not in header:
        raise DataError(f"{table}: no 'date' column")
    pos = {h: k for k, h in enumerate(header)}
    for cols in set_cols:
        for c in cols:
            if c not in pos:
                raise DataError(f"manifest column {c!r} not found in {table}")
    order = [pos[c] for cols in set_cols for c in cols]
    dates, values = [], np.empty((len(rows), len(order)))
    prev = None
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{table}:{r}: expected {len(header)} fields, got {len(row)}")
        stamp = row[pos["date"]].strip()
        try:
            when = datetime.fromisoformat(stamp)
        except ValueError:
            raise DataError(f"{table}:{r}: bad ISO-8601 date {stamp!r}") from None
        if prev is not None and when <= prev:
            raise DataError(f"{table}:{r}: dates are not strictly increasing ({stamp})")
        prev = when
        dates.append(stamp)
        for k, col in enumerate(order):
            cell = row[col].strip()
            if cell == "" or cell.lower() in ("nan", "na", "null"):
                raise DataError(f"{table}:{r}: missing value in column {header[col]!r}")
            try:
                values[r - 2, k] = float(cell)
            except ValueError:
                raise DataError(f"{table}:{r}: non-numeric value {cell!r} in column {header[col]!r}") from None
    if not np.all(np.isfinite(values)):
        raise DataError(f"{table}: non-finite values")
    return PanelDataset(tuple(dates), values, tuple(names), tuple(tuple(c) for c in set_cols), split)


def save_panel(ds: PanelDataset, table, manifest) -> None:
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *ds.columns])
        for d, row in zip(ds.dates, ds.values):
            w.writerow([d, *(repr(float(v)) for v in row)])
    doc = {"sets": [{"name": n, "columns": list(c)} for n, c in zip(ds.set_names, ds.set_columns)]}
    if ds.split is not None:
        doc["split"] = int(ds.split)
    Path(manifest).write_text(yaml.safe_dump(doc, sort_keys=False))


def daily_dates(rows: int, start: str = "2000-01-03") -> tuple[str, ...]:
    first = np.datetime64(start)
    return tuple(str(first + np.timedelta64(k, "D")) for k in range(rows))


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowSet:
    starts: np.ndarray  # row index of each window in the full panel
    length: int
    sequences: np.ndarray  # (N, T, p) centered per window, divided by scale
    raw: np.ndarray  # (N, T, p) raw values
    scale: np.ndarray  # (p,) train-split standard deviations

    def __len__(self) -> int:
        return len(self.starts)


def _windows(values, offset, T, step, scale) -> WindowSet:
    starts = np.arange(0, len(values) - T + 1, step)
    raw = np.stack([values[s: s + T] for s in starts])
    centered = raw - raw.mean(axis=1, keepdims=True)
    return WindowSet(starts + offset, T, centered / scale, raw, scale)


def make_windows(ds: PanelDataset, T: int = 30, step: int = 1, split: int | None = None) -> tuple[WindowSet, WindowSet]:
    """Train windows from rows ``[0, split)`` and test windows from ``[split, end)``.

    Each window is centered to zero mean; every column is divided by its
    standard deviation over the training rows.
    """
    split = split if split is not None else ds.split
    if split is None:
        raise DataError("no split given and none in the manifest")
    if T < 1 or step < 1:
        raise DataError("window length and step must be >= 1")
    n = len(ds.values)
    if split < T:
        raise DataError(f"training part has {split} rows, fewer than one window of {T}")
    if n - split < T:
        raise DataError(f"test part has {n - split} rows, fewer than one window of {T}")
    train = ds.values[:split]
    scale = train.std(axis=0)
    flat = [c for c, s in zip(ds.columns, scale) if s <= 0]
    if flat:
        raise DataError(f"constant training series in columns {flat}")
    return _windows(train, 0, T, step, scale), _windows(ds.values[split:], split, T, step, scale)


# ---------------------------------------------------------------------------
# metrics


def rmse(recon, truth) -> float:
    """Square root of the summed squared error over coordinates, averaged over sequences and steps."""
    recon, truth = np.asarray(recon, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ShapeError(f"rmse: shapes differ {recon.shape} vs {truth.shape}")
    if truth.ndim == 2:
        truth, recon = truth[None], recon[None]
    if truth.ndim != 3:
        raise ShapeError(f"rmse: expected (N, T, p), got {truth.shape}")
    N, T, _ = truth.shape
    return float(np.sqrt(np.sum((recon - truth) ** 2) / (N * T)))


@dataclass
class Metrics:
    variant: str
    elbo_per_step: float
    rmse: float


def reconstruction_mode(model) -> str:
    # flows have no closed-form posterior mean, so their latents are sampled
    return "sampled" if getattr(model, "flow", None) is not None else "posterior-mean"


def _as_sequences(windows) -> np.ndarray:
    return windows.sequences if isinstance(windows, WindowSet) else np.asarray(windows, dtype=np.float64)


def evaluate(model, windows, variant: str = "d2pcca", rng=None, sample_count: int = 1,
             kl: str = "analytic", batch: int = 64) -> Metrics:
    """Test ELBO per step (averaged over windows) and RMSE of the reconstructions."""
    x = _as_sequences(windows)
    rng = rng if rng is not None else np.random.default_rng(0)
    mode = reconstruction_mode(model)
    flow = getattr(model, "flow", None)
    total, recon = 0.0, []
    for start in range(0, len(x), batch):
        xb = x[start: start + batch]
        terms = model.elbo_terms(xb, sample_count, rng, None, kl, flow=flow)
        total += float(terms.per_sequence().data.sum()) / sample_count
        recon.append(model.reconstruct(xb, mode=mode, rng=rng).mean)
    T = x.shape[1]
    return Metrics(variant, total / (len(x) * T), rmse(np.concatenate(recon), x))


def evaluate_linear(params: lds.DpccaParams, windows, variant: str = "dpcca") -> Metrics:
    """Exact log-likelihood per step and RMSE of ``C E[z | x]`` for the linear model."""
    x = _as_sequences(windows)
    ll = lds.kalman_filter(params, x).loglik
    mom = lds.smooth(params, x)
    C = lds.assemble(params).C
    means = mom.means if mom.means.ndim == 3 else mom.means[None]
    return Metrics(variant, float(ll.sum()) / (x.shape[0] * x.shape[1]), rmse(means @ C.T, x))


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in rows:
            w.writerow([m.variant, repr(float(m.elbo_per_step)), repr(float(m.rmse))])


def read_metrics(path) -> list[Metrics]:
    with open(path, newline="") as fh:
        return [Metrics(r["variant"], float(r["elbo_per_step"]), float(r["rmse"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# bands


def bands(mean, variance) -> tuple[np.ndarray, np.ndarray]:
    half = Z95 * np.sqrt(variance)
    return mean - half, mean + half


def export_bands(model, window, path, columns=None, sets=None, rng=None) -> str:
    """Write truth, reconstruction mean and the 95% band for one ``(T, p)`` window.

    Returns the latent mode used (``posterior-mean`` or ``sampled``).
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"export_bands expects one (T, p) window, got {x.shape}")
    mode = reconstruction_mode(model)
    rec = model.reconstruct(x[None], mode=mode, rng=rng if rng is not None else np.random.default_rng(0))
    mean, var = rec.mean[0], rec.variance[0]
    lo, hi = bands(mean, var)
    T, p = x.shape
    columns = columns or [f"x{k}" for k in range(p)]
    if sets is None:
        lay = model.layout
        sets = [lay.set_names[j] if lay.set_names else f"set{j + 1}" for j in range(lay.n_sets) for _ in range(lay.obs_dims[j])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BAND_FIELDS)
        for t in range(T):
            for k in range(p):
                w.writerow([t, columns[k], sets[k], *(repr(float(v[t, k])) for v in (x, mean, lo, hi))])
    return mode


def read_bands(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {k: np.array([float(r[k]) for r in rows]) for k in ("truth", "mean", "lower", "upper")}
    out["step"] = np.array([int(r["step"]) for r in rows])
    out["column"] = np.array([r["column"] for r in rows])
    out["set"] = np.array([r["set"] for r in rows])
    return out
