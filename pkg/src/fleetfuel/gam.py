"""Interpretable additive fuel model trained by cyclic residual boosting.

The model is an intercept plus one piecewise-constant shape function per
input feature; a prediction decomposes exactly into those per-feature
contributions.  Training bins every feature on quantile cut points, then
cycles over features fitting a tiny depth-limited regression tree (over
contiguous bin segments) to the current residuals, accumulating each
tree's shrunken leaf values into the feature's shape.  Several bags of
bootstrap samples are trained independently and their shapes averaged;
each bag early-stops on a held-out validation slice.  After averaging,
shapes are mean-centered over the training data and the removed mass is
folded into the intercept.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, FeedFormatError, MissingFeatureError
from .ingest import FarRecord
from .registry import FeatureRegistry

logger = logging.getLogger(__name__)

MODEL_FORMAT = "fleetfuel-additive-model"
MODEL_VERSION = 1

#: FarRecord fields treated as categorical context features.
DEFAULT_CATEGORICALS = ("route_type", "vehicle_group", "vehicle_class")

KIND_NUMERIC = "numeric"
KIND_INDICATOR = "indicator"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_rounds: int = 5000
    patience: int = 50
    max_bins: int = 256
    max_leaves: int = 3
    bags: int = 8
    validation_fraction: float = 0.15
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataError("learning_rate must be positive")
        if self.max_bins < 2:
            raise DataError("max_bins must be at least 2")
        if not 0.0 < self.validation_fraction < 0.5:
            raise DataError("validation_fraction must be in (0, 0.5)")
        if self.max_leaves < 2:
            raise DataError("max_leaves must be at least 2")
        if self.bags < 1 or self.max_rounds < 1 or self.patience < 1:
            raise DataError("bags, max_rounds and patience must be positive")


@dataclass(frozen=True)
class FeatureColumn:
    """One model input: a numeric feature or a one-hot indicator."""

    name: str
    kind: str
    origin: str
    level: str | None = None


def _level_sort_key(levels: set[str]) -> list[str]:
    try:
        return sorted(levels, key=lambda s: (float(s), s))
    except ValueError:
        return sorted(levels)


def one_hot(
    records: Sequence[FarRecord], categorical_names: Sequence[str]
) -> tuple[np.ndarray, list[FeatureColumn]]:
    """Expand categorical record fields into indicator columns.

    One column per (field, level) using the level set observed in the
    given records; encoding an unseen level later yields all zeros.
    """
    columns: list[FeatureColumn] = []
    for name in categorical_names:
        levels = {str(getattr(rec, name)) for rec in records}
        for level in _level_sort_key(levels):
            columns.append(
                FeatureColumn(
                    name=f"{name}={level}", kind=KIND_INDICATOR, origin=name, level=level
                )
            )
    matrix = np.empty((len(records), len(columns)), dtype=np.float64)
    for j, col in enumerate(columns):
        matrix[:, j] = [
            1.0 if str(getattr(rec, col.origin)) == col.level else 0.0
            for rec in records
        ]
    return matrix, columns


def _numeric_value(rec: FarRecord, name: str) -> float:
    try:
        value = rec.features[name]
    except KeyError:
        raise MissingFeatureError(
            f"record {rec.vehicle_id}/{rec.date} lacks feature {name!r}"
        ) from None
    if not np.isfinite(value):
        raise DataError(f"feature {name!r} is not finite on {rec.vehicle_id}/{rec.date}")
    return value


def build_design(
    records: Sequence[FarRecord],
    registry: FeatureRegistry,
    categoricals: Sequence[str] = DEFAULT_CATEGORICALS,
) -> tuple[np.ndarray, list[FeatureColumn]]:
    """Design matrix: registry features in order, then one-hot indicators."""
    numeric = [
        FeatureColumn(name=name, kind=KIND_NUMERIC, origin=name)
        for name in registry.names
    ]
    X_num = np.empty((len(records), len(numeric)), dtype=np.float64)
    for j, col in enumerate(numeric):
        X_num[:, j] = [_numeric_value(rec, col.name) for rec in records]
    X_cat, cat_columns = one_hot(records, categoricals)
    return np.hstack([X_num, X_cat]), numeric + cat_columns


def build_bins(matrix: np.ndarray, max_bins: int = 256) -> list[np.ndarray]:
    """Quantile cut points per column.

    Columns with fewer distinct values than max_bins get one bin per
    distinct value (cuts at midpoints); others get cuts at uniform
    quantiles.  Cut points are strictly increasing.
    """
    if matrix.shape[0] < 1:
        raise DataError("binning needs at least one row")
    cuts: list[np.ndarray] = []
    for j in range(matrix.shape[1]):
        col = matrix[:, j]
        distinct = np.unique(col)
        if distinct.size < max_bins:
            c = (distinct[:-1] + distinct[1:]) / 2.0
        else:
            qs = np.arange(1, max_bins) / max_bins
            c = np.unique(np.quantile(col, qs))
        cuts.append(np.asarray(c, dtype=np.float64))
    return cuts


def _bin_indices(col: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    return np.searchsorted(cuts, col, side="right").astype(np.int64)


def _best_split(csum, ccnt, lo, hi):
    """Best split position and gain for segment [lo, hi) of a histogram."""
    if hi - lo < 2:
        return None
    base_s = csum[lo - 1] if lo > 0 else 0.0
    base_c = ccnt[lo - 1] if lo > 0 else 0.0
    total_s = csum[hi - 1] - base_s
    total_c = ccnt[hi - 1] - base_c
    if total_c <= 0:
        return None
    ls = csum[lo : hi - 1] - base_s
    lc = ccnt[lo : hi - 1] - base_c
    rs = total_s - ls
    rc = total_c - lc
    valid = (lc > 0) & (rc > 0)
    if not valid.any():
        return None
    gain = np.full(ls.shape, -np.inf)
    np.divide(ls * ls, lc, out=gain, where=valid)
    gain[valid] += (rs * rs)[valid] / rc[valid]
    gain -= total_s * total_s / total_c
    gain[~valid] = -np.inf
    k = int(np.argmax(gain))  # first max: lowest bin index wins ties
    if gain[k] <= 0:
        return None
    return lo + 1 + k, float(gain[k])


def _tree_update(sums: np.ndarray, cnts: np.ndarray, max_leaves: int, lr: float) -> np.ndarray:
    """One boosting step for one feature: shrunken leaf means per bin."""
    csum = np.cumsum(sums)
    ccnt = np.cumsum(cnts)
    nb = sums.shape[0]
    segments = [(0, nb)]
    while len(segments) < max_leaves:
        best = None
        best_seg = -1
        for i, (lo, hi) in enumerate(segments):
            cand = _best_split(csum, ccnt, lo, hi)
            if cand is not None and (best is None or cand[1] > best[1]):
                best = cand
                best_seg = i
        if best is None:
            break
        lo, hi = segments[best_seg]
        segments[best_seg : best_seg + 1] = [(lo, best[0]), (best[0], hi)]
    delta = np.zeros(nb, dtype=np.float64)
    for lo, hi in segments:
        base_s = csum[lo - 1] if lo > 0 else 0.0
        base_c = ccnt[lo - 1] if lo > 0 else 0.0
        seg_c = ccnt[hi - 1] - base_c
        if seg_c > 0:
            delta[lo:hi] = lr * (csum[hi - 1] - base_s) / seg_c
    return delta


@dataclass
class BagHistory:
    train_rmse: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    best_round: int = -1
    stopped_round: int = -1


def _fit_bag(
    bag_index: int,
    seed_seq: np.random.SeedSequence,
    y: np.ndarray,
    bins: list[np.ndarray],
    n_bins: list[int],
    config: TrainConfig,
) -> tuple[float, list[np.ndarray], BagHistory]:
    rng = np.random.default_rng(seed_seq)
    n = y.shape[0]
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * config.validation_fraction)))
    val_idx = perm[:n_val]
    pool = perm[n_val:]
    boot_idx = rng.choice(pool, size=pool.size, replace=True)

    tb = [b[boot_idx] for b in bins]
    vb = [b[val_idx] for b in bins]
    y_boot = y[boot_idx]
    y_val = y[val_idx]

    intercept = float(y_boot.mean())
    shapes = [np.zeros(nb, dtype=np.float64) for nb in n_bins]
    residual = y_boot - intercept
    val_pred = np.full(y_val.shape, intercept, dtype=np.float64)

    history = BagHistory()
    best_val = np.inf
    best_shapes = [s.copy() for s in shapes]
    stale = 0
    d = len(bins)
    for rnd in range(config.max_rounds):
        for j in range(d):
            sums = np.bincount(tb[j], weights=residual, minlength=n_bins[j])
            cnts = np.bincount(tb[j], minlength=n_bins[j]).astype(np.float64)
            delta = _tree_update(sums, cnts, config.max_leaves, config.learning_rate)
            shapes[j] += delta
            residual -= delta[tb[j]]
            val_pred += delta[vb[j]]
        history.train_rmse.append(float(np.sqrt(np.mean(residual * residual))))
        val_rmse = float(np.sqrt(np.mean((y_val - val_pred) ** 2)))
        history.val_rmse.append(val_rmse)
        if val_rmse < best_val:
            best_val = val_rmse
            best_shapes = [s.copy() for s in shapes]
            history.best_round = rnd
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    history.stopped_round = len(history.val_rmse) - 1
    return intercept, best_shapes, history


@dataclass
class AdditiveModel:
    """Fitted additive model: intercept plus one shape function per column."""

    intercept: float
    columns: list[FeatureColumn]
    cuts: list[np.ndarray]
    values: list[np.ndarray]
    config: TrainConfig
    link: str = "identity"
    history: list[BagHistory] = field(default_factory=list, repr=False)

    # -- encoding ----------------------------------------------------------

    def _encode_record(self, rec: FarRecord) -> np.ndarray:
        row = np.empty(len(self.columns), dtype=np.float64)
        for j, col in enumerate(self.columns):
            if col.kind == KIND_NUMERIC:
                row[j] = _numeric_value(rec, col.name)
            else:
                row[j] = 1.0 if str(getattr(rec, col.origin)) == col.level else 0.0
        return row

    def _contribution_row(self, rec: FarRecord) -> np.ndarray:
        raw = self._encode_record(rec)
        out = np.empty(len(self.columns), dtype=np.float64)
        for j in range(len(self.columns)):
            b = int(np.searchsorted(self.cuts[j], raw[j], side="right"))
            out[j] = self.values[j][b]
        return out

    # -- public API --------------------------------------------------------

    def predict(self, rec: FarRecord) -> float:
        """Intercept plus the sum of per-feature contributions."""
        return self.intercept + float(self._contribution_row(rec).sum())

    def predict_many(self, records: Sequence[FarRecord]) -> np.ndarray:
        out = np.empty(len(records), dtype=np.float64)
        for i, rec in enumerate(records):
            out[i] = self.intercept + self._contribution_row(rec).sum()
        return out

    def feature_relevance(self, rec: FarRecord) -> dict[str, float]:
        """Per-feature contribution f_i(x_i); sums (plus intercept) to predict."""
        row = self._contribution_row(rec)
        return {col.name: float(row[j]) for j, col in enumerate(self.columns)}

    def contribution_at(self, column_name: str, value: float) -> float:
        """Shape-function value for one column at a raw feature value."""
        j = self._column_index(column_name)
        b = int(np.searchsorted(self.cuts[j], value, side="right"))
        return float(self.values[j][b])

    def shape_curve(self, column_name: str) -> list[tuple[float, float, float]]:
        """Piecewise-constant curve as (bin_lo, bin_hi, value) segments."""
        j = self._column_index(column_name)
        cuts = self.cuts[j]
        edges = [-np.inf, *cuts.tolist(), np.inf]
        return [
            (edges[k], edges[k + 1], float(self.values[j][k]))
            for k in range(len(self.values[j]))
        ]

    def _column_index(self, name: str) -> int:
        for j, col in enumerate(self.columns):
            if col.name == name:
                return j
        raise KeyError(f"model has no feature {name!r}")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(col.name for col in self.columns)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "link": self.link,
            "intercept": self.intercept,
            "config": asdict(self.config),
            "features": [
                {
                    "name": col.name,
                    "kind": col.kind,
                    "origin": col.origin,
                    "level": col.level,
                    "cuts": self.cuts[j].tolist(),
                    "values": self.values[j].tolist(),
                }
                for j, col in enumerate(self.columns)
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AdditiveModel":
        if data.get("format") != MODEL_FORMAT:
            raise FeedFormatError(f"not a model file (format={data.get('format')!r})")
        if data.get("version") != MODEL_VERSION:
            raise FeedFormatError(f"unsupported model version {data.get('version')!r}")
        columns = []
        cuts = []
        values = []
        for feat in data["features"]:
            columns.append(
                FeatureColumn(
                    name=feat["name"],
                    kind=feat["kind"],
                    origin=feat["origin"],
                    level=feat["level"],
                )
            )
            cuts.append(np.asarray(feat["cuts"], dtype=np.float64))
            values.append(np.asarray(feat["values"], dtype=np.float64))
        return cls(
            intercept=float(data["intercept"]),
            columns=columns,
            cuts=cuts,
            values=values,
            config=TrainConfig(**data["config"]),
            link=data.get("link", "identity"),
        )

    def save_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "AdditiveModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit(
    records: Sequence[FarRecord],
    registry: FeatureRegistry,
    config: TrainConfig = TrainConfig(),
    categoricals: Sequence[str] = DEFAULT_CATEGORICALS,
) -> AdditiveModel:
    """Train on the records' avg fuel; see the module docstring for the loop."""
    if len(records) < 20:
        raise DataError(f"training needs at least 20 records, got {len(records)}")
    y = np.asarray(
        [0.0 if r.avg_fuel_consumption is None else r.avg_fuel_consumption for r in records],
        dtype=np.float64,
    )
    if not np.all(np.isfinite(y)) or not np.all(y > 0):
        raise DataError("training target must be finite and positive on every record")

    X, columns = build_design(records, registry, categoricals)
    return fit_matrix(X, y, columns, config)


def fit_matrix(
    X: np.ndarray,
    y: np.ndarray,
    columns: Sequence[FeatureColumn],
    config: TrainConfig = TrainConfig(),
) -> AdditiveModel:
    """Matrix-level trainer used by fit(); exposed for synthetic studies."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cuts = build_bins(X, config.max_bins)
    n_bins = [c.size + 1 for c in cuts]
    bins = [_bin_indices(X[:, j], cuts[j]) for j in range(X.shape[1])]

    if float(np.var(y)) == 0.0:
        logger.warning("zero-variance training target: constant model")
        return AdditiveModel(
            intercept=float(y.mean()),
            columns=list(columns),
            cuts=cuts,
            values=[np.zeros(nb, dtype=np.float64) for nb in n_bins],
            config=config,
        )

    seeds = np.random.SeedSequence(config.seed).spawn(config.bags)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(_fit_bag, b, seeds[b], y, bins, n_bins, config)
                for b in range(config.bags)
            ]
            results = [f.result() for f in futures]
    else:
        results = [
            _fit_bag(b, seeds[b], y, bins, n_bins, config) for b in range(config.bags)
        ]

    intercept = float(np.mean([r[0] for r in results]))
    values = []
    for j in range(len(columns)):
        stacked = np.stack([r[1][j] for r in results])
        values.append(stacked.mean(axis=0))

    # center each shape over the training rows; fold the mass into the intercept
    for j in range(len(columns)):
        mass = float(values[j][bins[j]].mean())
        values[j] = values[j] - mass
        intercept += mass

    return AdditiveModel(
        intercept=intercept,
        columns=list(columns),
        cuts=cuts,
        values=values,
        config=config,
        history=[r[2] for r in results],
    )


SHAPE_CSV_COLUMNS = ("feature", "bin_lo", "bin_hi", "value")


def write_shape_curves_csv(model: AdditiveModel, path: str | Path) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(SHAPE_CSV_COLUMNS)
        for col in model.columns:
            for lo, hi, value in model.shape_curve(col.name):
                writer.writerow([col.name, repr(lo), repr(hi), repr(value)])
