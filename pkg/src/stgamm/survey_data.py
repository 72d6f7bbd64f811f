"""Tree-level survey records and the rules that turn them into plot observations.

A survey file holds one row per assessed tree and year.  Defoliation is
recorded in 5% classes; a class ``c < 100`` stands for the interval
``[c, c + 5)`` and is represented by its midpoint, class 100 is a dead tree.
Trees of one species on one plot in one year are averaged into a single
:class:`PlotObservation` whose weight is the number of trees.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPECIES = ("spruce", "pine", "beech", "oak", "other")
GRID_TAGS = ("base16", "dense8", "denser")
VALID_CLASSES = frozenset(range(0, 101, 5))

Y_MIN = 0.005
Y_MAX = 0.995
IRREGULAR_SPREAD = 20.0

SURVEY_COLUMNS = (
    "plot_id",
    "easting_m",
    "northing_m",
    "year",
    "species",
    "defoliation_class",
    "tree_age",
    "plot_age",
    "region_tag",
    "grid_tag",
)

PLOT_COLUMNS = (
    "plot_id",
    "easting_m",
    "northing_m",
    "year",
    "species",
    "mean_defoliation",
    "tree_count",
    "stand_age",
    "region_tag",
    "grid_tag",
)


class SurveyDataError(ValueError):
    """Raised for input that violates the survey data rules."""


class SchemaError(SurveyDataError):
    """Raised when a survey file lacks required columns."""


class AgeStatus(enum.Enum):
    IRREGULAR = "irregular"
    MISSING = "missing"


@dataclass(frozen=True)
class TreeRecord:
    plot_id: str
    easting: float
    northing: float
    year: int
    species: str
    defoliation_class: int
    tree_age: int | None = None
    plot_age: int | None = None
    region_tag: str = ""
    grid_tag: str = "base16"

    def __post_init__(self):
        if self.defoliation_class not in VALID_CLASSES:
            raise SurveyDataError(f"invalid class {self.defoliation_class!r}")
        if not (math.isfinite(self.easting) and math.isfinite(self.northing)):
            raise SurveyDataError("coordinates must be finite")
        if self.species not in SPECIES:
            raise SurveyDataError(f"unknown species {self.species!r}")
        if self.grid_tag not in GRID_TAGS:
            raise SurveyDataError(f"unknown grid tag {self.grid_tag!r}")


@dataclass(frozen=True)
class PlotObservation:
    plot_id: str
    easting: float
    northing: float
    year: int
    species: str
    mean_defoliation: float
    tree_count: int
    stand_age: int | AgeStatus
    region_tag: str = ""
    grid_tag: str = "base16"

    @property
    def excluded(self) -> bool:
        return isinstance(self.stand_age, AgeStatus)


@dataclass
class RowDiagnostic:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


@dataclass
class LoadResult:
    records: list[TreeRecord]
    diagnostics: list[RowDiagnostic] = field(default_factory=list)


def midpoint_conversion(defoliation_class: int) -> float:
    """Class midpoint as a fraction; class 100 (dead tree) maps to 1.0."""
    if isinstance(defoliation_class, bool) or defoliation_class not in VALID_CLASSES:
        raise SurveyDataError(
            f"invalid class {defoliation_class!r}: expected one of 0, 5, ..., 100"
        )
    if defoliation_class == 100:
        return 1.0
    return (defoliation_class + 2.5) / 100.0


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plot_stand_age(
    tree_ages: Sequence[int | None], fallback_plot_age: int | None = None
) -> int | AgeStatus:
    """Stand age of one species on one plot.

    The mean of the single-tree ages, rounded to the nearest year.  When the
    youngest or oldest tree is more than 20 years away from that mean the
    stand counts as irregular.  Without any tree ages the plot-level age is
    used; without that too the age is missing.
    """
    ages = [a for a in tree_ages if a is not None]
    if not ages:
        if fallback_plot_age is None:
            return AgeStatus.MISSING
        return int(fallback_plot_age)
    mean = sum(ages) / len(ages)
    if max(ages) - mean > IRREGULAR_SPREAD or mean - min(ages) > IRREGULAR_SPREAD:
        return AgeStatus.IRREGULAR
    return _round_half_up(mean)


def clamp_defoliation(y: float, lo: float = Y_MIN, hi: float = Y_MAX) -> float:
    return min(max(y, lo), hi)


def aggregate_plot(trees: Sequence[TreeRecord]) -> PlotObservation:
    if not trees:
        raise SurveyDataError("cannot aggregate an empty tree list")
    first = trees[0]
    key = (first.plot_id, first.year, first.species)
    for t in trees:
        if (t.plot_id, t.year, t.species) != key:
            raise SurveyDataError(
                f"mixed plot/year/species in aggregation: {key} vs "
                f"{(t.plot_id, t.year, t.species)}"
            )
    # sorted so the float sum does not depend on input order
    mids = sorted(midpoint_conversion(t.defoliation_class) for t in trees)
    y = clamp_defoliation(math.fsum(mids) / len(mids))
    plot_ages = sorted({t.plot_age for t in trees if t.plot_age is not None})
    fallback = plot_ages[0] if plot_ages else None
    if len(plot_ages) > 1:
        logger.warning("plot %s year %s: conflicting plot ages %s", first.plot_id, first.year, plot_ages)
    age = plot_stand_age([t.tree_age for t in trees], fallback)
    return PlotObservation(
        plot_id=first.plot_id,
        easting=first.easting,
        northing=first.northing,
        year=first.year,
        species=first.species,
        mean_defoliation=y,
        tree_count=len(trees),
        stand_age=age,
        region_tag=first.region_tag,
        grid_tag=first.grid_tag,
    )


def aggregate_survey(
    records: Iterable[TreeRecord], species: str | None = None
) -> list[PlotObservation]:
    """Group tree records by (plot, year, species) and aggregate each group.

    Output is sorted by (species, plot_id, year).
    """
    groups: dict[tuple[str, str, int], list[TreeRecord]] = {}
    for r in records:
        if species is not None and r.species != species:
            continue
        groups.setdefault((r.species, r.plot_id, r.year), []).append(r)
    return [aggregate_plot(groups[k]) for k in sorted(groups)]


def weighted_median_age(ages: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted median; the lower median is returned on ties."""
    a = np.asarray(ages, dtype=float)
    w = np.asarray(weights, dtype=float)
    if a.size == 0:
        raise SurveyDataError("weighted median of an empty set")
    if a.shape != w.shape:
        raise SurveyDataError("ages and weights differ in length")
    if np.any(w < 0) or not np.any(w > 0):
        raise SurveyDataError("weights must be nonnegative with positive total")
    order = np.argsort(a, kind="stable")
    cw = np.cumsum(w[order])
    idx = int(np.searchsorted(cw, 0.5 * cw[-1], side="left"))
    return float(a[order][idx])


# --------------------------------------------------------------------------
# CSV input


def _skip_comments(fh) -> int:
    """Advance past leading ``#`` lines; returns how many were skipped."""
    n = 0
    while True:
        pos = fh.tell()
        line = fh.readline()
        if not line.startswith("#"):
            fh.seek(pos)
            return n
        n += 1


def _write_meta(fh, meta: dict | None) -> None:
    for k, v in (meta or {}).items():
        fh.write(f"# {k}: {v}\n")


def _parse_optional_int(text: str, name: str) -> int | None:
    text = text.strip()
    if text == "":
        return None
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"{name} must be an integer, got {text!r}")
    return int(value)


def _parse_row(row: dict[str, str]) -> TreeRecord:
    try:
        cls = float(row["defoliation_class"])
    except ValueError:
        raise SurveyDataError(f"unparseable defoliation_class {row['defoliation_class']!r}")
    if not cls.is_integer() or int(cls) not in VALID_CLASSES:
        raise SurveyDataError(f"invalid class {row['defoliation_class']!r}")
    try:
        easting = float(row["easting_m"])
        northing = float(row["northing_m"])
        year = int(row["year"])
        tree_age = _parse_optional_int(row["tree_age"], "tree_age")
        plot_age = _parse_optional_int(row["plot_age"], "plot_age")
    except ValueError as exc:
        raise SurveyDataError(f"unparseable numeric field: {exc}")
    return TreeRecord(
        plot_id=row["plot_id"].strip(),
        easting=easting,
        northing=northing,
        year=year,
        species=row["species"].strip(),
        defoliation_class=int(cls),
        tree_age=tree_age,
        plot_age=plot_age,
        region_tag=row["region_tag"].strip(),
        grid_tag=row["grid_tag"].strip(),
    )


def load_survey_csv(
    path: str | Path,
    *,
    strict: bool = False,
    years: tuple[int, int] | None = None,
) -> LoadResult:
    """Read and validate a tree-level survey CSV.

    Malformed rows are dropped and reported with their line number.  With
    ``strict=True`` any malformed row raises :class:`SurveyDataError` after
    the whole file has been scanned.  ``years`` optionally restricts the
    accepted survey window (inclusive).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        skipped = _skip_comments(fh)
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, header row required")
        missing = [c for c in SURVEY_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing required columns: {', '.join(missing)}")
        records: list[TreeRecord] = []
        diags: list[RowDiagnostic] = []
        for row in reader:
            line = reader.line_num + skipped
            try:
                rec = _parse_row(row)
                if years is not None and not (years[0] <= rec.year <= years[1]):
                    raise SurveyDataError(f"year {rec.year} outside survey window {years}")
            except (SurveyDataError, TypeError, AttributeError) as exc:
                diags.append(RowDiagnostic(line, str(exc)))
                continue
            records.append(rec)
    if not records and not diags:
        warnings.warn(f"{path}: no data rows", stacklevel=2)
    for d in diags:
        logger.warning("%s: %s", path, d)
    if strict and diags:
        raise SurveyDataError(
            f"{path}: {len(diags)} malformed row(s):\n" + "\n".join(str(d) for d in diags)
        )
    return LoadResult(records, diags)


def write_survey_csv(records: Iterable[TreeRecord], path: str | Path, meta: dict | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _write_meta(fh, meta)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURVEY_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.plot_id,
                    repr(float(r.easting)),
                    repr(float(r.northing)),
                    r.year,
                    r.species,
                    r.defoliation_class,
                    "" if r.tree_age is None else r.tree_age,
                    "" if r.plot_age is None else r.plot_age,
                    r.region_tag,
                    r.grid_tag,
                ]
            )


# --------------------------------------------------------------------------
# columnar plot table used by the model code


@dataclass
class PlotTable:
    """Column arrays of plot observations, all of equal length."""

    plot_id: np.ndarray
    easting: np.ndarray
    northing: np.ndarray
    year: np.ndarray
    age: np.ndarray
    y: np.ndarray
    n_trees: np.ndarray
    species: np.ndarray | None = None
    region_tag: np.ndarray | None = None
    grid_tag: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.plot_id)
        self.plot_id = np.asarray(self.plot_id).astype(str)
        self.easting = np.asarray(self.easting, dtype=float)
        self.northing = np.asarray(self.northing, dtype=float)
        self.year = np.asarray(self.year, dtype=int)
        self.age = np.asarray(self.age, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.n_trees = np.asarray(self.n_trees, dtype=float)
        for name in ("species", "region_tag", "grid_tag"):
            v = getattr(self, name)
            setattr(self, name, np.full(n, "", dtype=object) if v is None else np.asarray(v, dtype=object))
        for name in ("easting", "northing", "year", "age", "y", "n_trees",
                     "species", "region_tag", "grid_tag"):
            if len(getattr(self, name)) != n:
                raise SurveyDataError(f"column {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.plot_id)

    def subset(self, mask) -> "PlotTable":
        idx = np.asarray(mask)
        return PlotTable(**{name: getattr(self, name)[idx] for name in _TABLE_FIELDS})

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in _TABLE_FIELDS:
            col = getattr(self, name)
            if col.dtype == object or col.dtype.kind == "U":
                h.update("\x1f".join(map(str, col)).encode())
            else:
                h.update(np.ascontiguousarray(col).tobytes())
        return h.hexdigest()

    @classmethod
    def from_observations(cls, obs: Iterable[PlotObservation], *, drop_excluded: bool = True) -> "PlotTable":
        obs = list(obs)
        kept = [o for o in obs if not (drop_excluded and o.excluded)]
        if drop_excluded and len(kept) < len(obs):
            logger.info("excluded %d plot-years with irregular or missing stand age", len(obs) - len(kept))
        return cls(
            plot_id=[o.plot_id for o in kept],
            easting=[o.easting for o in kept],
            northing=[o.northing for o in kept],
            year=[o.year for o in kept],
            age=[np.nan if isinstance(o.stand_age, AgeStatus) else o.stand_age for o in kept],
            y=[o.mean_defoliation for o in kept],
            n_trees=[o.tree_count for o in kept],
            species=[o.species for o in kept],
            region_tag=[o.region_tag for o in kept],
            grid_tag=[o.grid_tag for o in kept],
        )


_TABLE_FIELDS = (
    "plot_id", "easting", "northing", "year", "age", "y", "n_trees",
    "species", "region_tag", "grid_tag",
)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_plot_table(table: PlotTable, path: str | Path, meta: dict | None = None) -> None:
    """Write a plot table as CSV; floats use shortest round-trip repr."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _write_meta(fh, meta)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for i in range(len(table)):
            age = table.age[i]
            w.writerow(
                [
                    table.plot_id[i],
                    _fmt_float(table.easting[i]),
                    _fmt_float(table.northing[i]),
                    int(table.year[i]),
                    table.species[i],
                    _fmt_float(table.y[i]),
                    int(table.n_trees[i]),
                    "" if np.isnan(age) else _fmt_float(age),
                    table.region_tag[i],
                    table.grid_tag[i],
                ]
            )


def read_plot_table(path: str | Path) -> PlotTable:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        _skip_comments(fh)
        reader = csv.DictReader(fh)
        missing = [c for c in PLOT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing required columns: {', '.join(missing)}")
        rows = list(reader)
    return PlotTable(
        plot_id=[r["plot_id"] for r in rows],
        easting=[float(r["easting_m"]) for r in rows],
        northing=[float(r["northing_m"]) for r in rows],
        year=[int(r["year"]) for r in rows],
        age=[float(r["stand_age"]) if r["stand_age"] != "" else np.nan for r in rows],
        y=[float(r["mean_defoliation"]) for r in rows],
        n_trees=[int(r["tree_count"]) for r in rows],
        species=[r["species"] for r in rows],
        region_tag=[r["region_tag"] for r in rows],
        grid_tag=[r["grid_tag"] for r in rows],
    )
