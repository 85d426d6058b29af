"""Segmentation metrics, summary statistics, t-tests and zonal tabulation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.spatial import cKDTree

from .core import ZONES, MapKind
from .errors import EmptyMaskError, InvariantError, ShapeError, StatsError

__all__ = [
    "MetricsRow",
    "ZoneStats",
    "TTestResult",
    "dice",
    "boundary",
    "hausdorff_mm",
    "sen_spc",
    "evaluate_case",
    "aggregate",
    "betainc",
    "student_t_sf",
    "welch_t",
    "paired_t",
    "tabulate",
    "write_metrics_csv",
    "write_summary_csv",
    "write_tabulation_csv",
    "render_markdown",
]

TABLE_MAPS = (MapKind.SWS, MapKind.MAG, MapKind.PHI)
SUMMARY_METRICS = ("Dice", "Std", "Median", "Sen", "Spc", "HD")


@dataclass
class MetricsRow:
    case_id: str
    zone: str
    dice: float
    sensitivity: float
    specificity: float
    hausdorff_mm: float
    flags: tuple = ()


@dataclass
class ZoneStats:
    zone: str
    kind: MapKind
    source: str  # "mask" (ground truth) or "predicted"
    mean: float
    sd: float
    n: int
    flagged: bool = False


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: float
    p: float


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b, return_flag=False):
    """Dice overlap ``2|A & B| / (|A| + |B|)``; 1.0 (flagged) when both are empty."""
    a, b = _same_shape(a, b)
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return (1.0, True) if return_flag else 1.0
    value = 2.0 * np.count_nonzero(a & b) / total
    return (value, False) if return_flag else value


def boundary(mask):
    """Mask pixels with at least one 4-neighbour in-plane outside the mask.

    Works on 2D arrays or on the last two axes of 3D arrays; the slice edge
    counts as background.
    """
    m = np.asarray(mask, dtype=bool)
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(m, pad)
    inner = p[..., 1:-1, 1:-1]
    interior = p[..., :-2, 1:-1] & p[..., 2:, 1:-1] & p[..., 1:-1, :-2] & p[..., 1:-1, 2:]
    return inner & ~interior


def _directed_max(src, dst):
    dist, _ = cKDTree(dst).query(src, k=1)
    return float(np.max(dist))


def _hd_points(pa, pb):
    return max(_directed_max(pa, pb), _directed_max(pb, pa))


def hausdorff_mm(a, b, spacing_mm=(1.0, 1.0, 1.0), mode="2d"):
    """Symmetric Hausdorff distance between mask boundaries, in millimetres.

    Parameters
    ----------
    a, b : ndarray of bool, 2D ``(ny, nx)`` or 3D ``(nz, ny, nx)``
    spacing_mm : tuple
        ``(sx, sy[, sz])``.
    mode : {"2d", "3d"}
        ``"2d"`` computes the distance per slice and returns the maximum
        over slices where both boundaries exist. ``"3d"`` uses the union of
        in-plane boundary voxels of all slices as one point set.

    Raises
    ------
    EmptyMaskError
        If either mask is empty.
    """
    a, b = _same_shape(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("Hausdorff distance needs two non-empty masks")
    if a.ndim == 2:
        a, b = a[None], b[None]
    sx, sy = float(spacing_mm[0]), float(spacing_mm[1])
    sz = float(spacing_mm[2]) if len(spacing_mm) > 2 else 1.0
    ba, bb = boundary(a), boundary(b)
    if mode == "3d":
        scale = np.array([sz, sy, sx])
        return _hd_points(np.argwhere(ba) * scale, np.argwhere(bb) * scale)
    if mode != "2d":
        raise ValueError(f"unknown Hausdorff mode {mode!r}")
    scale = np.array([sy, sx])
    best = None
    for z in range(a.shape[0]):
        if ba[z].any() and bb[z].any():
            d = _hd_points(np.argwhere(ba[z]) * scale, np.argwhere(bb[z]) * scale)
            best = d if best is None else max(best, d)
    if best is None:
        raise EmptyMaskError("no slice contains both boundaries")
    return best


def sen_spc(pred, truth, return_flags=False):
    """Sensitivity and specificity; an empty denominator yields 1.0, flagged."""
    pred, truth = _same_shape(pred, truth)
    tp = np.count_nonzero(pred & truth)
    fn = np.count_nonzero(~pred & truth)
    tn = np.count_nonzero(~pred & ~truth)
    fp = np.count_nonzero(pred & ~truth)
    flags = []
    if tp + fn:
        sen = tp / (tp + fn)
    else:
        sen = 1.0
        flags.append("sen_undefined")
    if tn + fp:
        spc = tn / (tn + fp)
    else:
        spc = 1.0
        flags.append("spc_undefined")
    if return_flags:
        return sen, spc, tuple(flags)
    return sen, spc


def evaluate_case(pred, truth, case_id="", hd_mode="2d"):
    """One :class:`MetricsRow` per zone. HD is NaN when a mask is empty."""
    rows = []
    for zone in ZONES:
        p, t = pred.zone(zone), truth.zone(zone)
        ds, empty = dice(p, t, return_flag=True)
        sen, spc, flags = sen_spc(p, t, return_flags=True)
        flags = list(flags) + (["both_empty"] if empty else [])
        try:
            hd = hausdorff_mm(p, t, truth.spacing_mm, mode=hd_mode)
        except EmptyMaskError:
            hd = math.nan
            flags.append("hd_undefined")
        rows.append(MetricsRow(case_id, zone.upper(), ds, sen, spc, hd, tuple(flags)))
    return rows


def _summary(values):
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return {"mean": math.nan, "sd": math.nan, "median": math.nan}
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(np.mean(v)), "sd": sd, "median": float(np.median(v))}


def aggregate(rows):
    """Per-zone mean, sample SD (n-1) and median of every metric.

    Returns ``{zone: {metric: {"mean", "sd", "median"}}}`` with metrics
    ``dice``, ``sensitivity``, ``specificity`` and ``hausdorff_mm``. NaN
    Hausdorff values (empty masks) are left out of their column.
    """
    rows = list(rows)
    if not rows:
        raise StatsError("cannot aggregate an empty list of rows")
    out = {}
    for zone in dict.fromkeys(r.zone for r in rows):
        sel = [r for r in rows if r.zone == zone]
        out[zone] = {
            m: _summary([getattr(r, m) for r in sel]) for m in ("dice", "sensitivity", "specificity", "hausdorff_mm")
        }
    return out


# --- Student t distribution --------------------------------------------------


def betainc(a, b, x):
    """Regularised incomplete beta function ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a > 0 and b > 0")
    return float(special.betainc(a, b, min(max(x, 0.0), 1.0)))


def student_t_sf2(t, dof):
    """Two-sided tail probability ``P(|T| >= |t|)`` for ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return min(1.0, max(0.0, betainc(dof / 2.0, 0.5, x)))


def student_t_sf(t, dof):
    """One-sided upper tail ``P(T >= t)``."""
    half = 0.5 * student_t_sf2(t, dof)
    return half if t >= 0 else 1.0 - half


def welch_t(x, y):
    """Welch's unequal-variance two-sample t-test (two-sided).

    Raises
    ------
    StatsError
        Fewer than two values in a sample, or zero variance in both.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        raise StatsError("Welch's t-test needs at least two values per sample")
    vx = np.var(x, ddof=1) / x.size
    vy = np.var(y, ddof=1) / y.size
    se2 = vx + vy
    if not se2 > 0:
        raise StatsError("both samples have zero variance")
    diff = float(np.mean(x) - np.mean(y))
    t = diff / math.sqrt(se2)
    dof = se2 * se2 / (vx * vx / (x.size - 1) + vy * vy / (y.size - 1))
    return TTestResult(t, float(dof), student_t_sf2(t, dof))


def paired_t(x, y):
    """Paired t-test on matched samples (two-sided)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError("paired samples must have equal length")
    d = x - y
    if d.size < 2:
        raise StatsError("a paired t-test needs at least two pairs")
    sd = np.std(d, ddof=1)
    if sd == 0:
        if np.all(d == 0):
            return TTestResult(0.0, float(d.size - 1), 1.0)
        raise StatsError("paired differences have zero variance")
    t = float(np.mean(d) / (sd / math.sqrt(d.size)))
    return TTestResult(t, float(d.size - 1), student_t_sf2(t, d.size - 1))


# --- zonal tabulation --------------------------------------------------------


@dataclass
class Tabulation:
    stats: list
    pvalues: dict  # (kind, zone) -> TTestResult | None

    def stat(self, kind, zone, source):
        kind = MapKind.parse(kind)
        for s in self.stats:
            if s.kind is kind and s.zone == zone.upper() and s.source == source:
                return s
        raise KeyError((kind, zone, source))


def _zone_values(case, mask, kind, zone):
    sel = mask.zone(zone)
    return case.maps[kind].values[sel].astype(np.float64)


def _ttest(a, b, paired):
    if paired:
        return paired_t(a, b)
    if a.size == b.size and np.array_equal(np.sort(a), np.sort(b)):
        return TTestResult(0.0, float(a.size + b.size - 2), 1.0)
    return welch_t(a, b)


def tabulate(cases, truths, preds, maps=TABLE_MAPS, paired=False, pooled=True):
    """Zonal mean +- SD of each map under ground-truth and predicted masks.

    Parameters
    ----------
    cases : list of CaseRecord
        Source of the SWS/mag/phi maps.
    truths, preds : list of MaskSet
        Ground-truth and predicted masks, aligned with ``cases``.
    paired : bool
        Compare per-case zone means with a paired t-test instead of Welch's
        test on the pooled voxel values.
    pooled : bool
        Report statistics over pooled voxels (True) or over per-case means.

    Returns
    -------
    Tabulation
        Rows for every (map, zone, source) and one t-test per (map, zone);
        zones empty under either mask are flagged and get no test.
    """
    if not (len(cases) == len(truths) == len(preds)):
        raise ShapeError("cases, truths and preds must align")
    stats, pvalues = [], {}
    for kind in maps:
        kind = MapKind.parse(kind)
        for zone in ZONES:
            samples = {}
            per_case = {}
            for source, masks in (("mask", truths), ("predicted", preds)):
                vals = [_zone_values(c, m, kind, zone) for c, m in zip(cases, masks)]
                pooled_vals = np.concatenate(vals) if vals else np.empty(0)
                means = np.array([v.mean() for v in vals if v.size])
                samples[source] = pooled_vals
                per_case[source] = means
                data = pooled_vals if pooled else means
                flagged = data.size == 0
                stats.append(
                    ZoneStats(
                        zone=zone.upper(),
                        kind=kind,
                        source=source,
                        mean=float(data.mean()) if data.size else math.nan,
                        sd=float(data.std(ddof=1)) if data.size > 1 else 0.0,
                        n=int(data.size),
                        flagged=flagged,
                    )
                )
            if paired:
                a, b = per_case["mask"], per_case["predicted"]
                ok = a.size == b.size and a.size >= 2
            else:
                a, b = samples["mask"], samples["predicted"]
                ok = a.size >= 2 and b.size >= 2
            try:
                pvalues[(kind, zone.upper())] = _ttest(a, b, paired) if ok else None
            except StatsError:
                pvalues[(kind, zone.upper())] = None
    for c, t in zip(cases, truths):
        if np.count_nonzero(t.cz) + np.count_nonzero(t.pz) > np.count_nonzero(t.pg):
            raise InvariantError(f"case {c.case_id}: zone voxels exceed gland voxels")
    return Tabulation(stats, pvalues)


# --- report writers ----------------------------------------------------------


def _fmt(v, digits=6):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def write_metrics_csv(path_or_buf, rows):
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "zone", "DS", "Sen", "Spc", "HD_mm"])
        for r in rows:
            w.writerow([r.case_id, r.zone, _fmt(r.dice), _fmt(r.sensitivity), _fmt(r.specificity), _fmt(r.hausdorff_mm)])
    finally:
        if own:
            fh.close()


def summary_header():
    cols = ["Model"]
    for zone in ("PG", "CZ", "PZ"):
        cols += [f"{zone} {m}" for m in SUMMARY_METRICS]
    return cols


def summary_row(label, agg):
    row = [label]
    for zone in ("PG", "CZ", "PZ"):
        z = agg[zone]
        row += [
            z["dice"]["mean"],
            z["dice"]["sd"],
            z["dice"]["median"],
            z["sensitivity"]["mean"],
            z["specificity"]["mean"],
            z["hausdorff_mm"]["mean"],
        ]
    return row


def write_summary_csv(path_or_buf, table):
    """``table`` is a list of ``(model label, aggregate(...))`` pairs."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(summary_header())
        for label, agg in table:
            row = summary_row(label, agg)
            w.writerow([row[0]] + [_fmt(v, 4) for v in row[1:]])
    finally:
        if own:
            fh.close()


def tabulation_header():
    cols = ["Map"]
    for zone in ("PG", "CZ", "PZ"):
        cols += [f"{zone} mask", f"{zone} predicted"]
    return cols + [f"{zone} P-value" for zone in ("PG", "CZ", "PZ")]


_MAP_LABEL = {MapKind.SWS: "SWS", MapKind.MAG: "mag", MapKind.PHI: "phi"}


def tabulation_rows(tab, maps=TABLE_MAPS):
    rows = []
    for kind in maps:
        kind = MapKind.parse(kind)
        row = [_MAP_LABEL.get(kind, kind.value)]
        for zone in ("PG", "CZ", "PZ"):
            for source in ("mask", "predicted"):
                s = tab.stat(kind, zone, source)
                row.append("n/a" if s.flagged else f"{s.mean:.4g}±{s.sd:.4g}")
        for zone in ("PG", "CZ", "PZ"):
            res = tab.pvalues.get((kind, zone))
            row.append("n/a" if res is None else f"{res.p:.4g}")
        rows.append(row)
    return rows


def write_tabulation_csv(path_or_buf, tab, maps=TABLE_MAPS):
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(tabulation_header())
        w.writerows(tabulation_rows(tab, maps))
    finally:
        if own:
            fh.close()


def render_markdown(header, rows):
    """Render a header and rows as a GitHub markdown table."""
    buf = io.StringIO()
    buf.write("| " + " | ".join(header) + " |\n")
    buf.write("|" + "---|" * len(header) + "\n")
    for row in rows:
        buf.write("| " + " | ".join(v if isinstance(v, str) else _fmt(v, 4) for v in row) + " |\n")
    return buf.getvalue()
