"""Marginal aggregation over factorial cells and nonparametric inference."""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .scoring import ScoreRecord

EXACT_MAX_N = 10


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic_u: float
    p_two_sided: float
    n1: int
    n2: int
    method: str

    __test__ = False  # keep pytest from collecting this as a test class


def midranks(values: Sequence[float]) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


@lru_cache(maxsize=None)
def u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """Number of rank arrangements giving each U = 0..n1*n2 (no ties)."""
    if n1 == 0 or n2 == 0:
        return (1,)
    a = u_counts(n1 - 1, n2)
    b = u_counts(n1, n2 - 1)
    out = [0] * (n1 * n2 + 1)
    # largest element from sample 1 beats all n2 of sample 2, else it is from sample 2
    for u, c in enumerate(a):
        out[u + n2] += c
    for u, c in enumerate(b):
        out[u] += c
    return tuple(out)


def exact_p(u: float, n1: int, n2: int) -> float:
    counts = u_counts(n1, n2)
    total = sum(counts)
    k = int(round(u))
    low = sum(counts[: k + 1])
    high = sum(counts[k:])
    return min(1.0, 2 * min(low, high) / total)


def mann_whitney_u(sample1: Sequence[float], sample2: Sequence[float]) -> TestResult:
    """Two-sided Mann-Whitney U test.

    U counts pairs with sample1 > sample2 (ties count one half). Exact
    p-values for tie-free samples with both sizes <= 10; otherwise the normal
    approximation with continuity correction and tie-corrected variance.
    """
    n1, n2 = len(sample1), len(sample2)
    if n1 == 0 or n2 == 0:
        raise AnalysisError("both samples must be non-empty")
    pooled = np.concatenate([np.asarray(sample1, float), np.asarray(sample2, float)])
    ranks = midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    _, tie_sizes = np.unique(pooled, return_counts=True)
    has_ties = bool(np.any(tie_sizes > 1))
    if np.all(pooled == pooled[0]):
        return TestResult(u, 1.0, n1, n2, "exact" if not has_ties else "normal_approx")
    if not has_ties and max(n1, n2) <= EXACT_MAX_N:
        return TestResult(u, exact_p(u, n1, n2), n1, n2, "exact")
    n = n1 + n2
    tie_term = float(np.sum(tie_sizes.astype(float) ** 3 - tie_sizes)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    dev = abs(u - n1 * n2 / 2.0)
    z = max(0.0, dev - 0.5) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return TestResult(u, min(1.0, max(p, np.finfo(float).tiny)), n1, n2, "normal_approx")


def _percentile_ci(boot: np.ndarray, estimate: float, alpha: float) -> tuple[float, float]:
    lo, hi = np.quantile(boot, [alpha / 2, 1 - alpha / 2])
    return float(min(lo, estimate)), float(max(hi, estimate))


def bootstrap_median_diff(
    sample_a: Sequence[float],
    sample_b: Sequence[float],
    n_boot: int = 1000,
    seed: int = 0,
    alpha: float = 0.05,
) -> tuple[float, float, float]:
    """median(A) - median(B) with a percentile bootstrap CI."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise AnalysisError("bootstrap needs at least two values per sample")
    if n_boot < 1000:
        raise AnalysisError("n_boot must be at least 1000")
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, a.size, size=(n_boot, a.size))
    ib = rng.integers(0, b.size, size=(n_boot, b.size))
    boot = np.median(a[ia], axis=1) - np.median(b[ib], axis=1)
    diff = float(np.median(a) - np.median(b))
    lo, hi = _percentile_ci(boot, diff, alpha)
    return diff, lo, hi


@dataclass(frozen=True)
class MarginalRow:
    median: float
    count: int
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class MarginalTable:
    factor: str
    unit: str
    metric: str
    rows: Mapping[str, MarginalRow]
    unit_values: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    excluded: tuple[str, ...] = ()

    @property
    def levels(self) -> list[str]:
        return list(self.rows)

    def gap(self) -> tuple[float, str, str]:
        """(largest level-median difference, high level, low level)."""
        if len(self.rows) < 2:
            return 0.0, "", ""
        hi = max(self.rows, key=lambda k: (self.rows[k].median, k))
        lo = min(self.rows, key=lambda k: (self.rows[k].median, k))
        return self.rows[hi].median - self.rows[lo].median, hi, lo

    def separated(self) -> bool:
        """True when no two levels have overlapping confidence intervals."""
        rows = list(self.rows.values())
        if len(rows) < 2:
            return False
        for a, b in itertools.combinations(rows, 2):
            if a.ci_low <= b.ci_high and b.ci_low <= a.ci_high:
                return False
        return True


UNITS = ("pair", "structure", "speaker")


def _observations(records, unit, factor, metric, speaker_tags):
    """Yield (unit_id, level, partner_key, balance_levels, value)."""
    for rec in records:
        if unit == "speaker":
            for spk in rec.roles.values():
                tags = (speaker_tags or {}).get(spk, {})
                level = tags.get(factor, rec.factor_levels.get(factor))
                value = rec.speaker_f1(spk) if metric == "f1" else rec.der.der
                yield spk, level, (rec.structure_id, rec.pair_id), rec, value
        else:
            uid = rec.pair_id if unit == "pair" else rec.structure_id
            partner = rec.structure_id if unit == "pair" else rec.pair_id
            if metric == "f1":
                value = float(np.mean([rec.speaker_f1(s) for s in rec.roles.values()]))
            else:
                value = rec.der.der
            yield uid, rec.factor_levels.get(factor), partner, rec, value


def _unit_cells(records, unit, factor, metric, balance, speaker_tags):
    units: dict[str, dict] = {}
    excluded = set()
    for uid, level, partner, rec, value in _observations(records, unit, factor, metric, speaker_tags):
        if level is None:
            excluded.add(uid)
            continue
        entry = units.setdefault(uid, {"level": level, "cells": {}})
        if entry["level"] != level:
            raise AnalysisError(f"{unit} {uid!r} has inconsistent {factor} levels")
        weight_key = rec.factor_levels.get(balance, "") if balance else ""
        entry["cells"].setdefault(partner, {"group": weight_key, "values": []})["values"].append(value)
    for uid in list(excluded):
        if uid in units:
            excluded.discard(uid)
    return units, tuple(sorted(excluded))


def _cell_weights(cells: list[dict]) -> np.ndarray:
    groups: dict[str, int] = {}
    for c in cells:
        groups[c["group"]] = groups.get(c["group"], 0) + 1
    return np.array([1.0 / (len(groups) * groups[c["group"]]) for c in cells])


def _marginal(
    records: Sequence[ScoreRecord],
    unit: str,
    factor: str,
    metric: str,
    n_boot: int,
    seed: int,
    balance: str | None,
    speaker_tags: Mapping[str, Mapping[str, str]] | None,
    alpha: float = 0.05,
) -> tuple[MarginalTable, dict[str, np.ndarray]]:
    if unit not in UNITS:
        raise AnalysisError(f"unit must be one of {UNITS}")
    if metric not in ("der", "f1"):
        raise AnalysisError("metric must be 'der' or 'f1'")
    units, excluded = _unit_cells(records, unit, factor, metric, balance, speaker_tags)

    # content-based ordering keeps results independent of record order and unit ids
    prepared = []
    for uid, entry in units.items():
        cells = [
            {"group": c["group"], "values": np.sort(np.asarray(c["values"], float))}
            for c in entry["cells"].values()
        ]
        cells.sort(key=lambda c: (c["group"], tuple(c["values"])))
        weights = _cell_weights(cells)
        value = float(sum(w * c["values"].mean() for w, c in zip(weights, cells)))
        prepared.append((entry["level"], value, tuple(tuple(c["values"]) for c in cells), uid, cells, weights))
    prepared.sort(key=lambda p: (p[0], p[1], p[2]))

    rng = np.random.default_rng(seed)
    by_level: dict[str, list] = {}
    for level, value, _, uid, cells, weights in prepared:
        boot = np.zeros(n_boot)
        for w, c in zip(weights, cells):
            v = c["values"]
            if v.size > 1:
                boot += w * v[rng.integers(0, v.size, size=(n_boot, v.size))].mean(axis=1)
            else:
                boot += w * v[0]
        by_level.setdefault(level, []).append((uid, value, boot))

    rows = {}
    boots = {}
    unit_values = {}
    for level in sorted(by_level):
        items = by_level[level]
        values = np.array([v for _, v, _ in items])
        mat = np.stack([b for _, _, b in items], axis=1)
        if len(items) > 1:
            pick = rng.integers(0, len(items), size=(n_boot, len(items)))
            level_boot = np.median(np.take_along_axis(mat, pick, axis=1), axis=1)
        else:
            level_boot = mat[:, 0]
        med = float(np.median(values))
        lo, hi = _percentile_ci(level_boot, med, alpha)
        rows[level] = MarginalRow(med, len(items), lo, hi)
        boots[level] = level_boot
        unit_values[level] = {uid: v for uid, v, _ in items}
    table = MarginalTable(factor, unit, metric, rows, unit_values, excluded)
    return table, boots


def marginal_medians(
    records: Sequence[ScoreRecord],
    unit: str,
    factor: str,
    metric: str = "der",
    n_boot: int = 1000,
    seed: int = 0,
    balance: str | None = None,
    speaker_tags: Mapping[str, Mapping[str, str]] | None = None,
) -> MarginalTable:
    """Per-unit averages over partner cells, then per-level medians.

    Each unit (pair, structure or speaker) is averaged over its partner cells,
    each cell being the mean of its mirror versions. ``balance`` names a
    factor whose levels are weighted equally within that average. CIs come
    from a two-stage bootstrap: units within level, versions within cell.
    """
    table, _ = _marginal(records, unit, factor, metric, n_boot, seed, balance, speaker_tags)
    return table


@dataclass(frozen=True)
class FactorAnalysis:
    factor: str
    kind: str  # "voice" or "structure"
    table: MarginalTable
    gap: float
    gap_high: str
    gap_low: str
    gap_ci: tuple[float, float]
    tests: tuple[tuple[str, str, TestResult, tuple[float, float, float] | None], ...]


@dataclass(frozen=True)
class AttributionReport:
    metric: str
    analyses: tuple[FactorAnalysis, ...]
    n_records: int
    n_structures: int
    n_pairs: int

    def _largest(self, kind: str) -> float:
        return max((a.gap for a in self.analyses if a.kind == kind), default=0.0)

    @property
    def structure_gap(self) -> float:
        return self._largest("structure")

    @property
    def voice_gap(self) -> float:
        return self._largest("voice")

    @property
    def ratio(self) -> float:
        s, v = self.structure_gap, self.voice_gap
        if v == 0:
            return math.inf if s > 0 else math.nan
        return s / v

    def get(self, factor: str, kind: str) -> FactorAnalysis:
        for a in self.analyses:
            if a.factor == factor and a.kind == kind:
                return a
        raise KeyError((factor, kind))

    def summary(self) -> str:
        lines = [
            f"metric: {self.metric}",
            f"records: {self.n_records} ({self.n_structures} structures x {self.n_pairs} pairs)",
        ]
        for a in self.analyses:
            lines.append(f"[{a.kind}] {a.factor} (unit={a.table.unit})")
            for level, row in a.table.rows.items():
                lines.append(
                    f"  {level:<12} median={row.median:.4f}  n={row.count}  "
                    f"CI=[{row.ci_low:.4f}, {row.ci_high:.4f}]"
                )
            lines.append(
                f"  gap {a.gap_high}-{a.gap_low} = {a.gap:.4f}  CI=[{a.gap_ci[0]:.4f}, {a.gap_ci[1]:.4f}]  "
                f"levels separated: {'yes' if a.table.separated() else 'no'}"
            )
            for l1, l2, test, boot in a.tests:
                extra = f"  median diff={boot[0]:.4f} CI=[{boot[1]:.4f}, {boot[2]:.4f}]" if boot else ""
                lines.append(f"  {l1} vs {l2}: U={test.statistic_u:g} p={test.p_two_sided:.4g} ({test.method}){extra}")
        lines.append(f"largest structure gap: {self.structure_gap:.4f}")
        lines.append(f"largest voice gap: {self.voice_gap:.4f}")
        lines.append(f"structure/voice ratio: {self.ratio:.3g}")
        return "\n".join(lines) + "\n"


def check_crossing(records: Sequence[ScoreRecord]) -> tuple[list[str], list[str]]:
    structures = sorted({r.structure_id for r in records})
    pairs = sorted({r.pair_id for r in records})
    cells: dict[tuple[str, str], set[int]] = {}
    n_roles = {}
    for r in records:
        cells.setdefault((r.structure_id, r.pair_id), set()).add(r.version_index)
        n_roles[(r.structure_id, r.pair_id)] = len(r.roles)
    missing = []
    for s in structures:
        for p in pairs:
            have = cells.get((s, p))
            if have is None:
                missing.append(f"{s} x {p}")
                continue
            want = set(range(1, math.factorial(n_roles[(s, p)]) + 1))
            for idx in sorted(want - have):
                missing.append(f"{s} x {p} v{idx}")
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise AnalysisError(f"incomplete factorial crossing; missing cells: {shown}")
    return structures, pairs


def attribution_report(
    records: Sequence[ScoreRecord],
    factors: Iterable[str] | None = None,
    metric: str = "der",
    n_boot: int = 1000,
    seed: int = 0,
    balance: Mapping[str, str] | None = None,
) -> AttributionReport:
    """Voice-side and structure-side marginals for each factor.

    A factor ``f`` is analysed on the structure side when records carry
    ``structure.f`` and on the voice side when they carry ``pair.f``.
    ``balance`` optionally maps a factor key to the partner factor whose
    levels should be weighted equally.
    """
    records = list(records)
    if not records:
        raise AnalysisError("no records to analyse")
    structures, pairs = check_crossing(records)
    keys = sorted({k for r in records for k in r.factor_levels})
    if factors is None:
        factors = sorted({k.split(".", 1)[1] for k in keys if "." in k})
    analyses = []
    for i, f in enumerate(factors):
        for kind, prefix, unit in (("structure", "structure.", "structure"), ("voice", "pair.", "pair")):
            key = prefix + f
            if key not in keys:
                continue
            table, boots = _marginal(
                records, unit, key, metric, n_boot, seed + 7919 * i, (balance or {}).get(key), None
            )
            gap, hi, lo = table.gap()
            if hi:
                gap_boot = boots[hi] - boots[lo]
                gap_ci = _percentile_ci(gap_boot, gap, 0.05)
            else:
                gap_ci = (0.0, 0.0)
            tests = []
            for l1, l2 in itertools.combinations(table.levels, 2):
                a = list(table.unit_values[l1].values())
                b = list(table.unit_values[l2].values())
                boot = bootstrap_median_diff(a, b, n_boot, seed) if len(a) >= 2 and len(b) >= 2 else None
                tests.append((l1, l2, mann_whitney_u(a, b), boot))
            analyses.append(FactorAnalysis(f, kind, table, gap, hi, lo, gap_ci, tuple(tests)))
    return AttributionReport(metric, tuple(analyses), len(records), len(structures), len(pairs))


def report_tables(report: AttributionReport) -> str:
    """Tab-separated marginal tables for every analysed factor."""
    lines = ["#kind\tfactor\tunit\tlevel\tmedian\tcount\tci_low\tci_high"]
    for a in report.analyses:
        for level, row in a.table.rows.items():
            lines.append(
                f"{a.kind}\t{a.factor}\t{a.table.unit}\t{level}\t{row.median:.6f}\t{row.count}\t"
                f"{row.ci_low:.6f}\t{row.ci_high:.6f}"
            )
    lines.append("#gap\tkind\tfactor\thigh\tlow\tgap\tci_low\tci_high")
    for a in report.analyses:
        lines.append(
            f"gap\t{a.kind}\t{a.factor}\t{a.gap_high}\t{a.gap_low}\t{a.gap:.6f}\t"
            f"{a.gap_ci[0]:.6f}\t{a.gap_ci[1]:.6f}"
        )
    lines.append("#test\tkind\tfactor\tlevel1\tlevel2\tU\tp\tmethod")
    for a in report.analyses:
        for l1, l2, t, _ in a.tests:
            lines.append(f"test\t{a.kind}\t{a.factor}\t{l1}\t{l2}\t{t.statistic_u:g}\t{t.p_two_sided:.6g}\t{t.method}")
    return "\n".join(lines) + "\n"


def figure_data(analysis: FactorAnalysis) -> str:
    lines = ["#level\tmedian\tci_low\tci_high"]
    for level, row in analysis.table.rows.items():
        lines.append(f"{level}\t{row.median:.6f}\t{row.ci_low:.6f}\t{row.ci_high:.6f}")
    return "\n".join(lines) + "\n"
