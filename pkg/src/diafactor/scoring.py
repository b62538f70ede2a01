"""Diarization scoring: optimal speaker mapping, DER, per-speaker F1, entropy.

All arithmetic runs on integer milliseconds, so results are exact up to the
final division.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .annotation import Timeline, format_tags, merge_intervals, parse_tags, to_ms
from .design import ConversationVersion, Design


class ScoringError(ValueError):
    pass


def _intersection_ms(a: Sequence[tuple[int, int]], b: Sequence[tuple[int, int]]) -> int:
    i = j = total = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


def overlap_matrix(ref: Timeline, hyp: Timeline) -> tuple[list[str], list[str], np.ndarray]:
    """(ref labels, hyp labels, ms of co-activity indexed [hyp, ref])."""
    ref_labels, hyp_labels = ref.labels, hyp.labels
    ref_iv = {r: ref.intervals_ms(r) for r in ref_labels}
    hyp_iv = {h: hyp.intervals_ms(h) for h in hyp_labels}
    m = np.zeros((len(hyp_labels), len(ref_labels)), dtype=np.int64)
    for i, h in enumerate(hyp_labels):
        for j, r in enumerate(ref_labels):
            m[i, j] = _intersection_ms(hyp_iv[h], ref_iv[r])
    return ref_labels, hyp_labels, m


def optimal_mapping(ref: Timeline, hyp: Timeline) -> dict[str, str]:
    """One-to-one hyp->ref label map maximizing total mapped overlap.

    Pairs with zero overlap are left unmapped.
    """
    ref_labels, hyp_labels, m = overlap_matrix(ref, hyp)
    if not ref_labels or not hyp_labels:
        return {}
    rows, cols = linear_sum_assignment(m, maximize=True)
    return {hyp_labels[i]: ref_labels[j] for i, j in zip(rows, cols) if m[i, j] > 0}


def mapped_total(ref: Timeline, hyp: Timeline, mapping: Mapping[str, str]) -> int:
    ref_labels, hyp_labels, m = overlap_matrix(ref, hyp)
    ri = {r: j for j, r in enumerate(ref_labels)}
    hi = {h: i for i, h in enumerate(hyp_labels)}
    return int(sum(m[hi[h], ri[r]] for h, r in mapping.items()))


@dataclass(frozen=True)
class DerBreakdown:
    missed: float
    false_alarm: float
    confusion: float
    scored_speech: float

    @property
    def der(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.scored_speech


def _elementary(ref: Timeline, hyp: Timeline, extra: Iterable[int] = ()):
    """Yield (start, end, ref label set, hyp label set) over all boundaries."""
    events: dict[int, list[tuple[int, str, int]]] = {}
    for side, tl in ((0, ref), (1, hyp)):
        for label in tl.labels:
            for s, e in tl.intervals_ms(label):
                events.setdefault(s, []).append((side, label, 1))
                events.setdefault(e, []).append((side, label, -1))
    for b in extra:
        events.setdefault(b, [])
    active: tuple[dict[str, int], dict[str, int]] = ({}, {})
    points = sorted(events)
    for k, t in enumerate(points):
        for side, label, delta in events[t]:
            active[side][label] = active[side].get(label, 0) + delta
            if active[side][label] == 0:
                del active[side][label]
        if k + 1 < len(points):
            yield t, points[k + 1], set(active[0]), set(active[1])


def compute_der(
    ref: Timeline,
    hyp: Timeline,
    collar: float = 0.0,
    omit_overlap: bool = False,
    mapping: Mapping[str, str] | None = None,
) -> DerBreakdown:
    """Time-weighted missed speech, false alarm and speaker confusion.

    ``collar`` excludes +/- that many seconds around every reference segment
    boundary; ``omit_overlap`` excludes regions with two or more reference
    speakers. Unless one is given, the optimal mapping is computed over the
    scored regions only, as md-eval does.
    """
    if collar < 0:
        raise ScoringError("collar must be non-negative")
    c = to_ms(collar)
    no_score: list[tuple[int, int]] = []
    if c > 0:
        for seg in ref.segments:
            for b in (seg.start_ms, seg.end_ms):
                no_score.append((max(0, b - c), b + c))
    no_score = merge_intervals(no_score)
    extra = [b for iv in no_score for b in iv]

    scored_regions = []
    z = 0
    for start, end, r, h in _elementary(ref, hyp, extra):
        while z < len(no_score) and no_score[z][1] <= start:
            z += 1
        if z < len(no_score) and no_score[z][0] <= start < no_score[z][1]:
            continue
        if omit_overlap and len(r) >= 2:
            continue
        scored_regions.append((end - start, r, h))
    if mapping is None:
        mapping = _mapping_from_regions(ref.labels, hyp.labels, scored_regions)

    missed = fa = conf = scored = 0
    for dur, r, h in scored_regions:
        n_ref, n_hyp = len(r), len(h)
        correct = len(r & {mapping.get(x) for x in h})
        scored += dur * n_ref
        missed += dur * max(0, n_ref - n_hyp)
        fa += dur * max(0, n_hyp - n_ref)
        conf += dur * (min(n_ref, n_hyp) - correct)
    if scored == 0:
        raise ScoringError("no scored reference speech; DER undefined")
    return DerBreakdown(missed / 1000.0, fa / 1000.0, conf / 1000.0, scored / 1000.0)


def _mapping_from_regions(ref_labels, hyp_labels, regions) -> dict[str, str]:
    if not ref_labels or not hyp_labels:
        return {}
    ri = {r: j for j, r in enumerate(ref_labels)}
    hi = {h: i for i, h in enumerate(hyp_labels)}
    m = np.zeros((len(hyp_labels), len(ref_labels)), dtype=np.int64)
    for dur, r, h in regions:
        for x in h:
            for y in r:
                m[hi[x], ri[y]] += dur
    rows, cols = linear_sum_assignment(m, maximize=True)
    return {hyp_labels[i]: ref_labels[j] for i, j in zip(rows, cols) if m[i, j] > 0}


@dataclass(frozen=True)
class SpeakerScore:
    speaker_id: str
    tp: float
    fp: float
    fn: float

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp > 0 else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp > 0 else 0.0

    @property
    def f1(self) -> float:
        if self.tp <= 0:
            return 0.0
        return 2 * self.tp / (2 * self.tp + self.fp + self.fn)


def per_speaker_f1(
    ref: Timeline, hyp: Timeline, mapping: Mapping[str, str] | None = None
) -> list[SpeakerScore]:
    """Time-based tp/fp/fn for every reference speaker under the optimal mapping."""
    if mapping is None:
        mapping = optimal_mapping(ref, hyp)
    inverse = {r: h for h, r in mapping.items()}
    out = []
    for r in ref.labels:
        r_iv = ref.intervals_ms(r)
        r_len = sum(e - s for s, e in r_iv)
        h = inverse.get(r)
        if h is None:
            out.append(SpeakerScore(r, 0.0, 0.0, r_len / 1000.0))
            continue
        h_iv = hyp.intervals_ms(h)
        h_len = sum(e - s for s, e in h_iv)
        tp = _intersection_ms(r_iv, h_iv)
        out.append(SpeakerScore(r, tp / 1000.0, (h_len - tp) / 1000.0, (r_len - tp) / 1000.0))
    return out


@dataclass(frozen=True)
class ScoreRecord:
    version_id: str
    structure_id: str
    pair_id: str
    version_index: int
    der: DerBreakdown
    per_speaker: tuple[SpeakerScore, ...]
    roles: Mapping[str, str]
    factor_levels: Mapping[str, str] = field(default_factory=dict)

    @property
    def per_role(self) -> dict[str, float]:
        by_speaker = {s.speaker_id: s.f1 for s in self.per_speaker}
        return {role: by_speaker.get(spk, 0.0) for role, spk in sorted(self.roles.items())}

    def speaker_f1(self, speaker_id: str) -> float:
        for s in self.per_speaker:
            if s.speaker_id == speaker_id:
                return s.f1
        raise KeyError(speaker_id)


def score_version(
    version: ConversationVersion,
    ref: Timeline,
    hyp: Timeline,
    collar: float = 0.0,
    omit_overlap: bool = True,
) -> ScoreRecord:
    mapping = optimal_mapping(ref, hyp)
    der = compute_der(ref, hyp, collar=collar, omit_overlap=omit_overlap, mapping=mapping)
    scores = {s.speaker_id: s for s in per_speaker_f1(ref, hyp, mapping)}
    per_speaker = []
    for spk in version.pair.members:
        # a speaker without reference speech still gets a (zero) row
        per_speaker.append(scores.pop(spk, SpeakerScore(spk, 0.0, 0.0, 0.0)))
    per_speaker.extend(scores.values())
    return ScoreRecord(
        version.version_id,
        version.structure_id,
        version.pair_id,
        version.version_index,
        der,
        tuple(per_speaker),
        dict(version.assignment.mapping),
        dict(version.factor_levels),
    )


@dataclass(frozen=True)
class MirrorAverage:
    structure_id: str
    pair_id: str
    speaker_f1: Mapping[str, float]
    role_f1: Mapping[str, float]
    der: float
    factor_levels: Mapping[str, str]
    n_versions: int


def mirror_average(records: Iterable[ScoreRecord], expected_versions: int | None = None) -> list[MirrorAverage]:
    """Average F1 per speaker and per role over the mirror versions of each (structure, pair).

    Groups must hold all ``expected_versions`` versions (default r! for r roles).
    """
    groups: dict[tuple[str, str], list[ScoreRecord]] = {}
    for rec in records:
        groups.setdefault((rec.structure_id, rec.pair_id), []).append(rec)
    out = []
    for (sid, pid), recs in sorted(groups.items()):
        n_roles = len(recs[0].roles)
        want = expected_versions if expected_versions is not None else math.factorial(n_roles)
        have = {r.version_index for r in recs}
        missing = sorted(set(range(1, want + 1)) - have)
        if missing:
            raise ScoringError(f"incomplete mirror group ({sid}, {pid}): missing versions {missing}")
        speakers = sorted({spk for r in recs for spk in r.roles.values()})
        speaker_f1 = {spk: float(np.mean([r.speaker_f1(spk) for r in recs])) for spk in speakers}
        roles = sorted(recs[0].roles)
        role_f1 = {role: float(np.mean([r.per_role[role] for r in recs])) for role in roles}
        der = float(np.mean([r.der.der for r in recs]))
        out.append(MirrorAverage(sid, pid, speaker_f1, role_f1, der, dict(recs[0].factor_levels), len(recs)))
    return out


def _covered_before(starts: np.ndarray, ends: np.ndarray, cum: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Speech ms in [0, t) for merged intervals, vectorized over t."""
    idx = np.searchsorted(ends, t, side="right")
    partial = np.zeros_like(t, dtype=np.float64)
    inside = idx < starts.size
    s = starts[np.minimum(idx, starts.size - 1)]
    partial[inside] = np.maximum(0.0, t[inside] - s[inside])
    return cum[idx] + partial


def window_starts(end_ms: int, window_ms: int, hop_ms: int) -> np.ndarray:
    if end_ms <= window_ms:
        return np.zeros(1, dtype=np.int64)
    return np.arange(0, end_ms - window_ms + 1, hop_ms, dtype=np.int64)


def subsegment_entropy(ref: Timeline, window: float = 1.5, hop: float | None = None) -> float:
    """Mean base-2 entropy of the speaker-time distribution inside sliding windows.

    Windows start at 0 and step by ``hop`` (default ``window / 2``) while they
    fit inside the recording; silence is excluded from each window's
    distribution and speech-free windows are skipped.
    """
    if hop is None:
        hop = window / 2
    if window <= 0 or hop <= 0:
        raise ScoringError("window and hop must be positive")
    if ref.speech_time() <= 0:
        raise ScoringError("no speech in reference; entropy undefined")
    w, h = to_ms(window), to_ms(hop)
    starts = window_starts(to_ms(ref.end), w, h)
    stops = np.minimum(starts + w, to_ms(ref.end)).astype(np.float64)
    starts_f = starts.astype(np.float64)
    per_label = []
    for label in ref.labels:
        iv = ref.intervals_ms(label)
        s = np.array([a for a, _ in iv], dtype=np.float64)
        e = np.array([b for _, b in iv], dtype=np.float64)
        cum = np.concatenate([[0.0], np.cumsum(e - s)])
        per_label.append(_covered_before(s, e, cum, stops) - _covered_before(s, e, cum, starts_f))
    times = np.stack(per_label, axis=1)
    totals = times.sum(axis=1)
    keep = totals > 0
    p = times[keep] / totals[keep, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return float(np.mean(terms.sum(axis=1)))


def boundary_fraction(ref: Timeline, speech: Timeline, window: float, hop: float) -> float:
    """Fraction of diarizer subsegments that contain more than one reference speaker."""
    from .diarizer import window_placements

    placements = []
    for s, e in speech.intervals_ms():
        placements.extend(window_placements(s, e, to_ms(window), to_ms(hop)))
    if not placements:
        return 0.0
    spanning = 0
    ivs = {label: ref.intervals_ms(label) for label in ref.labels}
    for a, b in placements:
        present = sum(1 for iv in ivs.values() if _intersection_ms(iv, [(a, b)]) > 0)
        spanning += present > 1
    return spanning / len(placements)


SCORE_HEADER = (
    "#VERSION\tversion_id\tder\tmissed\tfa\tconfusion\tscored_speech\tfactor_levels\n"
    "#SPEAKER\tversion_id\tspeaker\trole\ttp\tfp\tfn\tf1\n"
)


def write_scores(records: Iterable[ScoreRecord]) -> str:
    lines = []
    for rec in sorted(records, key=lambda r: r.version_id):
        d = rec.der
        lines.append(
            f"VERSION\t{rec.version_id}\t{d.der:.6f}\t{d.missed:.3f}\t{d.false_alarm:.3f}\t"
            f"{d.confusion:.3f}\t{d.scored_speech:.3f}\t{format_tags(rec.factor_levels) or '-'}"
        )
        role_of = {spk: role for role, spk in rec.roles.items()}
        for s in rec.per_speaker:
            lines.append(
                f"SPEAKER\t{rec.version_id}\t{s.speaker_id}\t{role_of.get(s.speaker_id, '-')}\t"
                f"{s.tp:.3f}\t{s.fp:.3f}\t{s.fn:.3f}\t{s.f1:.6f}"
            )
    return SCORE_HEADER + "".join(line + "\n" for line in lines)


def read_scores(text: str, design: Design) -> list[ScoreRecord]:
    """Parse a scores file, joining version metadata from ``design``."""
    versions = {v.version_id: v for v in design.versions}
    ders: dict[str, DerBreakdown] = {}
    levels: dict[str, dict[str, str]] = {}
    speakers: dict[str, list[SpeakerScore]] = {}
    order: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        kind = parts[0]
        try:
            if kind == "VERSION" and len(parts) == 8:
                vid = parts[1]
                ders[vid] = DerBreakdown(float(parts[3]), float(parts[4]), float(parts[5]), float(parts[6]))
                levels[vid] = parse_tags(parts[7])
                order.append(vid)
            elif kind == "SPEAKER" and len(parts) == 8:
                speakers.setdefault(parts[1], []).append(
                    SpeakerScore(parts[2], float(parts[4]), float(parts[5]), float(parts[6]))
                )
            else:
                raise ScoringError(f"scores line {lineno}: unrecognized record")
        except ValueError as exc:
            raise ScoringError(f"scores line {lineno}: {exc}") from None
    out = []
    for vid in order:
        v = versions.get(vid)
        if v is None:
            raise ScoringError(f"scored version {vid!r} not in design")
        out.append(
            ScoreRecord(
                vid,
                v.structure_id,
                v.pair_id,
                v.version_index,
                ders[vid],
                tuple(speakers.get(vid, ())),
                dict(v.assignment.mapping),
                levels[vid],
            )
        )
    return out
