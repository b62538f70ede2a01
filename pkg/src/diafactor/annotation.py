"""Timelines, RTTM I/O and conversation structures.

All times are quantized to whole milliseconds on construction so that
equality and interval arithmetic are exact.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import NamedTuple

SILENCE = "SIL"


class AnnotationError(ValueError):
    """Raised for malformed annotation input."""


def to_ms(seconds: float) -> int:
    return int(round(seconds * 1000.0))


def quantize(seconds: float) -> float:
    return to_ms(seconds) / 1000.0


@dataclass(frozen=True, order=True)
class Segment:
    onset: float
    duration: float
    label: str

    def __post_init__(self):
        onset = quantize(self.onset)
        duration = quantize(self.duration)
        if onset < 0:
            raise AnnotationError(f"negative onset {self.onset}")
        if duration <= 0:
            raise AnnotationError(f"non-positive duration {self.duration}")
        if not self.label:
            raise AnnotationError("empty segment label")
        object.__setattr__(self, "onset", onset)
        object.__setattr__(self, "duration", duration)

    @property
    def offset(self) -> float:
        return (self.start_ms + to_ms(self.duration)) / 1000.0

    @property
    def start_ms(self) -> int:
        return to_ms(self.onset)

    @property
    def end_ms(self) -> int:
        return to_ms(self.onset) + to_ms(self.duration)


def merge_intervals(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Union of half-open integer intervals, sorted."""
    out: list[list[int]] = []
    for start, end in sorted(intervals):
        if out and start <= out[-1][1]:
            out[-1][1] = max(out[-1][1], end)
        else:
            out.append([start, end])
    return [(s, e) for s, e in out]


@dataclass(frozen=True)
class Timeline:
    """Speaker-labelled segments of one recording, sorted by (onset, label)."""

    recording_id: str
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted(self.segments, key=lambda s: (s.onset, s.label, s.duration)))
        object.__setattr__(self, "segments", ordered)

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    @property
    def labels(self) -> list[str]:
        return sorted({s.label for s in self.segments})

    def intervals_ms(self, label: str | None = None) -> list[tuple[int, int]]:
        """Merged integer-ms intervals for one label (or all speech)."""
        return merge_intervals(
            (s.start_ms, s.end_ms) for s in self.segments if label is None or s.label == label
        )

    def speech_time(self, label: str | None = None) -> float:
        """Summed segment durations for ``label``, or for all labels."""
        return sum(to_ms(s.duration) for s in self.segments if label is None or s.label == label) / 1000.0

    @property
    def start(self) -> float:
        return min((s.onset for s in self.segments), default=0.0)

    @property
    def end(self) -> float:
        return max((s.offset for s in self.segments), default=0.0)

    @property
    def span(self) -> float:
        return (to_ms(self.end) - to_ms(self.start)) / 1000.0

    def overlap_duration(self) -> float:
        """Time during which two or more distinct labels are active."""
        events: list[tuple[int, int]] = []
        for label in self.labels:
            for start, end in self.intervals_ms(label):
                events.append((start, 1))
                events.append((end, -1))
        events.sort()
        active = 0
        last = 0
        total = 0
        for t, delta in events:
            if active >= 2:
                total += t - last
            active += delta
            last = t
        return total / 1000.0

    @property
    def has_overlap(self) -> bool:
        return self.overlap_duration() > 0

    def support(self, label: str = "speech") -> Timeline:
        """Collapse all labels into merged regions carrying ``label``."""
        return Timeline(
            self.recording_id,
            tuple(Segment(s / 1000.0, (e - s) / 1000.0, label) for s, e in self.intervals_ms()),
        )

    def relabel(self, mapping: Mapping[str, str]) -> Timeline:
        return Timeline(
            self.recording_id,
            tuple(Segment(s.onset, s.duration, mapping.get(s.label, s.label)) for s in self.segments),
        )


def parse_rttm(text: str, recording_id: str | None = None) -> Timeline:
    """Parse RTTM content. Only ``SPEAKER`` records are kept.

    ``recording_id`` overrides the id found in the file (used for empty files).
    """
    segments = []
    file_id = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 9:
            raise AnnotationError(f"line {lineno}: expected at least 9 fields, got {len(parts)}")
        if parts[0] != "SPEAKER":
            continue
        try:
            onset = float(parts[3])
            duration = float(parts[4])
        except ValueError:
            raise AnnotationError(f"line {lineno}: non-numeric onset/duration") from None
        if duration < 0:
            raise AnnotationError(f"line {lineno}: negative duration {duration}")
        if file_id is None:
            file_id = parts[1]
        try:
            segments.append(Segment(onset, duration, parts[7]))
        except AnnotationError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from None
    return Timeline(recording_id or file_id or "", tuple(segments))


def emit_rttm(timeline: Timeline, precision: int = 3) -> str:
    rid = timeline.recording_id or "<NA>"
    lines = [
        f"SPEAKER {rid} 1 {s.onset:.{precision}f} {s.duration:.{precision}f} <NA> <NA> {s.label} <NA> <NA>"
        for s in timeline.segments
    ]
    return "".join(line + "\n" for line in lines)


class Slot(NamedTuple):
    role: str
    duration: float


@dataclass(frozen=True)
class ConversationStructure:
    """Sequential (role, duration) schedule with explicit silences."""

    structure_id: str
    slots: tuple[Slot, ...]
    source_tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        slots = []
        for role, duration in self.slots:
            if not role:
                raise AnnotationError("empty role in structure slot")
            d = quantize(duration)
            if d <= 0:
                raise AnnotationError(f"non-positive slot duration {duration}")
            slots.append(Slot(role, d))
        object.__setattr__(self, "slots", tuple(slots))
        object.__setattr__(self, "source_tags", dict(self.source_tags))

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def roles(self) -> list[str]:
        return sorted({s.role for s in self.slots if s.role != SILENCE})

    @property
    def total_ms(self) -> int:
        return sum(to_ms(s.duration) for s in self.slots)

    @property
    def total_duration(self) -> float:
        return self.total_ms / 1000.0

    def role_durations(self) -> dict[str, float]:
        totals: dict[str, int] = {}
        for role, duration in self.slots:
            if role != SILENCE:
                totals[role] = totals.get(role, 0) + to_ms(duration)
        return {r: v / 1000.0 for r, v in sorted(totals.items())}

    def prefix(self, n: int) -> ConversationStructure:
        return ConversationStructure(self.structure_id, self.slots[:n], self.source_tags)


def extract_structure(
    timeline: Timeline,
    role_map: Mapping[str, str],
    structure_id: str | None = None,
    source_tags: Mapping[str, str] | None = None,
    min_gap: float = 0.1,
) -> ConversationStructure:
    """Turn a speaker-labelled reference into an anonymous role schedule.

    Where two segments overlap, the later-onset one keeps the contested time
    and the earlier one is cut at the later onset. Gaps of at least
    ``min_gap`` seconds become SILENCE slots; shorter gaps are dropped.
    """
    for label in timeline.labels:
        if label not in role_map:
            raise AnnotationError(f"label {label!r} missing from role map")
        if role_map[label] == SILENCE:
            raise AnnotationError(f"label {label!r} mapped to the silence role")

    pieces: list[tuple[int, int, str]] = []
    segs = list(timeline.segments)
    for i, seg in enumerate(segs):
        start, end = seg.start_ms, seg.end_ms
        if i + 1 < len(segs):
            end = min(end, segs[i + 1].start_ms)
        if end > start:
            pieces.append((start, end, role_map[seg.label]))

    gap_ms = to_ms(min_gap)
    slots: list[Slot] = []
    cursor = pieces[0][0] if pieces else 0
    for start, end, role in pieces:
        gap = start - cursor
        if gap > 0 and gap >= gap_ms:
            slots.append(Slot(SILENCE, gap / 1000.0))
        slots.append(Slot(role, (end - start) / 1000.0))
        cursor = end
    return ConversationStructure(
        structure_id or timeline.recording_id, tuple(slots), dict(source_tags or {})
    )


def format_tags(tags: Mapping[str, str]) -> str:
    return ";".join(f"{k}={v}" for k, v in sorted(tags.items()))


def parse_tags(text: str) -> dict[str, str]:
    text = text.strip()
    if not text or text == "-":
        return {}
    tags = {}
    for item in text.split(";"):
        if "=" not in item:
            raise AnnotationError(f"malformed tag {item!r}, expected key=value")
        key, value = item.split("=", 1)
        tags[key.strip()] = value.strip()
    return tags


STRUCTURE_HEADER = "# structure_id\tindex\trole\tduration_sec"


def write_structures(structures: Iterable[ConversationStructure]) -> str:
    """Serialize structures to the tab-separated slot format.

    Source tags travel in ``# tags`` comment lines.
    """
    lines = [STRUCTURE_HEADER]
    for s in structures:
        lines.append(f"# tags\t{s.structure_id}\t{format_tags(s.source_tags) or '-'}")
        for i, (role, duration) in enumerate(s.slots):
            lines.append(f"{s.structure_id}\t{i}\t{role}\t{duration:.3f}")
    return "\n".join(lines) + "\n"


def read_structures(text: str) -> list[ConversationStructure]:
    slots: dict[str, list[tuple[int, Slot]]] = {}
    tags: dict[str, dict[str, str]] = {}
    order: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line.split("\t")
            if parts[0].strip() == "# tags" and len(parts) >= 3:
                tags[parts[1]] = parse_tags(parts[2])
                if parts[1] not in slots:
                    slots[parts[1]] = []
                    order.append(parts[1])
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise AnnotationError(f"line {lineno}: expected 4 tab-separated fields")
        sid, index, role, duration = parts
        try:
            item = (int(index), Slot(role, float(duration)))
        except ValueError:
            raise AnnotationError(f"line {lineno}: bad index or duration") from None
        if sid not in slots:
            slots[sid] = []
            order.append(sid)
        slots[sid].append(item)
    out = []
    for sid in order:
        ordered = [slot for _, slot in sorted(slots[sid])]
        out.append(ConversationStructure(sid, tuple(ordered), tags.get(sid, {})))
    return out
