"""Speaker-pair x structure x role-assignment enumeration."""

from __future__ import annotations

import bisect
import itertools
import math
import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

from .annotation import SILENCE, ConversationStructure, format_tags, parse_tags, to_ms
from .audio import SpeakerStream


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerPair:
    pair_id: str
    members: tuple[str, ...]
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) != 2 or members[0] == members[1]:
            raise DesignError(f"pair {self.pair_id!r} needs exactly two distinct members, got {members}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "tags", dict(self.tags))


@dataclass(frozen=True)
class RoleAssignment:
    mapping: Mapping[str, str]
    version_index: int

    def __post_init__(self):
        object.__setattr__(self, "mapping", dict(sorted(self.mapping.items())))
        if self.version_index < 1:
            raise DesignError("version_index starts at 1")

    def speaker_for(self, role: str) -> str:
        return self.mapping[role]

    def role_of(self, speaker_id: str) -> str:
        for role, spk in self.mapping.items():
            if spk == speaker_id:
                return role
        raise KeyError(speaker_id)

    def format(self) -> str:
        return ";".join(f"{r}={s}" for r, s in self.mapping.items())


@dataclass(frozen=True)
class ConversationVersion:
    version_id: str
    structure: ConversationStructure
    pair: SpeakerPair
    assignment: RoleAssignment
    factor_levels: Mapping[str, str] = field(default_factory=dict)

    @property
    def structure_id(self) -> str:
        return self.structure.structure_id

    @property
    def pair_id(self) -> str:
        return self.pair.pair_id

    @property
    def version_index(self) -> int:
        return self.assignment.version_index

    def required_audio(self) -> dict[str, float]:
        """Seconds of stream audio each speaker must supply."""
        need = self.structure.role_durations()
        return {self.assignment.mapping[r]: d for r, d in need.items()}


class Skip(NamedTuple):
    structure_id: str
    pair_id: str
    reason: str


@dataclass(frozen=True)
class Design:
    versions: tuple[ConversationVersion, ...] = ()
    skipped: tuple[Skip, ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted(self.versions, key=lambda v: (v.structure_id, v.pair_id, v.version_index)))
        ids = [v.version_id for v in ordered]
        if len(set(ids)) != len(ids):
            raise DesignError("duplicate version ids in design")
        object.__setattr__(self, "versions", ordered)
        object.__setattr__(self, "skipped", tuple(sorted(self.skipped)))

    def __len__(self) -> int:
        return len(self.versions)

    @property
    def factors(self) -> list[str]:
        return sorted({k for v in self.versions for k in v.factor_levels})

    def groups(self) -> dict[tuple[str, str], list[ConversationVersion]]:
        out: dict[tuple[str, str], list[ConversationVersion]] = {}
        for v in self.versions:
            out.setdefault((v.structure_id, v.pair_id), []).append(v)
        return out


def _prefix_needs(structure: ConversationStructure) -> list[int]:
    """needs[k] = max per-role cumulative ms over the first k+1 slots."""
    totals: dict[str, int] = {}
    running = 0
    needs = []
    for role, duration in structure.slots:
        if role != SILENCE:
            totals[role] = totals.get(role, 0) + to_ms(duration)
            running = max(running, totals[role])
        needs.append(running)
    return needs


def _truncate_with(structure: ConversationStructure, needs: list[int], min_available: float) -> ConversationStructure:
    budget = min_available * 1000.0 + 1e-6
    keep = bisect.bisect_right(needs, budget)
    if keep == 0 or needs[keep - 1] == 0:
        return structure.prefix(0)
    return structure.prefix(keep)


def truncate_structure(structure: ConversationStructure, min_available: float) -> ConversationStructure:
    """Longest whole-slot prefix in which no role needs more than ``min_available`` seconds."""
    if min_available <= 0:
        raise DesignError("min_available must be positive")
    return _truncate_with(structure, _prefix_needs(structure), min_available)


def version_id_for(structure_id: str, pair_id: str, version_index: int) -> str:
    return f"{structure_id}__{pair_id}__v{version_index}"


def merged_levels(structure: ConversationStructure, pair: SpeakerPair) -> dict[str, str]:
    levels = {f"structure.{k}": v for k, v in structure.source_tags.items()}
    levels.update({f"pair.{k}": v for k, v in pair.tags.items()})
    return dict(sorted(levels.items()))


def _available(stream: SpeakerStream | float) -> float:
    if isinstance(stream, SpeakerStream):
        return stream.available_duration
    return float(stream)


def enumerate_versions(
    structures: Sequence[ConversationStructure],
    pairs: Sequence[SpeakerPair],
    streams: Mapping[str, SpeakerStream | float],
    max_permutations: int | None = None,
) -> Design:
    """Cross every structure with every pair, one version per role permutation.

    ``streams`` maps speaker ids to streams or bare available durations in
    seconds, so large designs can be enumerated without audio.
    """
    for pair in pairs:
        for member in pair.members:
            if member not in streams:
                raise DesignError(f"unknown speaker {member!r} in pair {pair.pair_id!r}")

    versions: list[ConversationVersion] = []
    skipped: list[Skip] = []
    prepared = [(s, _prefix_needs(s)) for s in structures]
    for pair in pairs:
        min_available = min(_available(streams[m]) for m in pair.members)
        for structure, needs in prepared:
            roles = structure.roles
            if len(roles) != len(pair.members):
                skipped.append(Skip(structure.structure_id, pair.pair_id, f"structure has {len(roles)} roles"))
                continue
            if min_available <= 0:
                skipped.append(Skip(structure.structure_id, pair.pair_id, "speaker has no audio"))
                continue
            truncated = _truncate_with(structure, needs, min_available)
            if len(truncated) == 0:
                skipped.append(Skip(structure.structure_id, pair.pair_id, "insufficient audio"))
                continue
            if truncated.roles != roles:
                skipped.append(Skip(structure.structure_id, pair.pair_id, "truncation removed a role"))
                continue
            levels = merged_levels(structure, pair)
            perms = itertools.permutations(pair.members)
            if max_permutations is not None:
                perms = itertools.islice(perms, max_permutations)
            for index, members in enumerate(perms, start=1):
                assignment = RoleAssignment(dict(zip(roles, members)), index)
                versions.append(
                    ConversationVersion(
                        version_id_for(structure.structure_id, pair.pair_id, index),
                        truncated,
                        pair,
                        assignment,
                        levels,
                    )
                )
    return Design(tuple(versions), tuple(skipped))


def n_role_permutations(n_roles: int) -> int:
    return math.factorial(n_roles)


MANIFEST_COLUMNS = (
    "version_id",
    "structure_id",
    "pair_id",
    "version_index",
    "role_map",
    "truncated_total_sec",
    "factor_levels",
)


def design_manifest(design: Design) -> str:
    lines = ["#" + "\t".join(MANIFEST_COLUMNS)]
    for skip in design.skipped:
        lines.append(f"#skipped\t{skip.structure_id}\t{skip.pair_id}\t{skip.reason}")
    for v in design.versions:
        lines.append(
            "\t".join(
                [
                    v.version_id,
                    v.structure_id,
                    v.pair_id,
                    str(v.version_index),
                    v.assignment.format(),
                    f"{v.structure.total_duration:.3f}",
                    format_tags(v.factor_levels) or "-",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def read_manifest(text: str, structures: Iterable[ConversationStructure]) -> Design:
    """Rebuild a Design from its manifest and the original (untruncated) structures."""
    by_id = {s.structure_id: s for s in structures}
    rows = []
    skipped = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        if raw.startswith("#"):
            parts = raw.split("\t")
            if parts[0] == "#skipped" and len(parts) == 4:
                skipped.append(Skip(parts[1], parts[2], parts[3]))
            continue
        parts = raw.split("\t")
        if len(parts) != len(MANIFEST_COLUMNS):
            raise DesignError(f"manifest line {lineno}: expected {len(MANIFEST_COLUMNS)} fields")
        rows.append((lineno, parts))

    versions = []
    pair_members: dict[str, tuple[str, ...]] = {}
    for _, (vid, sid, pid, index, role_map, _total, _levels) in rows:
        if int(index) == 1:
            mapping = parse_tags(role_map)
            pair_members[pid] = tuple(mapping[r] for r in sorted(mapping))
    for lineno, (vid, sid, pid, index, role_map, total, levels_text) in rows:
        if sid not in by_id:
            raise DesignError(f"manifest line {lineno}: unknown structure {sid!r}")
        mapping = parse_tags(role_map)
        levels = parse_tags(levels_text)
        total_ms = to_ms(float(total))
        original = by_id[sid]
        running = 0
        keep = None
        for k, slot in enumerate(original.slots, start=1):
            running += to_ms(slot.duration)
            if running == total_ms:
                keep = k
                break
        if keep is None:
            raise DesignError(f"manifest line {lineno}: no prefix of {sid!r} totals {total}s")
        members = pair_members.get(pid, tuple(mapping[r] for r in sorted(mapping)))
        pair_tags = {k[len("pair."):]: v for k, v in levels.items() if k.startswith("pair.")}
        pair = SpeakerPair(pid, members, pair_tags)
        versions.append(
            ConversationVersion(vid, original.prefix(keep), pair, RoleAssignment(mapping, int(index)), levels)
        )
    return Design(tuple(versions), tuple(skipped))


def composition_label(levels: Sequence[str]) -> str:
    """'female' for two female speakers, 'mixed' for differing levels."""
    unique = sorted(set(levels))
    return unique[0] if len(unique) == 1 else "mixed"


def sample_pairs(
    speakers: Mapping[str, Mapping[str, str]],
    seed: int,
    by: str | None = None,
    prefix: str = "pair",
) -> list[SpeakerPair]:
    """Seeded uniform re-pairing of speakers.

    Speakers are shuffled and paired consecutively; an odd speaker out is
    dropped. With ``by`` the pair is tagged with the composition of that tag
    (e.g. ``gender=mixed``).
    """
    ids = sorted(speakers)
    rng = random.Random(seed)
    rng.shuffle(ids)
    pairs = []
    for i in range(0, len(ids) - 1, 2):
        a, b = ids[i], ids[i + 1]
        tags = {}
        if by is not None:
            tags[by] = composition_label([speakers[a].get(by, "?"), speakers[b].get(by, "?")])
        pairs.append(SpeakerPair(f"{prefix}{i // 2:04d}", (a, b), tags))
    return pairs
