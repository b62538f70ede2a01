"""Planted-effect factorial experiment with synthetic voices.

Two structures (calm: long turns; rapid: 0.4 s turns against 0.2 s
backchannels) are crossed with two voice pairs (easy: f0 110/220 Hz; hard:
f0 118/126 Hz). Structure difficulty and voice difficulty are planted
independently, so a correct analysis must attribute each to its own factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .annotation import SILENCE, ConversationStructure, Slot
from .audio import SpeakerStream, VoiceSpec, synth_speaker
from .design import Design, SpeakerPair, enumerate_versions
from .diarizer import DiarizerConfig, diarize
from .scoring import ScoreRecord, score_version
from .splicer import RenderedConversation, render
from .stats import AttributionReport, attribution_report

DEMO_VOICE = dict(noise_mix=0.1, jitter=0.02, intonation=0.14)


def calm_structure(n_turns: int = 10, turn: float = 5.0, gap: float = 0.5) -> ConversationStructure:
    slots = []
    for i in range(n_turns):
        if i:
            slots.append(Slot(SILENCE, gap))
        slots.append(Slot("AB"[i % 2], turn))
    return ConversationStructure("calm", tuple(slots), {"style": "calm"})


def rapid_structure(
    total: float = 50.0, turn: float = 0.4, backchannel: float = 0.2, cycles_per_phase: int = 4
) -> ConversationStructure:
    """Short turns answered by backchannels; the floor changes hands every phase."""
    slots: list[Slot] = []
    elapsed = 0.0
    lead, other = "A", "B"
    while elapsed < total - 1e-9:
        for _ in range(cycles_per_phase):
            slots += [Slot(lead, turn), Slot(other, backchannel)]
            elapsed += turn + backchannel
        lead, other = other, lead
    return ConversationStructure("rapid", tuple(slots), {"style": "rapid"})


@dataclass(frozen=True)
class VoiceEntry:
    speaker_id: str
    spec: VoiceSpec
    tags: dict = field(default_factory=dict)


def demo_voices(seed: int = 0) -> list[VoiceEntry]:
    f0s = [("easy1", 110.0, "easy"), ("easy2", 220.0, "easy"), ("hard1", 118.0, "hard"), ("hard2", 126.0, "hard")]
    return [
        VoiceEntry(sid, VoiceSpec(f0, seed=10 * seed + i + 1, **DEMO_VOICE), {"difficulty": level})
        for i, (sid, f0, level) in enumerate(f0s)
    ]


def demo_pairs() -> list[SpeakerPair]:
    return [
        SpeakerPair("easy", ("easy1", "easy2"), {"difficulty": "easy"}),
        SpeakerPair("hard", ("hard1", "hard2"), {"difficulty": "hard"}),
    ]


def demo_streams(seed: int = 0, duration: float = 30.0, sample_rate: int = 8000) -> dict[str, SpeakerStream]:
    return {
        v.speaker_id: synth_speaker(v.spec, duration, sample_rate, v.speaker_id, v.tags)
        for v in demo_voices(seed)
    }


@dataclass
class DemoResult:
    design: Design
    rendered: dict[str, RenderedConversation]
    records: list[ScoreRecord]
    report: AttributionReport


def run_demo(
    seed: int = 0,
    window: float = 1.5,
    hop: float | None = None,
    n_boot: int = 1000,
    taper: float = 0.01,
) -> DemoResult:
    streams = demo_streams(seed)
    design = enumerate_versions([calm_structure(), rapid_structure()], demo_pairs(), streams)
    cfg = DiarizerConfig(window=window, hop=window / 2 if hop is None else hop)
    rendered = {}
    records = []
    for v in design.versions:
        rc = render(v, streams, taper)
        rendered[v.version_id] = rc
        hyp = diarize(rc.audio, rc.reference.support(), cfg)
        records.append(score_version(v, rc.reference, hyp))
    report = attribution_report(records, n_boot=n_boot, seed=seed)
    return DemoResult(design, rendered, records, report)
