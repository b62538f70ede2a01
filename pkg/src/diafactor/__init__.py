"""Factorial attribution of speaker diarization errors to conversational
structure versus speaker voice characteristics."""

from .annotation import ConversationStructure, Segment, Slot, Timeline, emit_rttm, extract_structure, parse_rttm
from .audio import AudioBuffer, SpeakerStream, VoiceSpec, energy_vad, synth_speaker
from .design import ConversationVersion, Design, SpeakerPair, enumerate_versions
from .diarizer import DiarizerConfig, diarize
from .scoring import compute_der, mirror_average, optimal_mapping, per_speaker_f1, score_version, subsegment_entropy
from .splicer import render
from .stats import attribution_report, bootstrap_median_diff, mann_whitney_u, marginal_medians

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "ConversationStructure",
    "ConversationVersion",
    "Design",
    "DiarizerConfig",
    "Segment",
    "Slot",
    "SpeakerPair",
    "SpeakerStream",
    "Timeline",
    "VoiceSpec",
    "attribution_report",
    "bootstrap_median_diff",
    "compute_der",
    "diarize",
    "emit_rttm",
    "energy_vad",
    "enumerate_versions",
    "extract_structure",
    "mann_whitney_u",
    "marginal_medians",
    "mirror_average",
    "optimal_mapping",
    "parse_rttm",
    "per_speaker_f1",
    "render",
    "score_version",
    "subsegment_entropy",
    "synth_speaker",
]
