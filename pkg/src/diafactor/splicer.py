"""Render conversation versions by splicing speaker streams into slots."""

from __future__ import annotations

from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import SILENCE, Segment, Timeline, emit_rttm, to_ms
from .audio import AudioBuffer, SpeakerStream, write_wav
from .design import ConversationVersion, Design


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RenderedConversation:
    version_id: str
    audio: AudioBuffer
    reference: Timeline
    consumed: Mapping[str, float]


def taper_envelope(n: int, taper_samples: int) -> np.ndarray:
    """Linear fade-in over the first and fade-out over the last ``taper_samples``."""
    env = np.ones(n)
    k = min(taper_samples, n)
    if k > 0:
        ramp = np.arange(k) / taper_samples
        env[:k] = np.minimum(env[:k], ramp)
        env[n - k :] = np.minimum(env[n - k :], ramp[::-1])
    return env


def render(
    version: ConversationVersion,
    streams: Mapping[str, SpeakerStream],
    taper: float = 0.01,
) -> RenderedConversation:
    """Fill each speech slot with the next unread span of its speaker's stream.

    Read cursors start at zero for every version, so mirror versions draw on
    the same stream material.
    """
    if taper < 0:
        raise RenderError("taper must be non-negative")
    structure = version.structure
    speech_ms = [to_ms(d) for r, d in structure.slots if r != SILENCE]
    if speech_ms and to_ms(2 * taper) > min(speech_ms):
        raise RenderError(f"taper {taper}s exceeds half the shortest speech slot")

    members = version.pair.members
    rates = {streams[m].sample_rate for m in members}
    if len(rates) != 1:
        raise RenderError(f"streams for {version.version_id} have mixed sample rates {sorted(rates)}")
    sr = rates.pop()
    need = version.required_audio()
    for spk, seconds in need.items():
        if seconds > streams[spk].available_duration + 1e-9:
            raise RenderError(
                f"{version.version_id}: speaker {spk} needs {seconds:.3f}s, "
                f"has {streams[spk].available_duration:.3f}s"
            )

    total = int(round(structure.total_ms * sr / 1000))
    out = np.zeros(total)
    cursors = {m: 0 for m in members}
    taper_n = int(round(taper * sr))
    segments = []
    elapsed_ms = 0
    for role, duration in structure.slots:
        start_ms = elapsed_ms
        elapsed_ms += to_ms(duration)
        if role == SILENCE:
            continue
        spk = version.assignment.speaker_for(role)
        a = int(round(start_ms * sr / 1000))
        b = int(round(elapsed_ms * sr / 1000))
        n = b - a
        src = streams[spk].audio.samples
        cur = cursors[spk]
        chunk = src[cur : cur + n]
        if chunk.size < n:
            # ms-to-sample rounding can leave a slot a few samples short
            if n - chunk.size > len(structure.slots):
                raise RenderError(f"{version.version_id}: stream {spk} exhausted")
            chunk = np.concatenate([chunk, np.zeros(n - chunk.size)])
        out[a:b] = chunk * taper_envelope(n, taper_n)
        cursors[spk] = cur + n
        segments.append(Segment(start_ms / 1000.0, (elapsed_ms - start_ms) / 1000.0, spk))

    reference = Timeline(version.version_id, tuple(segments))
    consumed = {m: cursors[m] / sr for m in members}
    return RenderedConversation(version.version_id, AudioBuffer(out, sr), reference, consumed)


def _render_to_disk(args) -> tuple[str, float, int]:
    version, streams, output_dir, taper = args
    rc = render(version, streams, taper)
    write_wav(output_dir / f"{rc.version_id}.wav", rc.audio)
    (output_dir / f"{rc.version_id}.rttm").write_text(emit_rttm(rc.reference))
    return rc.version_id, rc.audio.duration, len(version.structure.slots)


@dataclass(frozen=True)
class RenderedFile:
    version_id: str
    wav: Path
    rttm: Path
    duration: float
    n_slots: int


def render_design(
    design: Design,
    streams: Mapping[str, SpeakerStream],
    output_dir: str | Path,
    taper: float = 0.01,
    workers: int = 1,
) -> list[RenderedFile]:
    """Write ``<version_id>.wav`` and ``<version_id>.rttm`` for every version."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for v in design.versions:
        needed = {m: streams[m] for m in v.pair.members}
        jobs.append((v, needed, output_dir, taper))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_render_to_disk, jobs, chunksize=8))
    else:
        results = [_render_to_disk(job) for job in jobs]
    return [
        RenderedFile(vid, output_dir / f"{vid}.wav", output_dir / f"{vid}.rttm", dur, n)
        for vid, dur, n in results
    ]
