"""Subsegment-embedding + agglomerative clustering diarizer.

Oracle speech regions are windowed into subsegments, each subsegment is
embedded as band log-energy statistics, and the embeddings are clustered
with average-linkage AHC on cosine similarity.
"""

from __future__ import annotations

import bisect
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from .annotation import Segment, Timeline, to_ms
from .audio import AudioBuffer

AUTO = "auto"


class DiarizerError(ValueError):
    pass


@dataclass(frozen=True)
class DiarizerConfig:
    window: float = 1.5
    hop: float = 0.75
    frame: float = 0.025
    frame_hop: float = 0.010
    n_bands: int = 20
    n_clusters: Union[int, str] = 2
    linkage: str = "average"
    stop_threshold: float = 0.0

    def __post_init__(self):
        if not 0 < self.hop <= self.window:
            raise DiarizerError("need 0 < hop <= window")
        if self.n_bands < 4:
            raise DiarizerError("n_bands must be at least 4")
        if self.linkage != "average":
            raise DiarizerError(f"unsupported linkage {self.linkage!r}")
        if self.n_clusters != AUTO and (not isinstance(self.n_clusters, int) or self.n_clusters < 1):
            raise DiarizerError(f"n_clusters must be a positive integer or {AUTO!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Subsegment:
    onset: float
    duration: float
    embedding: np.ndarray

    @property
    def center(self) -> float:
        return self.onset + self.duration / 2


def mel_filterbank(n_bands: int, n_fft: int, sample_rate: int, fmin: float = 50.0) -> np.ndarray:
    """Triangular mel filters, shape (n_bands, n_fft // 2 + 1)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(sample_rate / 2), n_bands + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    bank = np.zeros((n_bands, freqs.size))
    for i in range(n_bands):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[i] = np.maximum(0.0, np.minimum(up, down))
    return bank


def band_log_energies(audio: AudioBuffer, cfg: DiarizerConfig) -> np.ndarray:
    """Per-frame band log energies, shape (n_frames, n_bands)."""
    sr = audio.sample_rate
    flen = int(round(cfg.frame * sr))
    fhop = int(round(cfg.frame_hop * sr))
    x = audio.samples
    if x.size < flen:
        return np.empty((0, cfg.n_bands))
    n = 1 + (x.size - flen) // fhop
    n_fft = 1 << (flen - 1).bit_length()
    idx = np.arange(flen)[None, :] + fhop * np.arange(n)[:, None]
    frames = x[idx] * np.hamming(flen)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    bank = mel_filterbank(cfg.n_bands, n_fft, sr)
    return np.log(power @ bank.T + 1e-10)


def window_placements(start_ms: int, end_ms: int, window_ms: int, hop_ms: int) -> list[tuple[int, int]]:
    """Sliding windows over one region; a trailing short window is kept if at least half a window."""
    out = []
    onset = start_ms
    while onset + window_ms <= end_ms:
        out.append((onset, onset + window_ms))
        onset += hop_ms
    covered = out[-1][1] if out else start_ms
    if covered < end_ms and end_ms - onset >= window_ms / 2:
        out.append((onset, end_ms))
    return out


def extract_subsegments(audio: AudioBuffer, speech: Timeline, cfg: DiarizerConfig) -> list[Subsegment]:
    regions = speech.intervals_ms()
    if not regions:
        return []
    if regions[-1][1] > to_ms(audio.duration) + 1:
        raise DiarizerError("speech timeline extends past the end of the audio")
    feats = band_log_energies(audio, cfg)
    fhop_ms = cfg.frame_hop * 1000.0
    flen_ms = cfg.frame * 1000.0
    speech_frames = []
    placements = []
    for start, end in regions:
        placements.extend(window_placements(start, end, to_ms(cfg.window), to_ms(cfg.hop)))
    if not placements:
        return []

    frame_starts = np.arange(feats.shape[0]) * fhop_ms
    for start, end in regions:
        speech_frames.append((frame_starts >= start) & (frame_starts + flen_ms <= end))
    in_speech = np.any(speech_frames, axis=0) if speech_frames else np.zeros(0, bool)
    # per-recording band normalization over speech frames
    if in_speech.any():
        feats = feats - feats[in_speech].mean(axis=0)

    stats = []
    for start, end in placements:
        sel = (frame_starts >= start) & (frame_starts + flen_ms <= end)
        if not sel.any():
            # window shorter than one frame: use the frame nearest its center
            sel = np.zeros(feats.shape[0], bool)
            sel[min(int(((start + end) / 2) // fhop_ms), feats.shape[0] - 1)] = True
        block = feats[sel]
        stats.append(np.concatenate([block.mean(axis=0), block.std(axis=0)]))
    emb = np.array(stats)
    if emb.shape[0] > 1:
        emb = emb - emb.mean(axis=0)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.where(norms > 0, emb / np.where(norms > 0, norms, 1.0), 1.0 / np.sqrt(emb.shape[1]))
    return [
        Subsegment(s / 1000.0, (e - s) / 1000.0, vec)
        for (s, e), vec in zip(placements, emb)
    ]


def _contiguous(labels: Sequence[int]) -> np.ndarray:
    remap: dict[int, int] = {}
    return np.array([remap.setdefault(int(x), len(remap)) for x in labels], dtype=int)


def ahc_cluster(subs: Sequence[Subsegment], cfg: DiarizerConfig) -> np.ndarray:
    """Average-linkage clustering on cosine similarity; labels numbered by first appearance."""
    if not subs:
        raise DiarizerError("ahc_cluster needs at least one subsegment")
    n = len(subs)
    if cfg.n_clusters != AUTO and cfg.n_clusters > n:
        raise DiarizerError(f"n_clusters={cfg.n_clusters} exceeds {n} subsegments")
    if n == 1:
        return np.zeros(1, dtype=int)
    x = np.stack([s.embedding for s in subs])
    dist = np.clip(pdist(x, metric="cosine"), 0.0, 2.0)
    tree = linkage(dist, method=cfg.linkage)
    if cfg.n_clusters == AUTO:
        raw = fcluster(tree, t=1.0 - cfg.stop_threshold, criterion="distance")
    else:
        raw = fcluster(tree, t=cfg.n_clusters, criterion="maxclust")
    return _contiguous(raw)


def labels_to_timeline(
    subs: Sequence[Subsegment], labels: Sequence[int], speech: Timeline, prefix: str = "spk"
) -> Timeline:
    """Assign every oracle-speech instant the majority label of the subsegments covering it.

    Ties go to the covering subsegment with the nearest center; uncovered
    instants take the label of the nearest subsegment overall.
    """
    if len(subs) != len(labels):
        raise DiarizerError("labels do not align with subsegments")
    order = sorted(range(len(subs)), key=lambda i: (to_ms(subs[i].onset), i))
    onsets = [to_ms(subs[i].onset) for i in order]
    ends = [to_ms(subs[i].onset) + to_ms(subs[i].duration) for i in order]
    centers = [(onsets[k] + ends[k]) / 2 for k in range(len(order))]
    labs = [int(labels[i]) for i in order]
    max_len = max((e - s for s, e in zip(onsets, ends)), default=0)
    by_center = sorted(range(len(order)), key=lambda k: centers[k])
    sorted_centers = [centers[k] for k in by_center]

    def nearest(pos: float, candidates) -> int:
        return min(candidates, key=lambda k: (abs(centers[k] - pos), k))

    def label_at(pos: float) -> int:
        if not order:
            return 0
        lo = bisect.bisect_right(onsets, pos - max_len)
        hi = bisect.bisect_right(onsets, pos)
        covering = [k for k in range(lo, hi) if onsets[k] <= pos < ends[k]]
        if not covering:
            j = bisect.bisect_left(sorted_centers, pos)
            near = [by_center[i] for i in (j - 1, j) if 0 <= i < len(by_center)]
            return labs[nearest(pos, near)]
        counts: dict[int, int] = {}
        for k in covering:
            counts[labs[k]] = counts.get(labs[k], 0) + 1
        best = max(counts.values())
        top = [k for k in covering if counts[labs[k]] == best]
        return labs[nearest(pos, top)]

    segments = []
    for start, end in speech.intervals_ms():
        cuts = {start, end}
        lo = bisect.bisect_left(onsets, start - max_len)
        hi = bisect.bisect_right(onsets, end)
        local = list(range(lo, hi))
        for k in local:
            for b in (onsets[k], ends[k]):
                if start < b < end:
                    cuts.add(b)
        local_by_center = sorted(local, key=lambda k: centers[k])
        for i, k in enumerate(local_by_center):
            for m in local_by_center[i + 1 :]:
                if centers[m] - centers[k] > 2 * max_len:
                    break
                mid = int(round((centers[k] + centers[m]) / 2))
                if start < mid < end:
                    cuts.add(mid)
        points = sorted(cuts)
        run_start, run_label = None, None
        for a, b in zip(points, points[1:]):
            lab = label_at((a + b) / 2)
            if lab != run_label:
                if run_label is not None:
                    segments.append(Segment(run_start / 1000.0, (a - run_start) / 1000.0, f"{prefix}{run_label}"))
                run_start, run_label = a, lab
        if run_label is not None:
            segments.append(Segment(run_start / 1000.0, (end - run_start) / 1000.0, f"{prefix}{run_label}"))
    return Timeline(speech.recording_id, tuple(segments))


def diarize(audio: AudioBuffer, speech: Timeline, cfg: DiarizerConfig | None = None) -> Timeline:
    """Full toy pipeline under oracle speech segmentation."""
    cfg = cfg or DiarizerConfig()
    subs = extract_subsegments(audio, speech, cfg)
    if not subs:
        return speech.support("spk0")
    if cfg.n_clusters != AUTO and cfg.n_clusters > len(subs):
        cfg = DiarizerConfig(**{**cfg.to_dict(), "n_clusters": len(subs)})
    labels = ahc_cluster(subs, cfg)
    return labels_to_timeline(subs, labels, speech)
