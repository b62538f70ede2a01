"""File-based pipeline stages. Each stage reads documented formats and writes
its outputs, the expanded config and a run manifest into one directory."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .annotation import (
    AnnotationError,
    emit_rttm,
    extract_structure,
    format_tags,
    parse_rttm,
    parse_tags,
    read_structures,
    write_structures,
)
from .audio import AudioError, SpeakerStream, VoiceSpec, build_stream, energy_vad, read_wav, synth_speaker, write_wav
from .config import config_hash, diarizer_config, dump_config
from .design import Design, DesignError, SpeakerPair, design_manifest, enumerate_versions, read_manifest, sample_pairs
from .diarizer import diarize
from .scoring import mirror_average, read_scores, score_version, subsegment_entropy, write_scores
from .splicer import RenderError, render_design
from .stats import attribution_report, figure_data, report_tables

log = logging.getLogger("diafactor")

MANIFEST_NAME = "run_manifest.json"
CONFIG_NAME = "config.yaml"


class InputError(OSError):
    """Missing or unreadable stage input (exit code 3)."""


class ValidationError(ValueError):
    """Inputs readable but invalid (exit code 2)."""


VALIDATION_ERRORS = (AnnotationError, AudioError, DesignError, RenderError, ValidationError, ValueError)


@dataclass
class StageResult:
    stage: str
    out: Path
    counts: dict = field(default_factory=dict)
    warnings: int = 0
    wall_time: float = 0.0


def _require_dir(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise ValidationError(f"missing required {what} directory")
    p = Path(path)
    if not p.is_dir():
        raise InputError(f"{what} directory not found: {p}")
    return p


def _require_file(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise ValidationError(f"missing required {what} file")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} file not found: {p}")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(result: StageResult, cfg: dict) -> Path:
    out = result.out
    (out / CONFIG_NAME).write_text(dump_config(cfg))
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    digest = config_hash(cfg)
    manifest = {
        "run_id": f"{result.stage}-{digest[:12]}",
        "config_hash": digest,
        "stage": result.stage,
        "counts": result.counts,
        "warnings": result.warnings,
        "outputs": [{"file": str(p.relative_to(out)), "sha256": _sha256(p)} for p in files],
        "wall_time_sec": round(result.wall_time, 3),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def run_stage(stage: str, out: str | Path, cfg: dict, body: Callable[[Path], StageResult]) -> StageResult:
    """Run ``body`` into ``out``; a failed stage leaves no new output directory."""
    out = Path(out)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        result = body(out)
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    result.wall_time = time.perf_counter() - start
    write_run_manifest(result, cfg)
    return result


def _read_tsv_rows(path: Path, min_fields: int) -> list[list[str]]:
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) < min_fields:
            raise ValidationError(f"{path.name} line {lineno}: expected {min_fields} tab-separated fields")
        rows.append(parts)
    return rows


def read_tags_file(path: Path | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    return {row[0]: parse_tags(row[1]) for row in _read_tsv_rows(_require_file(path, "tags"), 2)}


# --- extract -----------------------------------------------------------------


def stage_extract(refs_dir, out, cfg, role_map_file=None, tags_file=None) -> StageResult:
    refs = _require_dir(refs_dir, "reference RTTM")
    role_maps: dict[str, dict[str, str]] | None = None
    if role_map_file is not None:
        role_maps = {}
        for rec, label, role in (r[:3] for r in _read_tsv_rows(_require_file(role_map_file, "role map"), 3)):
            role_maps.setdefault(rec, {})[label] = role
    tags = read_tags_file(tags_file)
    files = sorted(refs.glob("*.rttm"))

    def body(out: Path) -> StageResult:
        res = StageResult("extract", out)
        written = 0
        for f in files:
            try:
                tl = parse_rttm(f.read_text(), recording_id=f.stem)
                if role_maps is None:
                    order = []
                    for seg in tl.segments:
                        if seg.label not in order:
                            order.append(seg.label)
                    role_map = {lab: chr(ord("A") + i) for i, lab in enumerate(order)}
                else:
                    role_map = role_maps.get(f.stem, {})
                structure = extract_structure(
                    tl, role_map, f.stem, tags.get(f.stem, {}), cfg["structure"]["min_gap"]
                )
                if len(structure) == 0:
                    raise AnnotationError("no speech segments")
            except AnnotationError as exc:
                log.warning("skipping %s: %s", f.name, exc)
                res.warnings += 1
                continue
            (out / f"{f.stem}.tsv").write_text(write_structures([structure]))
            written += 1
        res.counts = {"structures": written, "skipped": res.warnings}
        return res

    return run_stage("extract", out, cfg, body)


# --- pool --------------------------------------------------------------------

POOL_INDEX = "pool.tsv"


def write_pool(out: Path, streams: list[SpeakerStream]) -> None:
    lines = ["#speaker_id\tfile\tavailable_sec\ttags"]
    for s in sorted(streams, key=lambda s: s.speaker_id):
        write_wav(out / f"{s.speaker_id}.wav", s.audio)
        lines.append(f"{s.speaker_id}\t{s.speaker_id}.wav\t{s.available_duration:.6f}\t{format_tags(s.tags) or '-'}")
    (out / POOL_INDEX).write_text("\n".join(lines) + "\n")


def read_pool_index(pool_dir) -> list[tuple[str, Path, float, dict[str, str]]]:
    pool = _require_dir(pool_dir, "pool")
    index = _require_file(pool / POOL_INDEX, "pool index")
    return [(r[0], pool / r[1], float(r[2]), parse_tags(r[3])) for r in _read_tsv_rows(index, 4)]


def load_pool(pool_dir, speakers=None) -> dict[str, SpeakerStream]:
    out = {}
    for sid, path, _, tags in read_pool_index(pool_dir):
        if speakers is None or sid in speakers:
            out[sid] = SpeakerStream(sid, read_wav(path), tags)
    return out


def synth_streams_from_spec(spec_file: Path, sample_rate: int) -> list[SpeakerStream]:
    data = yaml.safe_load(spec_file.read_text()) or {}
    sr = int(data.get("sample_rate", sample_rate))
    streams = []
    for i, v in enumerate(data.get("voices", [])):
        try:
            spec = VoiceSpec(
                f0=float(v["f0"]),
                resonance_centers=tuple(v.get("resonance_centers", (500.0, 1500.0))),
                noise_mix=float(v.get("noise_mix", 0.1)),
                jitter=float(v.get("jitter", 0.005)),
                seed=int(v.get("seed", i)),
                intonation=float(v.get("intonation", 0.0)),
            )
            sid = str(v["speaker_id"])
            duration = float(v["duration"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{spec_file.name}: voice {i}: bad or missing field {exc}") from None
        tags = {str(k): str(val) for k, val in (v.get("tags") or {}).items()}
        streams.append(synth_speaker(spec, duration, sr, sid, tags))
    return streams


def stage_pool(out, cfg, audio_dir=None, synth_file=None, tags_file=None) -> StageResult:
    if (audio_dir is None) == (synth_file is None):
        raise ValidationError("pool needs exactly one of --audio or --synth")
    if synth_file is not None:
        spec_file = _require_file(synth_file, "synthetic voice spec")
        sources = None
    else:
        spec_file = None
        sources = sorted(_require_dir(audio_dir, "audio").glob("*.wav"))
    tags = read_tags_file(tags_file)
    vad = cfg["vad"]

    def body(out: Path) -> StageResult:
        res = StageResult("pool", out)
        if spec_file is not None:
            streams = synth_streams_from_spec(spec_file, cfg["sample_rate"])
        else:
            streams = []
            for wav in sources:
                audio = read_wav(wav)
                if audio.sample_rate != cfg["sample_rate"]:
                    raise ValidationError(
                        f"{wav.name}: sample rate {audio.sample_rate} != configured {cfg['sample_rate']}"
                    )
                external = wav.with_suffix(".rttm")
                if external.exists():
                    speech = parse_rttm(external.read_text())
                else:
                    speech = energy_vad(
                        audio, vad["frame"], vad["hop"], vad["threshold_db"], vad["hangover"], vad["floor_db"]
                    )
                streams.append(build_stream(audio, speech, wav.stem, tags.get(wav.stem, {})))
        write_pool(out, streams)
        res.counts = {"speakers": len(streams), "audio_sec": round(sum(s.available_duration for s in streams), 3)}
        return res

    return run_stage("pool", out, cfg, body)


# --- design ------------------------------------------------------------------


def read_structure_dir(path) -> list:
    d = _require_dir(path, "structures")
    out = []
    for f in sorted(d.glob("*.tsv")):
        out.extend(read_structures(f.read_text()))
    return out


def read_pairs_file(path: Path) -> list[SpeakerPair]:
    rows = _read_tsv_rows(_require_file(path, "pairs"), 3)
    return [SpeakerPair(r[0], (r[1], r[2]), parse_tags(r[3]) if len(r) > 3 else {}) for r in rows]


def write_pairs(pairs: list[SpeakerPair]) -> str:
    lines = ["#pair_id\tmember1\tmember2\ttags"]
    lines += [f"{p.pair_id}\t{p.members[0]}\t{p.members[1]}\t{format_tags(p.tags) or '-'}" for p in pairs]
    return "\n".join(lines) + "\n"


def load_design(design_dir) -> tuple[Design, list]:
    d = _require_dir(design_dir, "design")
    structures = read_structures(_require_file(d / "structures.tsv", "design structures").read_text())
    design = read_manifest(_require_file(d / "manifest.tsv", "design manifest").read_text(), structures)
    return design, structures


def stage_design(structures_dir, pool_dir, out, cfg, pairs_file=None) -> StageResult:
    structures = read_structure_dir(structures_dir)
    pool = read_pool_index(pool_dir)
    dcfg = cfg["design"]
    if dcfg["pairing"] == "given":
        pairs = read_pairs_file(pairs_file) if pairs_file else None
        if pairs is None:
            raise ValidationError("pairing 'given' needs --pairs")
    elif dcfg["pairing"] == "seeded-random":
        pairs = sample_pairs({sid: tags for sid, _, _, tags in pool}, cfg["seed"], by=dcfg["pair_by"])
    else:
        raise ValidationError(f"unknown pairing {dcfg['pairing']!r}")
    available = {sid: dur for sid, _, dur, _ in pool}

    def body(out: Path) -> StageResult:
        res = StageResult("design", out)
        design = enumerate_versions(structures, pairs, available, dcfg["max_permutations"])
        (out / "manifest.tsv").write_text(design_manifest(design))
        (out / "structures.tsv").write_text(write_structures(structures))
        (out / "pairs.tsv").write_text(write_pairs(pairs))
        res.warnings = len(design.skipped)
        for skip in design.skipped:
            log.warning("skipped %s x %s: %s", skip.structure_id, skip.pair_id, skip.reason)
        res.counts = {
            "structures": len(structures),
            "pairs": len(pairs),
            "versions": len(design),
            "skipped": len(design.skipped),
        }
        return res

    return run_stage("design", out, cfg, body)


# --- render ------------------------------------------------------------------


def stage_render(design_dir, pool_dir, out, cfg, workers: int = 1) -> StageResult:
    design, _ = load_design(design_dir)
    members = {m for v in design.versions for m in v.pair.members}
    streams = load_pool(pool_dir, members)
    missing = sorted(members - set(streams))
    if missing:
        raise ValidationError(f"pool lacks speakers {missing}")

    def body(out: Path) -> StageResult:
        res = StageResult("render", out)
        files = render_design(design, streams, out, cfg["render"]["taper"], workers)
        lines = ["#version_id\tduration_sec\tn_slots"]
        lines += [f"{f.version_id}\t{f.duration:.6f}\t{f.n_slots}" for f in files]
        (out / "rendered.tsv").write_text("\n".join(lines) + "\n")
        res.counts = {"versions": len(files), "audio_sec": round(sum(f.duration for f in files), 3)}
        return res

    return run_stage("render", out, cfg, body)


# --- diarize -----------------------------------------------------------------


def _diarize_one(args) -> tuple[str, str]:
    wav, rttm, dcfg = args
    audio = read_wav(wav)
    ref = parse_rttm(rttm.read_text(), recording_id=wav.stem)
    hyp = diarize(audio, ref.support(), dcfg)
    return wav.stem, emit_rttm(hyp)


def _pmap(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs, chunksize=4))
    return [fn(j) for j in jobs]


def stage_diarize(rendered_dir, out, cfg, workers: int = 1) -> StageResult:
    rendered = _require_dir(rendered_dir, "rendered")
    dcfg = diarizer_config(cfg)
    jobs = []
    for wav in sorted(rendered.glob("*.wav")):
        rttm = wav.with_suffix(".rttm")
        if not rttm.exists():
            raise ValidationError(f"{wav.name} has no reference RTTM for oracle segmentation")
        jobs.append((wav, rttm, dcfg))

    def body(out: Path) -> StageResult:
        res = StageResult("diarize", out)
        for vid, text in _pmap(_diarize_one, jobs, workers):
            (out / f"{vid}.rttm").write_text(text)
        res.counts = {"hypotheses": len(jobs), "window": dcfg.window, "hop": dcfg.hop}
        return res

    return run_stage("diarize", out, cfg, body)


# --- score -------------------------------------------------------------------


def _score_one(args):
    version, ref_path, hyp_path, scfg = args
    ref = parse_rttm(ref_path.read_text(), recording_id=version.version_id)
    hyp = parse_rttm(hyp_path.read_text(), recording_id=version.version_id)
    rec = score_version(version, ref, hyp, scfg["collar"], scfg["omit_overlap"])
    ent = [(w, subsegment_entropy(ref, w)) for w in scfg["entropy_windows"]]
    return rec, ent


def stage_score(ref_dir, hyp_dir, design_dir, out, cfg, workers: int = 1) -> StageResult:
    refs = _require_dir(ref_dir, "reference")
    hyps = _require_dir(hyp_dir, "hypothesis")
    design, _ = load_design(design_dir)
    scfg = cfg["scoring"]

    def body(out: Path) -> StageResult:
        res = StageResult("score", out)
        jobs = []
        for v in design.versions:
            ref_path, hyp_path = refs / f"{v.version_id}.rttm", hyps / f"{v.version_id}.rttm"
            if not ref_path.exists() or not hyp_path.exists():
                log.warning("skipping %s: missing reference or hypothesis", v.version_id)
                res.warnings += 1
                continue
            jobs.append((v, ref_path, hyp_path, scfg))
        results = _pmap(_score_one, jobs, workers)
        records = [r for r, _ in results]
        (out / "scores.tsv").write_text(write_scores(records))
        lines = ["#version_id\tstructure_id\twindow_sec\tentropy_bits"]
        for rec, ent in sorted(results, key=lambda x: x[0].version_id):
            lines += [f"{rec.version_id}\t{rec.structure_id}\t{w:.3f}\t{e:.6f}" for w, e in ent]
        (out / "entropy.tsv").write_text("\n".join(lines) + "\n")
        res.counts = {"scored": len(records), "skipped": res.warnings}
        return res

    return run_stage("score", out, cfg, body)


# --- analyze -----------------------------------------------------------------


def write_mirror_table(records) -> str:
    lines = ["#structure_id\tpair_id\tkind\tkey\tf1"]
    for m in mirror_average(records):
        lines += [f"{m.structure_id}\t{m.pair_id}\tspeaker\t{k}\t{v:.6f}" for k, v in m.speaker_f1.items()]
        lines += [f"{m.structure_id}\t{m.pair_id}\trole\t{k}\t{v:.6f}" for k, v in m.role_f1.items()]
    return "\n".join(lines) + "\n"


def stage_analyze(scores_file, design_dir, out, cfg) -> StageResult:
    scores = _require_file(scores_file, "scores")
    design, _ = load_design(design_dir)
    records = read_scores(scores.read_text(), design)
    acfg = cfg["analysis"]

    def body(out: Path) -> StageResult:
        from .plotting import plot_factor, plot_report

        res = StageResult("analyze", out)
        report = attribution_report(
            records, acfg["factors"], acfg["metric"], acfg["n_boot"], cfg["seed"]
        )
        (out / "report.tsv").write_text(report_tables(report))
        (out / "summary.txt").write_text(report.summary())
        (out / "mirror_f1.tsv").write_text(write_mirror_table(records))
        for a in report.analyses:
            stem = f"{a.kind}_{a.factor}"
            (out / f"{stem}.tsv").write_text(figure_data(a))
            plot_factor(a, report.metric, out / f"{stem}.png")
        plot_report(report, out / "report.png")
        res.counts = {
            "records": len(records),
            "structure_gap": round(report.structure_gap, 6),
            "voice_gap": round(report.voice_gap, 6),
        }
        res.report = report  # type: ignore[attr-defined]
        return res

    return run_stage("analyze", out, cfg, body)


# --- demo --------------------------------------------------------------------


def stage_demo(out, cfg, workers: int = 1) -> StageResult:
    """Planted-effect experiment end to end, every stage through its files."""
    from .demo import calm_structure, demo_pairs, demo_voices, rapid_structure

    def body(out: Path) -> StageResult:
        res = StageResult("demo", out)
        inputs = out / "inputs"
        (inputs / "structures").mkdir(parents=True, exist_ok=True)
        voices = {
            "sample_rate": cfg["sample_rate"],
            "voices": [
                {
                    "speaker_id": v.speaker_id,
                    "f0": v.spec.f0,
                    "duration": 30.0,
                    "resonance_centers": list(v.spec.resonance_centers),
                    "noise_mix": v.spec.noise_mix,
                    "jitter": v.spec.jitter,
                    "intonation": v.spec.intonation,
                    "seed": v.spec.seed,
                    "tags": v.tags,
                }
                for v in demo_voices(cfg["seed"])
            ],
        }
        (inputs / "voices.yaml").write_text(yaml.safe_dump(voices, sort_keys=True))
        for s in (calm_structure(), rapid_structure()):
            (inputs / "structures" / f"{s.structure_id}.tsv").write_text(write_structures([s]))
        (inputs / "pairs.tsv").write_text(write_pairs(demo_pairs()))

        stage_pool(out / "pool", cfg, synth_file=inputs / "voices.yaml")
        stage_design(inputs / "structures", out / "pool", out / "design", cfg, pairs_file=inputs / "pairs.tsv")
        stage_render(out / "design", out / "pool", out / "rendered", cfg, workers)
        stage_diarize(out / "rendered", out / "hyp", cfg, workers)
        stage_score(out / "rendered", out / "hyp", out / "design", out / "scores", cfg, workers)
        analysis = stage_analyze(out / "scores" / "scores.tsv", out / "design", out / "report", cfg)
        res.counts = analysis.counts
        res.report = analysis.report  # type: ignore[attr-defined]
        return res

    return run_stage("demo", out, cfg, body)
