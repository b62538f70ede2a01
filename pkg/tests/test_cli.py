import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from diafactor.annotation import SILENCE, read_structures
from diafactor.audio import AudioBuffer, write_wav
from diafactor.cli import main

CONFIGS = Path(__file__).parent.parent / "configs"

FISHER_LIKE = """\
SPEAKER fe_001 1 0.00 2.50 <NA> <NA> caller <NA> <NA>
SPEAKER fe_001 1 2.30 1.20 <NA> <NA> callee <NA> <NA>
SPEAKER fe_001 1 4.00 3.00 <NA> <NA> caller <NA> <NA>
SPEAKER fe_001 1 7.05 0.40 <NA> <NA> callee <NA> <NA>
SPEAKER fe_001 1 8.00 2.00 <NA> <NA> callee <NA> <NA>
"""


def rttm(rid, *segs):
    return "".join(f"SPEAKER {rid} 1 {a:.3f} {d:.3f} <NA> <NA> {lab} <NA> <NA>\n" for a, d, lab in segs)


def files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def manifest(d: Path) -> dict:
    m = json.loads((d / "run_manifest.json").read_text())
    m.pop("wall_time_sec")
    return m


@pytest.fixture
def refs(tmp_path):
    d = tmp_path / "refs"
    d.mkdir()
    (d / "fe_001.rttm").write_text(FISHER_LIKE)
    (d / "fe_002.rttm").write_text(rttm("fe_002", (0, 3, "x"), (3.5, 2, "y"), (6, 1, "x")))
    (d / "fe_003.rttm").write_text(rttm("fe_003", (0, 1, "y"), (1, 1, "x"), (2.5, 4, "y")))
    return d


class TestExtract:
    def test_three_recordings(self, refs, tmp_path, capsys):
        out = tmp_path / "structs"
        assert main(["extract", "--refs", str(refs), "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob("fe_*.tsv")) == ["fe_001.tsv", "fe_002.tsv", "fe_003.tsv"]
        (s,) = read_structures((out / "fe_001.tsv").read_text())
        # overlap 2.3-2.5 goes to the later onset; 7.0-7.05 gap is dropped; 7.45-8.0 kept
        assert [(r, d) for r, d in s.slots] == [
            ("A", 2.3), ("B", 1.2), (SILENCE, 0.5), ("A", 3.0), ("B", 0.4), (SILENCE, 0.55), ("B", 2.0)
        ]
        assert "structures=3" in capsys.readouterr().out

    def test_role_map_skip_is_warning(self, refs, tmp_path, capsys, caplog):
        rm = tmp_path / "roles.tsv"
        rm.write_text("fe_001\tcaller\tA\nfe_001\tcallee\tB\nfe_002\tx\tA\nfe_002\ty\tB\n")
        tags = tmp_path / "tags.tsv"
        tags.write_text("fe_001\tlang=en;gender=mixed\n")
        out = tmp_path / "structs"
        code = main(["extract", "--refs", str(refs), "--role-map", str(rm), "--tags", str(tags), "--out", str(out)])
        assert code == 0
        assert sorted(p.name for p in out.glob("fe_*.tsv")) == ["fe_001.tsv", "fe_002.tsv"]
        captured = capsys.readouterr()
        assert "warnings=1" in captured.out
        assert "missing from role map" in caplog.text
        (s,) = read_structures((out / "fe_001.tsv").read_text())
        assert s.source_tags == {"lang": "en", "gender": "mixed"}
        assert manifest(out)["warnings"] == 1


class TestPool:
    def test_audio_dir(self, tmp_path):
        src = tmp_path / "audio"
        src.mkdir()
        sr = 8000
        t = np.arange(sr) / sr
        burst = 0.5 * np.sin(2 * np.pi * 300 * t)
        x = np.concatenate([burst, np.zeros(sr), burst])
        write_wav(src / "s1.wav", AudioBuffer(x, sr))
        write_wav(src / "s2.wav", AudioBuffer(x, sr))
        (src / "s2.rttm").write_text(rttm("s2", (0, 0.5, "speech")))
        tags = tmp_path / "tags.tsv"
        tags.write_text("s1\tgender=f\n")
        out = tmp_path / "pool"
        assert main(["pool", "--audio", str(src), "--tags", str(tags), "--out", str(out)]) == 0
        rows = [line.split("\t") for line in (out / "pool.tsv").read_text().splitlines()[1:]]
        avail = {r[0]: float(r[2]) for r in rows}
        assert 2.0 <= avail["s1"] <= 2.25  # two 1 s bursts plus hangover
        assert avail["s2"] == 0.5
        assert rows[0][3] == "gender=f"

    def test_synth_spec(self, tmp_path):
        spec = tmp_path / "voices.yaml"
        spec.write_text(yaml.safe_dump({"voices": [
            {"speaker_id": "v1", "f0": 120, "duration": 2.0, "seed": 1, "tags": {"g": "m"}},
            {"speaker_id": "v2", "f0": 210, "duration": 2.0, "seed": 2},
        ]}))
        out = tmp_path / "pool"
        assert main(["pool", "--synth", str(spec), "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob("*.wav")) == ["v1.wav", "v2.wav"]

    def test_bad_spec_is_validation_error(self, tmp_path):
        spec = tmp_path / "voices.yaml"
        spec.write_text(yaml.safe_dump({"voices": [{"speaker_id": "v1", "duration": 2.0}]}))
        assert main(["pool", "--synth", str(spec), "--out", str(tmp_path / "pool")]) == 2
        assert not (tmp_path / "pool").exists()


def small_inputs(tmp_path):
    spec = tmp_path / "voices.yaml"
    spec.write_text(yaml.safe_dump({"voices": [
        {"speaker_id": f"v{i}", "f0": f0, "duration": 6.0, "seed": i, "intonation": 0.1, "tags": {"g": g}}
        for i, (f0, g) in enumerate([(110, "m"), (220, "f"), (130, "m"), (200, "f")])
    ]}))
    structs = tmp_path / "structs"
    structs.mkdir()
    (structs / "a.tsv").write_text("a\t0\tA\t2.0\na\t1\tSIL\t0.5\na\t2\tB\t2.0\na\t3\tA\t1.5\n")
    (structs / "b.tsv").write_text("# tags\tb\tstyle=fast\nb\t0\tA\t0.8\nb\t1\tB\t0.8\nb\t2\tA\t0.8\nb\t3\tB\t0.8\n")
    pairs = tmp_path / "pairs.tsv"
    pairs.write_text("p0\tv0\tv1\tmix=yes\np1\tv2\tv3\tmix=yes\n")
    return spec, structs, pairs


def test_staged_pipeline_and_determinism(tmp_path):
    spec, structs, pairs = small_inputs(tmp_path)
    w = tmp_path / "run"
    steps = [
        ["pool", "--synth", str(spec), "--out", f"{w}/pool"],
        ["design", "--structures", str(structs), "--pool", f"{w}/pool", "--pairs", str(pairs), "--out", f"{w}/design"],
        ["render", "--design", f"{w}/design", "--pool", f"{w}/pool", "--out", f"{w}/rendered", "--workers", "2"],
        ["diarize", "--rendered", f"{w}/rendered", "--window", "1.0", "--out", f"{w}/hyp"],
        ["score", "--refs", f"{w}/rendered", "--hyps", f"{w}/hyp", "--design", f"{w}/design", "--out", f"{w}/scores"],
        ["analyze", "--scores", f"{w}/scores/scores.tsv", "--design", f"{w}/design", "--out", f"{w}/report"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    assert len(list((w / "rendered").glob("*.wav"))) == 8
    assert len(list((w / "hyp").glob("*.rttm"))) == 8
    cfg = yaml.safe_load((w / "hyp" / "config.yaml").read_text())
    assert cfg["diarizer"]["window"] == 1.0 and cfg["diarizer"]["hop"] == 0.5
    entropy = (w / "scores" / "entropy.tsv").read_text().splitlines()
    assert len(entropy) == 1 + 8 * 2
    m = manifest(w / "rendered")
    assert m["counts"]["versions"] == 8
    assert {o["file"] for o in m["outputs"]} >= {"rendered.tsv", "config.yaml"}

    # each stage rerun into a fresh directory reproduces its outputs byte for byte
    for argv in steps:
        out_index = argv.index("--out") + 1
        first = Path(argv[out_index])
        again = list(argv)
        again[out_index] = str(first) + "_again"
        assert main(again) == 0
        a, b = files(first), files(Path(again[out_index]))
        a.pop("run_manifest.json"), b.pop("run_manifest.json")
        assert a == b, argv[0]
        assert manifest(first) == manifest(Path(again[out_index]))


def test_seeded_random_pairing(tmp_path):
    spec, structs, _ = small_inputs(tmp_path)
    assert main(["pool", "--synth", str(spec), "--out", f"{tmp_path}/pool"]) == 0
    args = ["design", "--structures", str(structs), "--pool", f"{tmp_path}/pool", "--pair-by", "g"]
    assert main(args + ["--seed", "3", "--out", f"{tmp_path}/d1"]) == 0
    assert main(args + ["--seed", "3", "--out", f"{tmp_path}/d2"]) == 0
    text = (tmp_path / "d1" / "pairs.tsv").read_text()
    assert text == (tmp_path / "d2" / "pairs.tsv").read_text()
    assert text.count("\n") == 3 and "g=" in text


def test_design_needs_pairs(tmp_path):
    spec, structs, _ = small_inputs(tmp_path)
    main(["pool", "--synth", str(spec), "--out", f"{tmp_path}/pool"])
    args = ["design", "--structures", str(structs), "--pool", f"{tmp_path}/pool", "--out", f"{tmp_path}/d"]
    assert main(args) == 2


class TestExitCodes:
    def test_missing_input_dir(self, tmp_path, capsys):
        out = tmp_path / "never"
        assert main(["render", "--design", str(tmp_path / "nope"), "--pool", str(tmp_path), "--out", str(out)]) == 3
        assert not out.exists()
        assert "not found" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["demo", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]) == 3

    def test_bad_config(self, tmp_path):
        c = tmp_path / "c.yaml"
        c.write_text("nonsense: 1\n")
        assert main(["demo", "--config", str(c), "--out", str(tmp_path / "o")]) == 2

    def test_usage(self):
        with pytest.raises(SystemExit) as exc:
            main(["render", "--out", "x"])
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_bad_workers(self, tmp_path):
        assert main(["demo", "--workers", "0", "--out", str(tmp_path / "o")]) == 1

    def test_malformed_rttm_in_score(self, tmp_path):
        spec, structs, pairs = small_inputs(tmp_path)
        w = tmp_path
        main(["pool", "--synth", str(spec), "--out", f"{w}/pool"])
        main(["design", "--structures", str(structs), "--pool", f"{w}/pool", "--pairs", str(pairs),
              "--out", f"{w}/design"])
        hyps = w / "hyps"
        hyps.mkdir()
        refs = w / "refs"
        refs.mkdir()
        (refs / "a__p0__v1.rttm").write_text("SPEAKER a 1 0 1 <NA> <NA> v0 <NA> <NA>\n")
        (hyps / "a__p0__v1.rttm").write_text("SPEAKER broken\n")
        code = main(["score", "--refs", str(refs), "--hyps", str(hyps), "--design", f"{w}/design",
                     "--out", f"{w}/scores"])
        assert code == 2
        assert not (w / "scores").exists()


@pytest.mark.slow
def test_demo_end_to_end(tmp_path, capsys):
    out = tmp_path / "demo"
    assert main(["demo", "--config", str(CONFIGS / "demo.yaml"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "[voice] difficulty" in text and "[structure] style" in text
    report = (out / "report" / "report.tsv").read_text()
    assert "voice\tdifficulty\tpair\teasy" in report and "structure\tstyle\tstructure\tcalm" in report
    for name in ("report.png", "voice_difficulty.png", "structure_style.png"):
        assert (out / "report" / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    m = json.loads((out / "run_manifest.json").read_text())
    assert m["stage"] == "demo" and m["counts"]["records"] == 8


def test_console_script_module_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "diafactor.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "demo" in r.stdout
