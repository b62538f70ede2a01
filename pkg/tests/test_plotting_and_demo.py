import pytest

from diafactor.annotation import SILENCE
from diafactor.demo import calm_structure, demo_pairs, demo_voices, rapid_structure, run_demo
from diafactor.plotting import plot_factor, plot_report

PNG = b"\x89PNG\r\n\x1a\n"


def test_calm_structure_shape():
    s = calm_structure()
    speech = [sl for sl in s.slots if sl.role != SILENCE]
    assert len(speech) == 10 and all(sl.duration == 5.0 for sl in speech)
    assert [sl.role for sl in speech] == list("ABABABABAB")
    assert s.role_durations() == {"A": 25.0, "B": 25.0}
    assert s.source_tags == {"style": "calm"}


def test_rapid_structure_shape():
    s = rapid_structure()
    assert {sl.duration for sl in s.slots} == {0.4, 0.2}
    assert s.total_duration == pytest.approx(50.4)
    # phases of four (turn, backchannel) cycles, lead role alternating
    assert [sl.role for sl in s.slots[:10]] == list("ABABABABBA")
    pairs = list(zip(s.slots[::2], s.slots[1::2]))
    assert all(turn.duration == 0.4 and back.duration == 0.2 and turn.role != back.role for turn, back in pairs)


def test_voices_and_pairs():
    voices = {v.speaker_id: v for v in demo_voices(0)}
    assert {k: v.spec.f0 for k, v in voices.items()} == {"easy1": 110, "easy2": 220, "hard1": 118, "hard2": 126}
    assert [p.tags["difficulty"] for p in demo_pairs()] == ["easy", "hard"]
    assert demo_voices(1)[0].spec.seed != demo_voices(0)[0].spec.seed


@pytest.fixture(scope="module")
def demo():
    return run_demo(seed=0)


def test_demo_is_deterministic(demo):
    again = run_demo(seed=0)
    assert [r.der for r in again.records] == [r.der for r in demo.records]
    assert again.report.summary() == demo.report.summary()


def test_figures(tmp_path, demo):
    p = plot_report(demo.report, tmp_path / "r.png")
    assert p.read_bytes()[:8] == PNG
    a = demo.report.get("style", "structure")
    q = plot_factor(a, "der", tmp_path / "f.png")
    assert q.read_bytes()[:8] == PNG
    # fixed metadata: identical bytes on re-render
    assert plot_report(demo.report, tmp_path / "r2.png").read_bytes() == p.read_bytes()
