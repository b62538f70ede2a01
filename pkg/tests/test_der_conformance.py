"""DER agrees with an md-eval-compatible reference scorer.

Fixtures were produced by pyannote.metrics (see fixtures/der_conformance/generate.py).
"""

import csv
import random
import warnings
from pathlib import Path

import pytest

from diafactor.annotation import Segment, Timeline, parse_rttm
from diafactor.scoring import compute_der

FIXTURES = Path(__file__).parent / "fixtures" / "der_conformance"


def expected_rows():
    with open(FIXTURES / "expected.tsv", newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


ROWS = expected_rows()


def test_fixture_set_is_nontrivial():
    assert len(ROWS) >= 80
    omitted = [r for r in ROWS if r["omit_overlap"] == "1"]
    full = {(r["case"], r["collar"]): float(r["total"]) for r in ROWS if r["omit_overlap"] == "0"}
    # some cases must actually contain overlapped reference speech
    assert any(float(r["total"]) < full[(r["case"], r["collar"])] for r in omitted)


@pytest.mark.parametrize("row", ROWS, ids=lambda r: f"{r['case']}-c{r['collar']}-o{r['omit_overlap']}")
def test_matches_reference_scorer(row):
    ref = parse_rttm((FIXTURES / f"{row['case']}.ref.rttm").read_text())
    hyp = parse_rttm((FIXTURES / f"{row['case']}.hyp.rttm").read_text())
    d = compute_der(ref, hyp, collar=float(row["collar"]), omit_overlap=row["omit_overlap"] == "1")
    assert d.missed == pytest.approx(float(row["missed"]), abs=1e-6)
    assert d.false_alarm == pytest.approx(float(row["false_alarm"]), abs=1e-6)
    assert d.confusion == pytest.approx(float(row["confusion"]), abs=1e-6)
    assert d.scored_speech == pytest.approx(float(row["total"]), abs=1e-6)
    expected_der = (float(row["missed"]) + float(row["false_alarm"]) + float(row["confusion"])) / float(row["total"])
    assert d.der == pytest.approx(expected_der, abs=1e-4)


def _disjoint_per_label(rng, labels, n):
    segs, ends = [], {lab: 0 for lab in labels}
    for _ in range(n):
        lab = rng.choice(labels)
        start = ends[lab] + rng.randint(0, 1500)
        dur = rng.randint(20, 2500)
        segs.append(Segment(start / 1000, dur / 1000, lab))
        ends[lab] = start + dur
    return Timeline("x", tuple(segs))


@pytest.mark.parametrize("seed", range(50))
def test_live_cross_check(seed):
    pytest.importorskip("pyannote.metrics")
    from pyannote.core import Annotation
    from pyannote.core import Segment as PSegment
    from pyannote.metrics.diarization import DiarizationErrorRate

    def ann(tl):
        a = Annotation()
        for i, s in enumerate(tl):
            a[PSegment(s.onset, s.offset), i] = s.label
        return a

    rng = random.Random(1000 + seed)
    ref = _disjoint_per_label(rng, "abcd", rng.randint(2, 14))
    hyp = _disjoint_per_label(rng, "uvwxyz"[: rng.randint(1, 6)], rng.randint(1, 14))
    collar = rng.choice([0.0, 0.1, 0.25])
    omit = rng.random() < 0.5
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        theirs = DiarizationErrorRate(collar=2 * collar, skip_overlap=omit)(ann(ref), ann(hyp), detailed=True)
    if theirs["total"] == 0:
        pytest.skip("nothing scored")
    d = compute_der(ref, hyp, collar=collar, omit_overlap=omit)
    assert d.der == pytest.approx(theirs["diarization error rate"], abs=1e-4)
