import itertools
import math

import numpy as np
import pytest
from scipy import stats as sps

from diafactor.scoring import DerBreakdown, ScoreRecord, SpeakerScore
from diafactor.stats import (
    AnalysisError,
    attribution_report,
    bootstrap_median_diff,
    check_crossing,
    exact_p,
    figure_data,
    mann_whitney_u,
    marginal_medians,
    midranks,
    report_tables,
    u_counts,
)


def record(sid, pid, idx, der, levels, f1=(1.0, 1.0)):
    a, b = f"{pid}a", f"{pid}b"
    roles = {"A": a, "B": b} if idx == 1 else {"A": b, "B": a}
    spk = tuple(SpeakerScore(s, f, 1 - f, 0.0) for s, f in zip((a, b), f1))
    return ScoreRecord(f"{sid}__{pid}__v{idx}", sid, pid, idx, DerBreakdown(0, 0, der * 10, 10.0), spk, roles, levels)


def planted(structure_effect, voice_effect, n_struct=6, n_pair=6, noise=0.01, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_struct):
        style = "rapid" if i % 2 else "calm"
        for j in range(n_pair):
            diff = "hard" if j % 2 else "easy"
            base = 0.1 + structure_effect * (style == "rapid") + voice_effect * (diff == "hard")
            for idx in (1, 2):
                levels = {"structure.style": style, "pair.difficulty": diff}
                out.append(record(f"s{i}", f"p{j}", idx, base + noise * rng.standard_normal(), levels))
    return out


def enumerate_u(n1, n2):
    """U distribution by listing every placement of sample 1 among the pooled ranks."""
    n = n1 + n2
    counts = [0] * (n1 * n2 + 1)
    for pos in itertools.combinations(range(1, n + 1), n1):
        counts[sum(pos) - n1 * (n1 + 1) // 2] += 1
    return counts


class TestMannWhitney:
    @pytest.mark.parametrize("n1,n2", [(a, b) for a in range(1, 7) for b in range(1, 7)])
    def test_exact_matches_enumeration(self, n1, n2):
        counts = enumerate_u(n1, n2)
        assert list(u_counts(n1, n2)) == counts
        total = sum(counts)
        for u in range(n1 * n2 + 1):
            want = min(1.0, 2 * min(sum(counts[: u + 1]), sum(counts[u:])) / total)
            assert exact_p(u, n1, n2) == want

    def test_known_value(self):
        r = mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert r.statistic_u == 0 and r.p_two_sided == 0.1 and r.method == "exact"

    def test_identical(self):
        assert mann_whitney_u([2, 2, 2], [2, 2, 2]).p_two_sided == 1.0

    def test_swap_reflects_u(self):
        a, b = [0.3, 1.2, 5.0, 2.2], [0.1, 4.4, 3.3]
        r1, r2 = mann_whitney_u(a, b), mann_whitney_u(b, a)
        assert r1.statistic_u + r2.statistic_u == len(a) * len(b)
        assert r1.p_two_sided == r2.p_two_sided

    @pytest.mark.parametrize("seed", range(20))
    def test_agrees_with_scipy(self, seed):
        rng = np.random.default_rng(seed)
        n1, n2 = rng.integers(2, 9, size=2)
        a, b = rng.normal(size=n1), rng.normal(0.5, size=n2)
        r = mann_whitney_u(a, b)
        ref = sps.mannwhitneyu(a, b, alternative="two-sided", method="exact")
        assert r.statistic_u == ref.statistic
        assert r.p_two_sided == pytest.approx(ref.pvalue, rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_normal_approx_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, 5, 15), rng.integers(1, 6, 12)
        r = mann_whitney_u(a, b)
        ref = sps.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
        assert r.method == "normal_approx"
        assert r.statistic_u == ref.statistic
        assert r.p_two_sided == pytest.approx(ref.pvalue, rel=1e-9)

    def test_midranks(self):
        assert midranks([3, 1, 3, 2]).tolist() == [3.5, 1, 3.5, 2]

    def test_empty(self):
        with pytest.raises(AnalysisError):
            mann_whitney_u([], [1])


class TestBootstrap:
    def test_constant(self):
        assert bootstrap_median_diff([2.0] * 5, [2.0] * 5) == (0.0, 0.0, 0.0)

    def test_shift(self):
        rng = np.random.default_rng(0)
        widths = []
        for n in (50, 800):
            b = rng.normal(size=n)
            d, lo, hi = bootstrap_median_diff(b + 5, b, seed=1)
            assert d == pytest.approx(5.0)
            assert lo <= 5 <= hi
            widths.append(hi - lo)
        assert widths[1] < widths[0]

    def test_seeded(self):
        a, b = [1, 4, 2, 8, 5], [3, 3, 9, 1]
        assert bootstrap_median_diff(a, b, seed=4) == bootstrap_median_diff(a, b, seed=4)

    def test_guards(self):
        with pytest.raises(AnalysisError):
            bootstrap_median_diff([1, 2], [1, 2], n_boot=500)
        with pytest.raises(AnalysisError):
            bootstrap_median_diff([1], [1, 2])


class TestMarginals:
    def test_single_record(self):
        recs = [record("s", "p", 1, 0.3, {"pair.g": "x"}), record("s", "p", 2, 0.3, {"pair.g": "x"})]
        t = marginal_medians(recs, "pair", "pair.g")
        assert t.rows["x"].median == pytest.approx(0.3)
        assert t.rows["x"].count == 1

    def test_median_of_units(self):
        recs = []
        for j, v in enumerate((1.0, 2.0, 3.0)):
            recs += [record("s", f"p{j}", i, v, {"pair.g": "x"}) for i in (1, 2)]
        assert marginal_medians(recs, "pair", "pair.g").rows["x"].median == 2.0

    def test_planted_offset(self):
        delta = 0.2
        t = marginal_medians(planted(0.0, delta), "pair", "pair.difficulty")
        assert t.rows["hard"].median - t.rows["easy"].median == pytest.approx(delta, abs=0.02)
        assert t.separated()
        assert t.gap()[1:] == ("hard", "easy")

    def test_units_and_metrics(self):
        recs = planted(0.1, 0.0)
        t = marginal_medians(recs, "structure", "structure.style")
        assert set(t.rows) == {"calm", "rapid"} and t.rows["calm"].count == 3
        f = marginal_medians(recs, "pair", "pair.difficulty", metric="f1")
        assert all(r.median == pytest.approx(1.0) for r in f.rows.values())
        tags = {f"p{j}{s}": {"gender": "fm"[j % 2]} for j in range(6) for s in "ab"}
        g = marginal_medians(recs, "speaker", "gender", metric="f1", speaker_tags=tags)
        assert g.rows["f"].count == 6

    def test_invariant_to_record_order(self):
        recs = planted(0.1, 0.05, noise=0.05)
        a = marginal_medians(recs, "pair", "pair.difficulty", seed=3)
        b = marginal_medians(recs[::-1], "pair", "pair.difficulty", seed=3)
        assert a.rows == b.rows

    def test_excluded_units(self):
        recs = planted(0.1, 0.0)
        t = marginal_medians(recs, "pair", "pair.missing")
        assert not t.rows and len(t.excluded) == 6

    def test_inconsistent_levels(self):
        recs = [record("s1", "p", 1, 0.1, {"pair.g": "x"}), record("s2", "p", 1, 0.1, {"pair.g": "y"})]
        with pytest.raises(AnalysisError, match="inconsistent"):
            marginal_medians(recs, "pair", "pair.g")

    def test_balance_weights(self):
        # pair unit seen in 3 'a' structures and 1 'b' structure; balancing weights a and b equally
        recs = []
        for i, (grp, v) in enumerate((("a", 0.0), ("a", 0.0), ("a", 0.0), ("b", 1.0))):
            recs += [record(f"s{i}", "p", k, v, {"pair.g": "x", "structure.lang": grp}) for k in (1, 2)]
        plain = marginal_medians(recs, "pair", "pair.g")
        balanced = marginal_medians(recs, "pair", "pair.g", balance="structure.lang")
        assert plain.rows["x"].median == pytest.approx(0.25)
        assert balanced.rows["x"].median == pytest.approx(0.5)

    def test_bad_args(self):
        with pytest.raises(AnalysisError):
            marginal_medians([], "room", "x")
        with pytest.raises(AnalysisError):
            marginal_medians([], "pair", "x", metric="wer")


class TestAttribution:
    def test_structure_only(self):
        rep = attribution_report(planted(0.3, 0.0))
        assert rep.ratio > 5
        assert rep.get("style", "structure").table.separated()

    def test_voice_only(self):
        rep = attribution_report(planted(0.0, 0.3))
        assert rep.ratio < 1
        assert rep.get("difficulty", "voice").table.separated()

    @pytest.mark.parametrize("seed", range(5))
    def test_null(self, seed):
        rep = attribution_report(planted(0.0, 0.0, noise=0.02, seed=seed))
        for a in rep.analyses:
            lo, hi = a.gap_ci
            assert lo <= 0.0 <= hi
            assert not a.table.separated()

    def test_reports_tests_and_tables(self):
        rep = attribution_report(planted(0.3, 0.1))
        a = rep.get("style", "structure")
        ((l1, l2, res, boot),) = a.tests
        assert (l1, l2) == ("calm", "rapid")
        assert res.p_two_sided == 0.1  # 3 calm vs 3 rapid, fully ordered
        assert boot[0] < 0
        text = report_tables(rep)
        assert text.count("\ngap\t") == 2
        assert figure_data(a).splitlines()[1].startswith("calm\t")
        assert "structure/voice ratio" in rep.summary()
        with pytest.raises(KeyError):
            rep.get("style", "voice")

    def test_deterministic(self):
        recs = planted(0.3, 0.1, noise=0.05)
        assert report_tables(attribution_report(recs, seed=2)) == report_tables(attribution_report(recs, seed=2))

    def test_incomplete_crossing(self):
        recs = planted(0.1, 0.1)
        with pytest.raises(AnalysisError, match="s0 x p0 v1"):
            check_crossing(recs[1:])
        with pytest.raises(AnalysisError):
            attribution_report([])

    def test_ratio_edge_cases(self):
        rep = attribution_report(planted(0.0, 0.0, noise=0.0))
        assert math.isnan(rep.ratio)
