import csv

import pytest
import torch

from refusal_geometry import evalharness as ev
from refusal_geometry.coneopt import ConeBasis, gram_schmidt, sample_coefficients
from refusal_geometry.model import Intervention, generate_batch
from refusal_geometry.scoring import is_refusal, refusal_propensity
from refusal_geometry.tensorcore import DTYPE
from refusal_geometry.toytask import ANSWER, REFUSAL_TEMPLATE

from conftest import make_tiny_model

PROMPTS = [[1, 9, 20, 2], [1, 21, 10, 22, 2], [1, 11, 2], [1, 23, 24, 2]]


def rvec(seed=2, d=16):
    return torch.randn(d, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


class TestClassify:
    def test_outcomes(self):
        assert ev.classify(list(REFUSAL_TEMPLATE)) == "refused"
        assert ev.classify([ANSWER, 20, 3]) == "complied"
        assert ev.classify([20, 21]) == "degenerate"


class TestReport:
    def test_asr_counts_non_refusals(self, tiny_model):
        rep = ev.asr(tiny_model, PROMPTS)
        assert len(rep.completions) == 4 and all(len(c) == ev.EVAL_TOKENS for c in rep.completions)
        assert rep.asr == sum(not is_refusal(c) for c in rep.completions) / 4
        assert rep.verify_outcomes()

    def test_hand_built_outcomes(self):
        rep = ev.EvalReport("x", "abc", {"kind": "none"}, [[1]] * 4, [[4, 6, 7, 3], [5, 20], [20], [4, 4]],
                            ["refused", "complied", "degenerate", "degenerate"])
        assert rep.asr == 0.75 and rep.degenerate_rate == 0.5

    def test_round_trip(self, tiny_model, tmp_path):
        rep = ev.asr(tiny_model, PROMPTS, Intervention.ablate(rvec()), experiment_id="t")
        rep.side_effect_kl = 0.5
        rep.save(tmp_path / "r.json")
        back = ev.EvalReport.load(tmp_path / "r.json", tiny_model)
        assert back.to_dict() == rep.to_dict()
        assert back.intervention["kind"] == "ablate" and len(back.intervention["direction"]) == 16

    def test_checksum_mismatch(self, tiny_model, tmp_path):
        ev.asr(tiny_model, PROMPTS).save(tmp_path / "r.json")
        with pytest.raises(ev.ChecksumMismatch):
            ev.EvalReport.load(tmp_path / "r.json", make_tiny_model(seed=1))

    def test_schema_version(self):
        with pytest.raises(ValueError, match="schema"):
            ev.EvalReport.from_dict({"schema_version": 99})

    def test_empty(self, tiny_model):
        with pytest.raises(ValueError):
            ev.asr(tiny_model, [])


class TestScaling:
    def test_monotone_helper(self):
        c = ev.ScalingCurve([0, 1, 2, 3], [0.0, 0.5, 0.49, 1.0], [0] * 4)
        assert c.inversions() == [pytest.approx(0.01)]
        assert c.is_monotone()
        assert not ev.ScalingCurve([0, 1, 2], [0.0, 0.5, 0.4], [0] * 3).is_monotone()
        assert not ev.ScalingCurve([0, 1, 2, 3], [0.2, 0.19, 0.5, 0.49], [0] * 4).is_monotone()

    def test_zero_alpha_is_baseline(self, tiny_model):
        curve = ev.refusal_scaling_curve(tiny_model, PROMPTS, rvec(), [0.0, 1.0], layer=1)
        base = ev.asr(tiny_model, PROMPTS)
        assert curve.refusal_fraction[0] == 1 - base.asr
        assert curve.refusal_score[0] == pytest.approx(float(refusal_propensity(tiny_model, PROMPTS).mean()), abs=1e-12)

    def test_grid_validation(self, tiny_model):
        with pytest.raises(ValueError, match="grid"):
            ev.refusal_scaling_curve(tiny_model, PROMPTS, rvec(), [1.0, 0.0], layer=1)
        with pytest.raises(ValueError, match="grid"):
            ev.refusal_scaling_curve(tiny_model, PROMPTS, rvec(), [0.5, 1.0], layer=1)


class TestBestOfN:
    def test_curve_is_cumulative(self):
        b = ev.BestOfN("x", [[False, False], [True, False], [False, False], [False, True]])
        assert b.curve == [0.0, 0.5, 0.5, 1.0]
        assert b.asr == 1.0

    def test_cone_n1_matches_first_sample(self, tiny_model):
        basis = ConeBasis(gram_schmidt(torch.stack([rvec(1), rvec(2)])))
        res = ev.best_of_n(tiny_model, PROMPTS, ev.ConeStrategy(basis, 1), seed=3)
        s = sample_coefficients(2, 1, torch.Generator().manual_seed(3))
        outs = generate_batch(tiny_model, PROMPTS, ev.EVAL_TOKENS, Intervention.ablate((s @ basis.vectors)[0]))
        assert res.success == [[not is_refusal(o[len(p):]) for o, p in zip(outs, PROMPTS)]]

    def test_curves_nondecreasing(self, tiny_model):
        basis = ConeBasis(gram_schmidt(torch.stack([rvec(1), rvec(2)])))
        for strat in (ev.ConeStrategy(basis, 6), ev.TemperatureStrategy(rvec(), 1.0, 6)):
            c = ev.best_of_n(tiny_model, PROMPTS, strat).curve
            assert len(c) == 6 and all(b >= a for a, b in zip(c, c[1:]))

    def test_temperature_reproducible(self, tiny_model):
        s = ev.TemperatureStrategy(rvec(), 1.0, 3)
        assert ev.best_of_n(tiny_model, PROMPTS, s, seed=1).success == ev.best_of_n(tiny_model, PROMPTS, s, seed=1).success

    def test_invalid(self, tiny_model):
        with pytest.raises(ValueError):
            ev.best_of_n(tiny_model, PROMPTS, ev.TemperatureStrategy(rvec(), 1.0, 0))
        with pytest.raises(ValueError):
            ev.best_of_n(tiny_model, PROMPTS, ev.TemperatureStrategy(rvec(), 0.0, 2))


class TestSideEffects:
    def test_zero_for_inert_direction(self):
        m = make_tiny_model()
        with torch.no_grad():
            m.embed.weight[:, 5] = 0
            m.pos.weight[:, 5] = 0
            for b in m.blocks:
                b.out.weight[5] = 0
                b.fc_out.weight[5] = 0
                b.fc_out.bias[5] = 0
        e = torch.zeros(16, dtype=DTYPE)
        e[5] = 1
        assert ev.side_effect_kl(m, e, PROMPTS) == pytest.approx(0.0, abs=1e-14)

    def test_positive_otherwise(self, tiny_model):
        assert ev.side_effect_kl(tiny_model, rvec(), PROMPTS) > 0

    def test_retain_targets_length(self, tiny_model):
        assert [len(t) for t in ev.retain_targets(tiny_model, PROMPTS)] == [ev.RETAIN_TOKENS] * 4


class TestCsv:
    def read(self, path):
        with open(path) as f:
            return list(csv.reader(f))

    def test_scaling(self, tmp_path):
        ev.scaling_csv(ev.ScalingCurve([0.0, 0.5], [0.0, 1 / 3], [-2.0, -1.0]), tmp_path / "s.csv")
        assert self.read(tmp_path / "s.csv") == [["alpha", "refusal_fraction", "refusal_score"],
                                                 ["0", "0", "-2"], ["0.5", "0.3333333333", "-1"]]

    def test_profile_and_best_of_n(self, tmp_path):
        ev.profile_csv({"b": [0.1, 0.2], "a": [0.3, 0.4]}, tmp_path / "p.csv")
        assert self.read(tmp_path / "p.csv")[0] == ["layer", "a", "b"]
        ev.best_of_n_csv([ev.BestOfN("x", [[True]]), ev.BestOfN("y", [[False], [True]])], tmp_path / "b.csv")
        assert self.read(tmp_path / "b.csv") == [["n", "x", "y"], ["1", "1", "0"], ["2", "", "1"]]

    def test_cone_samples(self, tmp_path):
        ev.cone_samples_csv([0.5], [[0.6, 0.8]], tmp_path / "c.csv")
        assert self.read(tmp_path / "c.csv") == [["sample", "asr", "c0", "c1"], ["0", "0.5", "0.6", "0.8"]]
