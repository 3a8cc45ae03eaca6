import pytest
import torch

from refusal_geometry.inputattack import (
    SuffixAttackConfig,
    attack_loss,
    attack_prompts,
    attack_target,
    exhaustive_suffix,
    insert_suffix,
    late_layers,
    suffix_attack,
)
from refusal_geometry.tensorcore import DTYPE
from refusal_geometry.toytask import ANSWER, CHAT_END, SPECIAL_IDS

PROMPT = [1, 9, 20, 21, 2]
FULL_POOL = 32 - len(SPECIAL_IDS)


def rvec(seed=5, d=16):
    return torch.randn(d, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


class TestHelpers:
    def test_late_layers(self):
        assert late_layers(5) == [3, 4]
        assert late_layers(3) == [2]
        assert late_layers(5, 1.0) == [0, 1, 2, 3, 4]

    def test_insert_before_chat_end(self):
        assert insert_suffix(PROMPT, [30, 31]) == [1, 9, 20, 21, 30, 31, CHAT_END]
        with pytest.raises(ValueError, match="CHAT_END"):
            insert_suffix([1, 9], [30])

    def test_target(self):
        assert attack_target(PROMPT) == [ANSWER, 9]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SuffixAttackConfig(suffix_len=0)
        with pytest.raises(ValueError):
            SuffixAttackConfig(w_dir=-1.0)
        with pytest.raises(ValueError):
            SuffixAttackConfig(allowed=())
        assert SuffixAttackConfig(allowed=(20, 9, 20)).candidates(32) == [9, 20]
        assert len(SuffixAttackConfig().candidates(32)) == FULL_POOL
        with pytest.raises(ValueError):
            SuffixAttackConfig(allowed=(40,)).candidates(32)


class TestLoss:
    def test_pure_ce_when_direction_weight_zero(self, tiny_model):
        cfg = SuffixAttackConfig(w_dir=0.0)
        p = insert_suffix(PROMPT, [30])
        target = [ANSWER, 9]
        logits, _ = tiny_model(torch.tensor([p + target[:-1]]))
        logp = torch.log_softmax(logits[0], -1)
        ce = -(logp[len(p) - 1, ANSWER] + logp[len(p), 9]) / 2
        assert float(attack_loss(tiny_model, p, target, rvec(), cfg)) == pytest.approx(float(ce), abs=1e-12)

    def test_direction_term(self, tiny_model):
        cfg = SuffixAttackConfig(w_ce=0.0, w_dir=1.0)
        r = rvec()
        _, tr = tiny_model(torch.tensor([PROMPT]), trace=True)
        x = tr.resid[2][0, -1]
        cos2 = float((x @ r / (x.norm() * r.norm())) ** 2)
        assert float(attack_loss(tiny_model, PROMPT, [ANSWER], r, cfg)) == pytest.approx(cos2, abs=1e-12)

    def test_direction_scale_invariant(self, tiny_model):
        a = attack_loss(tiny_model, PROMPT, [ANSWER, 9], rvec())
        b = attack_loss(tiny_model, PROMPT, [ANSWER, 9], -3 * rvec())
        assert float(a) == pytest.approx(float(b), abs=1e-12)

    def test_empty_target(self, tiny_model):
        with pytest.raises(ValueError):
            attack_loss(tiny_model, PROMPT, [], rvec())


class TestSearch:
    @pytest.mark.parametrize("length", [1, 2])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_pool_matches_exhaustive(self, tiny_model, length, seed):
        cfg = SuffixAttackConfig(suffix_len=length, top_k=FULL_POOL, seed=seed, w_dir=10.0)
        res = suffix_attack(tiny_model, PROMPT, rvec(seed), cfg)
        best, loss = exhaustive_suffix(tiny_model, PROMPT, rvec(seed), cfg)
        assert res.suffix == best
        assert res.loss == loss

    def test_restricted_vocabulary_matches_exhaustive(self, tiny_model):
        cfg = SuffixAttackConfig(suffix_len=2, top_k=4, allowed=(16, 17, 18, 19))
        res = suffix_attack(tiny_model, PROMPT, rvec(), cfg)
        assert (res.suffix, res.loss) == exhaustive_suffix(tiny_model, PROMPT, rvec(), cfg)

    def test_trace_monotone(self, tiny_model):
        res = suffix_attack(tiny_model, PROMPT, rvec(), SuffixAttackConfig(suffix_len=5, max_iters=8))
        assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
        assert res.loss == res.trace[-1]
        assert len(res.trace) == res.iterations + 1

    def test_no_improvement_stops_early(self, tiny_model):
        cfg = SuffixAttackConfig(suffix_len=1, top_k=FULL_POOL, max_iters=10)
        res = suffix_attack(tiny_model, PROMPT, rvec(), cfg)
        assert res.stopped_early and res.iterations <= 2

    def test_zero_weights_noop(self, tiny_model):
        cfg = SuffixAttackConfig(suffix_len=3, w_ce=0.0, w_dir=0.0)
        res = suffix_attack(tiny_model, PROMPT, rvec(), cfg, init=[20, 21, 22])
        assert res.suffix == [20, 21, 22] and res.stopped_early and res.loss == 0.0

    def test_deterministic(self, tiny_model):
        cfg = SuffixAttackConfig(suffix_len=4, max_iters=4)
        a = suffix_attack(tiny_model, PROMPT, rvec(), cfg)
        b = suffix_attack(tiny_model, PROMPT, rvec(), cfg)
        assert a.to_dict() == b.to_dict()

    def test_overflow(self, tiny_model):
        with pytest.raises(ValueError, match="context"):
            suffix_attack(tiny_model, [1] + [20] * 20 + [2], rvec(), SuffixAttackConfig(suffix_len=12))

    def test_exhaustive_too_large(self, tiny_model):
        with pytest.raises(ValueError, match="too large"):
            exhaustive_suffix(tiny_model, PROMPT, rvec(), SuffixAttackConfig(suffix_len=4))

    def test_init_length(self, tiny_model):
        with pytest.raises(ValueError, match="length"):
            suffix_attack(tiny_model, PROMPT, rvec(), SuffixAttackConfig(suffix_len=2), init=[20])


class TestReport:
    def test_attack_prompts(self, tiny_model, tmp_path):
        cfg = SuffixAttackConfig(suffix_len=2, max_iters=2)
        rep = attack_prompts(tiny_model, [PROMPT, [1, 10, 22, 2]], rvec(), cfg)
        assert len(rep.suffixes) == 2 and len(rep.profile_after) == tiny_model.n_points
        assert 0.0 <= rep.asr_before <= 1.0
        rep.save(tmp_path / "a.json")
        assert (tmp_path / "a.json").read_text().startswith("{")
        with pytest.raises(ValueError):
            attack_prompts(tiny_model, [], rvec(), cfg)
