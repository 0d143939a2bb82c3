import numpy as np
import pytest

from progressnav import diffcore as dc
from progressnav.models import (
    ModelConfig, ParamSet, PolicyModel, ProgressModel, Vocab,
)
from progressnav.world import ACTION_TOKENS, FEATURE_DIM, INSTR_WORDS

TINY = ModelConfig(d=8, n_heads=2, n_blocks=1, d_ff=16, history_len=2, max_pos=48)


@pytest.fixture(scope="module")
def vocab():
    return Vocab()


@pytest.fixture(scope="module")
def prm(vocab):
    return ProgressModel.init(TINY, vocab, seed=0)


@pytest.fixture(scope="module")
def policy(vocab):
    return PolicyModel.init(TINY, vocab, seed=0)


def feats(rng, rows=3):
    return rng.normal(0, 0.5, (rows, FEATURE_DIM))


class TestVocab:
    def test_covers_instruction_words(self, vocab):
        assert vocab.size == len(INSTR_WORDS) + 2
        ids = vocab.encode(["GO", "TO", "THE", "DOOR"])
        assert vocab.decode(ids) == ["GO", "TO", "THE", "DOOR"]

    def test_special_ids_distinct(self, vocab):
        assert vocab.eos_id != vocab.pad_id
        assert vocab.eos_id < vocab.size and vocab.pad_id < vocab.size


class TestProgressModel:
    def test_teacher_logits_shape(self, prm):
        rng = np.random.default_rng(0)
        ids = [0, 3, 5]
        logits = dc.evaluate(prm.teacher_logits_graph(feats(rng), ids))
        assert logits.shape == (3, prm.vocab.size)

    def test_sequence_logprob_negative(self, prm):
        rng = np.random.default_rng(1)
        lp = float(dc.evaluate(prm.sequence_logprob_graph(feats(rng), [1, 2])))
        assert lp < 0.0

    def test_greedy_decode_deterministic(self, prm):
        rng = np.random.default_rng(2)
        f = feats(rng)
        a = prm.decode(f, mode="greedy", max_len=6)
        b = prm.decode(f, mode="greedy", max_len=6)
        assert a.tokens == b.tokens
        assert np.array_equal(a.logprobs, b.logprobs)

    def test_sample_decode_seeded(self, prm):
        rng = np.random.default_rng(3)
        f = feats(rng)
        a = prm.decode(f, mode="sample", rng=np.random.default_rng(7), max_len=6)
        b = prm.decode(f, mode="sample", rng=np.random.default_rng(7), max_len=6)
        assert a.tokens == b.tokens

    def test_sample_requires_rng(self, prm):
        with pytest.raises(ValueError):
            prm.decode(np.zeros((2, FEATURE_DIM)), mode="sample")

    def test_decode_respects_cap(self, prm):
        f = np.random.default_rng(4).normal(size=(2, FEATURE_DIM))
        seq = prm.decode(f, mode="greedy", max_len=3)
        assert len(seq.tokens) <= 3
        # the EOS (possibly forced) term is always scored
        assert len(seq.logprobs) == len(seq.tokens) + 1
        assert seq.total_logprob <= 0.0

    def test_decode_logprob_matches_graph(self, prm):
        """Greedy decode that ends in a natural EOS scores exactly what the
        sequence log-prob graph assigns, which the finetuning ratios rely on."""
        rng = np.random.default_rng(5)
        f = feats(rng)
        seq = prm.decode(f, mode="greedy")
        graph_lp = float(dc.evaluate(prm.sequence_logprob_graph(f, seq.tokens)))
        assert abs(graph_lp - seq.total_logprob) < 1e-9

    def test_instruction_too_long_raises(self, prm):
        with pytest.raises(ValueError, match="capacity"):
            prm.teacher_logits_graph(np.zeros((2, FEATURE_DIM)), [0] * 100)


class TestPolicyModel:
    def test_distributions_normalized(self, policy):
        rng = np.random.default_rng(6)
        d = policy.distributions(feats(rng), [0, 1], [2, 3])
        assert d.shape == (TINY.k_actions, len(ACTION_TOKENS))
        assert np.allclose(d.sum(axis=-1), 1.0, atol=1e-12)

    def test_empty_progress_segment_ok(self, policy):
        rng = np.random.default_rng(7)
        ids = policy.greedy_actions(feats(rng), [0, 1], [])
        assert len(ids) == TINY.k_actions

    def test_logprob_is_sum_of_head_logs(self, policy):
        rng = np.random.default_rng(8)
        f = feats(rng)
        d = policy.distributions(f, [0, 1], [2])
        acts = [1, 4, 9]
        lp = float(dc.evaluate(policy.logprob_graph(f, [0, 1], [2], acts)))
        want = sum(np.log(d[j, a]) for j, a in enumerate(acts))
        assert abs(lp - want) < 1e-9

    def test_wrong_action_arity_raises(self, policy):
        with pytest.raises(ValueError, match="actions"):
            policy.logprob_graph(np.zeros((2, FEATURE_DIM)), [0], [], [1, 2])

    def test_sample_actions_seeded(self, policy):
        rng = np.random.default_rng(9)
        f = feats(rng)
        a1, lp1 = policy.sample_actions(f, [0], [1], np.random.default_rng(3))
        a2, lp2 = policy.sample_actions(f, [0], [1], np.random.default_rng(3))
        assert a1 == a2 and lp1 == lp2
        assert lp1 < 0.0

    def test_input_capacity_enforced(self, policy):
        with pytest.raises(ValueError, match="capacity"):
            policy.logits_graph(np.zeros((40, FEATURE_DIM)), [0] * 10, [0] * 10)


class TestCheckpoints:
    def test_roundtrip_bytes_exact(self, prm):
        blob = prm.params.to_bytes()
        back = ParamSet.from_bytes(blob)
        assert back.to_bytes() == blob
        assert back.checkpoint_hash() == prm.params.checkpoint_hash()

    def test_roundtrip_values(self, policy, tmp_path):
        p = tmp_path / "m.ckpt"
        policy.params.save(p)
        back = ParamSet.load(p)
        for name in policy.params.names():
            assert np.array_equal(back[name].value, policy.params[name].value)
        again = PolicyModel.from_paramset(back)
        assert again.config.d == TINY.d

    def test_init_deterministic(self, vocab):
        a = ProgressModel.init(TINY, vocab, seed=11)
        b = ProgressModel.init(TINY, vocab, seed=11)
        assert a.params.checkpoint_hash() == b.params.checkpoint_hash()
        c = ProgressModel.init(TINY, vocab, seed=12)
        assert c.params.checkpoint_hash() != a.params.checkpoint_hash()

    def test_corrupt_magic_rejected(self, prm, tmp_path):
        p = tmp_path / "bad.ckpt"
        blob = bytearray(prm.params.to_bytes())
        blob[0] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(ValueError):
            ParamSet.load(p)


def test_policy_gradcheck_subset():
    # resample until the instance clears the nonsmooth-point guard
    for seed in range(10, 20):
        rng = np.random.default_rng(seed)
        policy = PolicyModel.init(TINY, Vocab(), seed=seed)
        expr = dc.neg(policy.logprob_graph(feats(rng), [0, 2], [1], [0, 5, 9]))
        binds = {policy.params[n]: policy.params[n].value
                 for n in ("act_w", "act_b", "query")}
        rep = dc.grad_check(expr, binds)
        if not rep.kink_skipped:
            break
    assert not rep.kink_skipped
    assert all(c.passed for c in rep.checks)


def test_prm_gradcheck_subset():
    rng = np.random.default_rng(11)
    prm = ProgressModel.init(TINY, Vocab(), seed=4)
    expr = dc.neg(prm.sequence_logprob_graph(feats(rng), [3, 1]))
    binds = {prm.params[n]: prm.params[n].value for n in ("out_w", "out_b")}
    rep = dc.grad_check(expr, binds)
    assert not rep.kink_skipped
    assert all(c.passed for c in rep.checks)
