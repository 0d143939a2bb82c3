import json

import numpy as np
import pytest

from progressnav import diffcore as dc
from progressnav import policy_pretrain as P
from progressnav.datagen import build_sl_dataset
from progressnav.models import ModelConfig, PolicyModel, ProgressModel, Vocab
from progressnav.world import ACTION_TOKENS, WorldSpec, generate_episode, generate_world

TINY = ModelConfig(d=8, n_heads=2, n_blocks=1, d_ff=16, history_len=4, max_pos=64)


@pytest.fixture(scope="module")
def world_and_dataset():
    wld = generate_world(WorldSpec(seed=5, extent=8.0, n_rooms=2, n_landmarks=6))
    eps = [generate_episode(wld, s, n_waypoints=(2, 3)) for s in range(2)]
    tasks = [(wld, ep) for ep in eps]
    return tasks, build_sl_dataset(eps, K=3, config_hash="h", seed=0, H=4)


@pytest.fixture(scope="module")
def prm():
    return ProgressModel.init(TINY, Vocab(), seed=1)


class TestFrozenDecode:
    def test_deterministic(self, world_and_dataset, prm):
        _, ds = world_and_dataset
        s = ds.samples[0]
        a = P.decode_progress_frozen(prm, s)
        b = P.decode_progress_frozen(prm, s)
        assert a.tokens == b.tokens

    def test_no_parameter_mutation(self, world_and_dataset, prm):
        _, ds = world_and_dataset
        before = prm.params.checkpoint_hash()
        for s in ds.samples[:5]:
            P.decode_progress_frozen(prm, s)
        assert prm.params.checkpoint_hash() == before


class TestPolicyCELoss:
    def test_uniform_head_value(self, world_and_dataset):
        """An untrained zero-logit head must price K actions at K ln |A|."""
        _, ds = world_and_dataset
        policy = PolicyModel.init(TINY, Vocab(), seed=0)
        s = ds.samples[0]
        logits = policy.logits_graph(s.features(),
                                     policy.vocab.encode(s.instruction), [])
        # replace head outputs with exact zeros by zeroing the head weights
        policy.params["act_w"].value = np.zeros_like(policy.params["act_w"].value)
        policy.params["act_b"].value = np.zeros_like(policy.params["act_b"].value)
        loss = float(dc.evaluate(P.policy_ce_loss(policy, s, [])))
        assert abs(loss - 3 * np.log(len(ACTION_TOKENS))) < 1e-12

    def test_certain_head_zero(self, world_and_dataset):
        # the final step of any episode is labeled STOP STOP STOP, so a head
        # certain of STOP prices it at zero
        from progressnav.world import ACTION_INDEX
        _, ds = world_and_dataset
        s = next(x for x in ds.samples if set(x.expert_actions) == {"STOP"})
        policy = PolicyModel.init(TINY, Vocab(), seed=0)
        policy.params["act_w"].value = np.zeros_like(policy.params["act_w"].value)
        b = np.full(len(ACTION_TOKENS), -1e3)
        b[ACTION_INDEX["STOP"]] = 1e3
        policy.params["act_b"].value = b
        loss = float(dc.evaluate(P.policy_ce_loss(policy, s, [])))
        assert loss < 1e-9

    def test_batch_mean_decomposes(self, world_and_dataset, prm):
        _, ds = world_and_dataset
        policy = PolicyModel.init(TINY, Vocab(), seed=0)
        batch = ds.samples[:4]
        per = [float(dc.evaluate(P.policy_ce_loss(policy, s, []))) for s in batch]
        acc = None
        for s in batch:
            node = P.policy_ce_loss(policy, s, [])
            acc = node if acc is None else dc.add(acc, node)
        mean = float(dc.evaluate(dc.mul(acc, 1.0 / len(batch))))
        assert abs(mean - np.mean(per)) < 1e-10


class TestTraining:
    def test_loss_decreases_and_prm_frozen(self, world_and_dataset, prm):
        _, ds = world_and_dataset
        before = prm.params.checkpoint_hash()
        cfg = P.Stage2Config(epochs=2, batch_size=8)
        policy, log = P.train_policy(ds, prm, cfg, seed=0, model_config=TINY)
        assert log[-1]["loss"] < log[0]["loss"]
        assert prm.params.checkpoint_hash() == before

    def test_deterministic(self, world_and_dataset, prm):
        _, ds = world_and_dataset
        cfg = P.Stage2Config(epochs=1, batch_size=8)
        a, _ = P.train_policy(ds, prm, cfg, seed=3, model_config=TINY)
        b, _ = P.train_policy(ds, prm, cfg, seed=3, model_config=TINY)
        assert a.params.checkpoint_hash() == b.params.checkpoint_hash()

    def test_accuracy_beats_random(self, world_and_dataset, prm):
        """Per-position argmax accuracy on the training set after a short run
        should clear the 10% uniform-guess rate."""
        _, ds = world_and_dataset
        cfg = P.Stage2Config(epochs=4, batch_size=8, lr=3e-3)
        policy, _ = P.train_policy(ds, prm, cfg, seed=0, model_config=TINY)
        from progressnav.world import ACTION_INDEX
        hits = total = 0
        for s in ds.samples:
            ids = policy.greedy_actions(
                s.features(), policy.vocab.encode(s.instruction),
                P.decode_progress_frozen(prm, s).tokens)
            want = [ACTION_INDEX[a] for a in s.expert_actions]
            hits += sum(int(a == b) for a, b in zip(ids, want))
            total += len(want)
        assert hits / total > 0.10

    def test_dagger_round_grows_data(self, world_and_dataset, prm):
        tasks, ds = world_and_dataset
        cfg = P.Stage2Config(epochs=1, batch_size=8, use_dagger=True,
                             dagger_epsilon=0.5)
        policy, log = P.train_policy(ds, prm, cfg, seed=0, model_config=TINY,
                                     dagger_tasks=tasks, dagger_config_hash="h")
        events = [r for r in log if r.get("event") == "dagger_aggregate"]
        assert len(events) == 1
        assert events[0]["total"] > len(ds.samples)

    def test_log_written(self, world_and_dataset, prm, tmp_path):
        _, ds = world_and_dataset
        p = tmp_path / "log.jsonl"
        P.train_policy(ds, prm, P.Stage2Config(epochs=1, batch_size=16), seed=0,
                       model_config=TINY, log_path=p)
        rec = json.loads(p.read_text().splitlines()[0])
        assert "loss" in rec and "step" in rec

    def test_divergence_guard(self, world_and_dataset, prm):
        _, ds = world_and_dataset
        cfg = P.Stage2Config(epochs=1, batch_size=8, lr=1e6, divergence_limit=5.0)
        with pytest.raises(P.TrainingDiverged):
            P.train_policy(ds, prm, cfg, seed=0, model_config=TINY)
