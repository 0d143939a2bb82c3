"""Stage 2: progress-guided policy pretraining.

The progress reasoner is frozen; its greedy decode conditions the policy,
which is trained with K-step cross-entropy against expert actions, optionally
followed by one DAgger aggregation round.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .datagen import DatasetFile, StepSample, aggregate, dagger_collect
from .models import ModelConfig, PolicyModel, ProgressModel, TokenSeq, Vocab
from .optim import Adam
from .sapp import TrainingDiverged
from .serial import canonical_json
from .world import ACTION_INDEX


@dataclass
class Stage2Config:
    k_actions: int = 3
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 16
    use_dagger: bool = False
    dagger_epsilon: float = 0.1
    divergence_limit: float = 1e6


def decode_progress_frozen(prm: ProgressModel, sample: StepSample) -> TokenSeq:
    """Greedy decode through the frozen reasoner; no gradient path exists
    because decoding runs in numpy space only."""
    max_len = len(sample.instruction) + prm.config.extra_decode
    return prm.decode(sample.features(), mode="greedy", max_len=max_len)


def policy_ce_loss(policy: PolicyModel, sample: StepSample, progress_ids: list[int]) -> dc.Node:
    """-log pi(a* | O_t, o_t, I, progress) over the K-step factorized head."""
    instr_ids = policy.vocab.encode(sample.instruction)
    action_ids = [ACTION_INDEX[a] for a in sample.expert_actions]
    return dc.neg(policy.logprob_graph(sample.features(), instr_ids, progress_ids, action_ids))


def _train_epochs(policy, dataset, progress_cache, config, opt, rng, log, start_step):
    step_no = start_step
    n = len(dataset.samples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            batch_idx = order[i:i + config.batch_size]
            losses = [policy_ce_loss(policy, dataset.samples[j], progress_cache[dataset.samples[j].uid])
                      for j in batch_idx]
            total = losses[0]
            for t in losses[1:]:
                total = dc.add(total, t)
            total = dc.mul(total, 1.0 / len(losses))
            loss_val, grads = dc.value_and_grad(total, list(policy.params.leaves.values()))
            if not np.isfinite(loss_val) or loss_val > config.divergence_limit:
                raise TrainingDiverged(f"stage-2 loss {loss_val} at step {step_no}")
            opt.step({name: grads[leaf] for name, leaf in policy.params.leaves.items()})
            log.append({"step": step_no, "epoch": epoch, "loss": float(loss_val),
                        "batch": len(batch_idx)})
            step_no += 1
    return step_no


def train_policy(dataset: DatasetFile, prm: ProgressModel, config: Stage2Config, seed: int,
                 model_config: ModelConfig | None = None,
                 dagger_tasks=None, dagger_config_hash: str = "",
                 log_path=None) -> tuple[PolicyModel, list[dict]]:
    """Minibatch descent on the K-step policy CE; the reasoner stays frozen.

    With `config.use_dagger` and tasks provided, runs one collection round
    with the partially trained policy, aggregates, and continues training.
    """
    model_config = model_config or ModelConfig(k_actions=config.k_actions)
    vocab = Vocab()
    policy = PolicyModel.init(model_config, vocab, seed)
    opt = Adam(policy.params.leaves, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 22]))
    prm_hash_before = prm.params.checkpoint_hash()

    progress_cache = {s.uid: decode_progress_frozen(prm, s).tokens for s in dataset.samples}
    log: list[dict] = []
    step_no = _train_epochs(policy, dataset, progress_cache, config, opt, rng, log, 0)

    if config.use_dagger and dagger_tasks:
        collected = dagger_collect(policy, prm, dagger_tasks, seed=seed,
                                   config_hash=dagger_config_hash,
                                   K=config.k_actions, H=model_config.history_len,
                                   epsilon=config.dagger_epsilon)
        merged = aggregate(dataset, collected)
        for s in collected.samples:
            progress_cache[s.uid] = decode_progress_frozen(prm, s).tokens
        log.append({"step": step_no, "event": "dagger_aggregate",
                    "collected": len(collected.samples), "total": len(merged.samples)})
        step_no = _train_epochs(policy, merged, progress_cache, config, opt, rng, log, step_no)

    assert prm.params.checkpoint_hash() == prm_hash_before, "frozen reasoner was mutated"
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in log:
                fh.write(canonical_json(rec) + "\n")
    return policy, log
