"""Stage 1: self-aligned progress pretraining.

Treats instruction prefixes as latent progress states: per-prefix cumulative
cross-entropies are turned into a soft distribution over prefix lengths
(temperature tau), whose negative log-partition is the prefix loss and whose
expectation k-hat feeds a pairwise hinge that enforces monotone progress
along each episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .datagen import DatasetFile, StepSample
from .models import ModelConfig, ProgressModel, Vocab
from .optim import Adam
from .serial import canonical_json


class TrainingDiverged(Exception):
    pass


@dataclass
class SAPPConfig:
    tau: float = 1.0
    mode: str = "sum"        # "sum" follows the written objective; "mean" per-token
    pair_cap: int = 10       # ordered-pair budget per episode per batch
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 8
    use_mono: bool = True
    use_prefix: bool = True
    ema_decay: float = 0.0   # 0 disables; otherwise evaluate EMA-averaged weights
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.mode not in ("sum", "mean"):
            raise ValueError(f"unknown CE normalization mode {self.mode!r}")


# --- loss graphs ---------------------------------------------------------------

def prefix_ce(logits: dc.Node, target_ids: list[int], mode: str = "sum") -> dc.Node:
    """Vector ce[k], k = 1..|I|: cumulative CE of the teacher-forced positions
    against the length-k instruction prefix."""
    n = len(target_ids)
    per_pos = dc.cross_entropy_from_logits(logits, target_ids)
    lower = np.tril(np.ones((n, n)))
    cum = dc.matmul(dc.Constant(lower), per_pos)
    if mode == "mean":
        return dc.mul(cum, dc.Constant(1.0 / np.arange(1, n + 1)))
    return cum


def prefix_distribution(ces: dc.Node, tau: float, n: int) -> tuple[dc.Node, dc.Node]:
    """(p over k=1..n, k-hat = sum k p[k]); stable shifted softmax."""
    scores = dc.mul(ces, -1.0 / tau)
    p = dc.softmax(scores)
    khat = dc.sum_(dc.mul(p, dc.Constant(np.arange(1, n + 1, dtype=np.float64))))
    return p, khat


def loss_prefix(ces: dc.Node, tau: float) -> dc.Node:
    """-tau * log sum_k exp(-ce[k]/tau), via stable logsumexp."""
    return dc.mul(dc.logsumexp(dc.mul(ces, -1.0 / tau)), -tau)


def loss_mono(khats: list[tuple[int, dc.Node]], pairs: list[tuple[int, int]]) -> dc.Node:
    """Mean over ordered pairs (i, j), t_i < t_j, of max(0, khat_i - khat_j)."""
    if not pairs:
        return dc.Constant(0.0)
    terms = []
    for i, j in pairs:
        ti, ki = khats[i]
        tj, kj = khats[j]
        if ti >= tj:
            raise ValueError(f"pair ({ti}, {tj}) is not ordered")
        terms.append(dc.relu(dc.sub(ki, kj)))
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return dc.mul(acc, 1.0 / len(pairs))


def sample_pairs(ts: list[int], cap: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Ordered index pairs with t_i < t_j, capped per episode."""
    all_pairs = [(i, j) for i in range(len(ts)) for j in range(len(ts))
                 if ts[i] < ts[j]]
    if len(all_pairs) <= cap:
        return all_pairs
    picks = rng.choice(len(all_pairs), size=cap, replace=False)
    return [all_pairs[i] for i in sorted(picks)]


def sapp_batch_loss(prm: ProgressModel, batch: list[StepSample], config: SAPPConfig,
                    rng: np.random.Generator):
    """(total loss node, prefix node, mono node, khat nodes) for one same-episode batch."""
    vocab = prm.vocab
    prefix_terms = []
    khats: list[tuple[int, dc.Node]] = []
    for s in batch:
        ids = vocab.encode(s.instruction)
        logits = prm.teacher_logits_graph(s.features(), ids)
        ces = prefix_ce(logits, ids, config.mode)
        _, khat = prefix_distribution(ces, config.tau, len(ids))
        khats.append((s.t, khat))
        prefix_terms.append(loss_prefix(ces, config.tau))
    lp = prefix_terms[0]
    for t in prefix_terms[1:]:
        lp = dc.add(lp, t)
    lp = dc.mul(lp, 1.0 / len(prefix_terms))
    pairs = sample_pairs([s.t for s in batch], config.pair_cap, rng)
    lm = loss_mono(khats, pairs)
    total = dc.Constant(0.0)
    if config.use_prefix:
        total = dc.add(total, lp)
    if config.use_mono:
        total = dc.add(total, lm)
    return total, lp, lm, khats


# --- numpy conveniences (oracle-facing) -----------------------------------------

def prefix_ce_values(logits: np.ndarray, target_ids, mode: str = "sum") -> np.ndarray:
    return dc.evaluate(prefix_ce(dc.Constant(logits), list(target_ids), mode))


def prefix_distribution_values(ces: np.ndarray, tau: float) -> tuple[np.ndarray, float]:
    n = len(ces)
    p, khat = prefix_distribution(dc.Constant(ces), tau, n)
    return dc.evaluate(p), float(dc.evaluate(khat))


def loss_prefix_value(ces: np.ndarray, tau: float) -> float:
    return float(dc.evaluate(loss_prefix(dc.Constant(ces), tau)))


# --- training loop ---------------------------------------------------------------

def _episode_batches(samples: list[StepSample], batch_size: int,
                     rng: np.random.Generator) -> list[list[StepSample]]:
    by_ep: dict[str, list[StepSample]] = {}
    for s in samples:
        by_ep.setdefault(s.episode_id, []).append(s)
    ep_ids = sorted(by_ep)
    order = rng.permutation(len(ep_ids))
    batches = []
    for oi in order:
        ep_samples = sorted(by_ep[ep_ids[oi]], key=lambda s: s.t)
        # shuffle within the episode before chunking so the ordering pairs of a
        # batch can span the whole episode, not just adjacent steps
        shuffled = [ep_samples[i] for i in rng.permutation(len(ep_samples))]
        for i in range(0, len(shuffled), batch_size):
            batches.append(shuffled[i:i + batch_size])
    return batches


def train_sapp(dataset: DatasetFile, config: SAPPConfig, seed: int,
               model_config: ModelConfig | None = None,
               log_path=None) -> tuple[ProgressModel, list[dict]]:
    """Minibatch descent on the stage-1 objective; deterministic per seed."""
    model_config = model_config or ModelConfig()
    vocab = Vocab()
    prm = ProgressModel.init(model_config, vocab, seed)
    opt = Adam(prm.params.leaves, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    ema = ({name: leaf.value.copy() for name, leaf in prm.params.leaves.items()}
           if config.ema_decay > 0 else None)
    log: list[dict] = []
    step_no = 0
    for epoch in range(config.epochs):
        for batch in _episode_batches(dataset.samples, config.batch_size, rng):
            total, lp, lm, khats = sapp_batch_loss(prm, batch, config, rng)
            loss_val, grads, aux = dc.value_and_grad(
                total, list(prm.params.leaves.values()),
                aux=[lp, lm] + [k for _, k in khats])
            if not np.isfinite(loss_val) or loss_val > config.divergence_limit:
                raise TrainingDiverged(
                    f"stage-1 loss {loss_val} at step {step_no} (epoch {epoch})")
            named = {name: grads[leaf] for name, leaf in prm.params.leaves.items()}
            opt.step(named)
            if ema is not None:
                d = config.ema_decay
                for name, leaf in prm.params.leaves.items():
                    ema[name] *= d
                    ema[name] += (1.0 - d) * leaf.value
            kvals = [float(v) for v in aux[2:]]
            rec = {
                "step": step_no,
                "epoch": epoch,
                "loss": float(loss_val),
                "loss_prefix": float(aux[0]),
                "loss_mono": float(aux[1]),
                "khat_min": min(kvals),
                "khat_mean": float(np.mean(kvals)),
                "khat_max": max(kvals),
            }
            log.append(rec)
            step_no += 1
    if ema is not None:
        for name, leaf in prm.params.leaves.items():
            leaf.value[...] = ema[name]
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in log:
                fh.write(canonical_json(rec) + "\n")
    return prm, log
