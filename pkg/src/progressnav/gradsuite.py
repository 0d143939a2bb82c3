"""Finite-difference verification of every trainable objective.

Each maker builds one random small instance of a loss and returns (graph,
bindings) for the leaves whose gradients get checked. Instances that land
near a nonsmooth point are skipped and resampled.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .models import ModelConfig, PolicyModel, ProgressModel, Vocab
from .ppcf import grpo_loss, joint_ratio
from .sapp import loss_mono, loss_prefix, prefix_ce, prefix_distribution
from .world import FEATURE_DIM

TINY = ModelConfig(d=8, n_heads=2, n_blocks=1, d_ff=16, history_len=2, max_pos=48)


def make_prefix_instance(rng: np.random.Generator):
    n = int(rng.integers(3, 7))
    V = int(rng.integers(5, 9))
    logits = dc.Leaf("logits", rng.normal(0, 1.0, (n, V)))
    ids = [int(i) for i in rng.integers(0, V, size=n)]
    tau = float(rng.uniform(0.4, 2.0))
    expr = loss_prefix(prefix_ce(logits, ids), tau)
    return expr, {logits: logits.value}


def make_mono_instance(rng: np.random.Generator):
    m = int(rng.integers(3, 6))
    n = int(rng.integers(3, 6))
    leaves = [dc.Leaf(f"ce{i}", rng.normal(1.0, 0.5, n)) for i in range(m)]
    khats = []
    for i, lf in enumerate(leaves):
        _, khat = prefix_distribution(lf, 1.0, n)
        khats.append((i, khat))
    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    expr = loss_mono(khats, pairs)
    return expr, {lf: lf.value for lf in leaves}


def make_policy_ce_instance(rng: np.random.Generator):
    seed = int(rng.integers(1 << 30))
    policy = PolicyModel.init(TINY, Vocab(), seed)
    feats = rng.normal(0, 0.5, (3, FEATURE_DIM))
    instr_ids = [int(i) for i in rng.integers(0, policy.vocab.size - 2, size=4)]
    progress_ids = [int(i) for i in rng.integers(0, policy.vocab.size - 2, size=2)]
    action_ids = [int(i) for i in rng.integers(0, 10, size=TINY.k_actions)]
    expr = dc.neg(policy.logprob_graph(feats, instr_ids, progress_ids, action_ids))
    # a representative parameter subset keeps the finite differences affordable
    subset = ("act_w", "act_b", "query", "seg", "lnf_g")
    return expr, {policy.params[n]: policy.params[n].value for n in subset}


def make_prm_seq_instance(rng: np.random.Generator):
    seed = int(rng.integers(1 << 30))
    prm = ProgressModel.init(TINY, Vocab(), seed)
    feats = rng.normal(0, 0.5, (3, FEATURE_DIM))
    ids = [int(i) for i in rng.integers(0, prm.vocab.size - 2, size=3)]
    expr = dc.neg(prm.sequence_logprob_graph(feats, ids))
    subset = ("out_w", "out_b", "tok_emb", "dec_lnf_g")
    return expr, {prm.params[n]: prm.params[n].value for n in subset}


def make_surrogate_instance(rng: np.random.Generator):
    """Clipped objective over a synthetic group: log-probs are leaves, old
    values offset so both clipped and unclipped branches occur."""
    N = int(rng.integers(2, 5))
    lp_pi = [dc.Leaf(f"lp_pi{n}", rng.normal(-3, 1)) for n in range(N)]
    lp_f = [dc.Leaf(f"lp_f{n}", rng.normal(-5, 1)) for n in range(N)]
    ratios = []
    for n in range(N):
        # keep rho well outside the clip window: inside it the two surrogate
        # branches coincide exactly and the min sits on its kink
        off = float(rng.choice([-1, 1]) * rng.uniform(0.5, 0.9))
        ratios.append(joint_ratio(lp_pi[n], float(lp_pi[n].value) + off,
                                  lp_f[n], float(lp_f[n].value) - off / 3))
    adv = rng.choice([-1, 1], N) * rng.uniform(0.5, 2.0, N)
    expr = grpo_loss(ratios, adv, eps=0.28)
    binds = {lf: lf.value for lf in lp_pi + lp_f}
    return expr, binds


MAKERS = {
    "prefix_loss": make_prefix_instance,
    "monotonicity_loss": make_mono_instance,
    "policy_ce": make_policy_ce_instance,
    "progress_seq_logprob": make_prm_seq_instance,
    "clipped_surrogate": make_surrogate_instance,
}


@dataclass
class SuiteResult:
    name: str
    instances: int
    skipped: int
    max_rel_err: float
    passed: bool
    failures: list[str] = field(default_factory=list)


def run_suite(names=None, n_instances: int = 50, seed: int = 0,
              tol: float = 1e-4) -> list[SuiteResult]:
    names = list(names or MAKERS)
    out = []
    for name in names:
        maker = MAKERS[name]
        rng = np.random.default_rng(np.random.SeedSequence(
            [seed, zlib.crc32(name.encode())]))
        done = skipped = 0
        worst = 0.0
        failures: list[str] = []
        attempts = 0
        while done < n_instances and attempts < 4 * n_instances:
            attempts += 1
            expr, binds = maker(rng)
            rep = dc.grad_check(expr, binds, tol=tol)
            if rep.kink_skipped:
                skipped += 1
                continue
            done += 1
            for c in rep.checks:
                worst = max(worst, c.max_rel_err)
                if not c.passed:
                    failures.append(f"{name}/{c.name}: rel err {c.max_rel_err:.3e}")
        out.append(SuiteResult(name, done, skipped, worst,
                               passed=done == n_instances and not failures,
                               failures=failures))
    return out
