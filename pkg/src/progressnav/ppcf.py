"""Stage 3: reward-driven co-finetuning of the progress reasoner and policy.

Per state, N progress hypotheses are sampled, each conditioning N sampled
action sequences (one per hypothesis). Rewards are scored offline against the
state's expert labels, normalized into group-relative advantages, and both
modules are updated through a clipped surrogate whose ratio multiplies the
policy and reasoner sequence-probability ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .datagen import StepSample
from .models import PolicyModel, ProgressModel
from .optim import Adam
from .sapp import TrainingDiverged, prefix_ce, prefix_distribution
from .serial import canonical_json
from .world import ACTION_INDEX, ACTION_TOKENS

LOG_RATIO_CAP = 20.0


# --- action text grammar ---------------------------------------------------------

@dataclass
class ParseResult:
    tokens: list[str] | None
    error: str | None = None
    error_pos: int | None = None   # 0-based token position of the first offense

    @property
    def valid(self) -> bool:
        return self.tokens is not None


def serialize_actions(tokens) -> str:
    return " ".join(tokens)


def parse_action_text(s: str, K: int = 3) -> ParseResult:
    """Accepts exactly K single-space-separated action tokens; once STOP
    appears every later token must be STOP. First offending position reported."""
    parts = s.split(" ")
    stopped = False
    for i, tok in enumerate(parts):
        if tok == "":
            return ParseResult(None, "empty token", i)
        if tok not in ACTION_INDEX:
            return ParseResult(None, f"unknown token {tok!r}", i)
        if stopped and tok != "STOP":
            return ParseResult(None, "non-STOP token after STOP", i)
        if tok == "STOP":
            stopped = True
    if len(parts) != K:
        return ParseResult(None, f"expected {K} tokens, got {len(parts)}",
                           min(len(parts), K))
    return ParseResult(list(parts))


# --- rewards ---------------------------------------------------------------------

@dataclass
class RewardBreakdown:
    r_act: int
    r_fmt: int
    r_len: float

    @property
    def r_total(self) -> float:
        return self.r_act + self.r_fmt + self.r_len


def _action_class(tok: str) -> str:
    return "STOP" if tok == "STOP" else tok[0]


def reward_action(pred, expert, K: int, coarse: bool = False) -> int:
    """Length of the longest matching prefix: sum_i prod_{j<=i} 1[pred_j = expert_j]."""
    if len(pred) != K or len(expert) != K:
        raise ValueError(f"expected length-{K} sequences, got {len(pred)} and {len(expert)}")
    n = 0
    for p, e in zip(pred, expert):
        if (coarse and _action_class(p) == _action_class(e)) or (not coarse and p == e):
            n += 1
        else:
            break
    return n


def reward_format(s: str, K: int = 3) -> int:
    return 1 if parse_action_text(s, K).valid else 0


def reward_length(progress_len: int, instr_len: int, beta: float) -> float:
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if progress_len <= instr_len:
        return 1.0
    return -beta * (progress_len - instr_len)


def _parseable_prefix(s: str) -> list[str]:
    """Leading tokens of an invalid action text that the grammar still accepts."""
    out = []
    stopped = False
    for tok in s.split(" "):
        if tok == "" or tok not in ACTION_INDEX or (stopped and tok != "STOP"):
            break
        out.append(tok)
        stopped = stopped or tok == "STOP"
    return out


def total_reward(action_text: str, expert, instr_len: int, progress_len: int,
                 K: int, beta: float, coarse: bool = False) -> RewardBreakdown:
    """r_act + r_fmt + r_len for one rollout. An invalid action text keeps an
    action reward over its parseable leading tokens; the positions past the
    first offense count as mismatches."""
    parsed = parse_action_text(action_text, K)
    if parsed.valid:
        pred = parsed.tokens
    else:
        prefix = _parseable_prefix(action_text)[:K]
        # pad with a sentinel outside the vocabulary so padding never matches
        pred = prefix + ["<bad>"] * (K - len(prefix))
    return RewardBreakdown(
        r_act=reward_action(pred, list(expert), K, coarse=coarse),
        r_fmt=1 if parsed.valid else 0,
        r_len=reward_length(progress_len, instr_len, beta),
    )


# --- group-relative surrogate ------------------------------------------------------

def group_advantages(rewards, eps_std: float = 1e-6) -> np.ndarray:
    """(r - mean) / population std; all zeros when the std guard trips."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a rollout group needs at least 2 entries")
    std = r.std()
    if std < eps_std:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def joint_ratio(lp_pi_new: dc.Node, lp_pi_old: float,
                lp_f_new: dc.Node, lp_f_old: float) -> dc.Node:
    """exp(delta log pi + delta log F_p), exponent capped at +/-LOG_RATIO_CAP."""
    delta = dc.add(dc.sub(lp_pi_new, dc.Constant(float(lp_pi_old))),
                   dc.sub(lp_f_new, dc.Constant(float(lp_f_old))))
    return dc.exp(dc.clip(delta, -LOG_RATIO_CAP, LOG_RATIO_CAP))


def joint_ratio_value(lp_pi_new: float, lp_pi_old: float,
                      lp_f_new: float, lp_f_old: float) -> float:
    d = (lp_pi_new - lp_pi_old) + (lp_f_new - lp_f_old)
    return float(np.exp(np.clip(d, -LOG_RATIO_CAP, LOG_RATIO_CAP)))


def grpo_loss(ratios: list[dc.Node], advantages: np.ndarray, eps: float) -> dc.Node:
    """-mean_n min(rho A, clip(rho, 1-eps, 1+eps) A); the KL term is omitted
    because its coefficient is fixed at zero."""
    if not 0 < eps < 1:
        raise ValueError("clip range must be in (0, 1)")
    terms = []
    for rho, a in zip(ratios, advantages):
        adv = dc.Constant(float(a))
        unclipped = dc.mul(rho, adv)
        clipped = dc.mul(dc.clip(rho, 1.0 - eps, 1.0 + eps), adv)
        # min(a, b) = -max(-a, -b)
        terms.append(dc.neg(dc.maximum(dc.neg(unclipped), dc.neg(clipped))))
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return dc.neg(dc.mul(acc, 1.0 / len(terms)))


# --- training loop ------------------------------------------------------------------

@dataclass
class PPCFConfig:
    n_rollouts: int = 4
    clip_eps: float = 0.28
    kl_coef: float = 0.0
    beta: float = 0.1
    temperature: float = 1.0
    eps_std: float = 1e-6
    steps: int = 50
    states_per_step: int = 2
    lr: float = 1e-4
    coarse_match: bool = False
    use_len_reward: bool = True   # ablation switch; zeroes r_len when off
    divergence_limit: float = 1e6

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.n_rollouts < 2:
            raise ValueError("n_rollouts must be >= 2")
        if self.kl_coef != 0.0:
            raise ValueError("only kl_coef = 0 is supported")


@dataclass
class Rollout:
    progress_ids: list[int]
    action_ids: list[int]
    reward: RewardBreakdown
    lp_policy_old: float
    lp_prm_old: float
    advantage: float = 0.0


def _rollout_group(prm: ProgressModel, policy: PolicyModel, state: StepSample,
                   config: PPCFConfig, rng: np.random.Generator):
    """Sample N (progress, actions) pairs for one state and score them offline.

    Old log-probs come from evaluating the same graphs the update will reuse,
    so ratios are exactly 1 at the snapshot."""
    feats = state.features()
    instr_ids = prm.vocab.encode(state.instruction)
    max_len = len(instr_ids) + prm.config.extra_decode
    rollouts, lp_prm_nodes, lp_pol_nodes = [], [], []
    for _ in range(config.n_rollouts):
        hyp = prm.decode(feats, mode="sample", temperature=config.temperature,
                         rng=rng, max_len=max_len)
        act_ids, _ = policy.sample_actions(feats, instr_ids, hyp.tokens, rng)
        lp_prm = prm.sequence_logprob_graph(feats, hyp.tokens)
        lp_pol = policy.logprob_graph(feats, instr_ids, hyp.tokens, act_ids)
        text = serialize_actions(ACTION_TOKENS[a] for a in act_ids)
        reward = total_reward(text, state.expert_actions, len(instr_ids),
                              len(hyp.tokens), K=policy.config.k_actions,
                              beta=config.beta, coarse=config.coarse_match)
        if not config.use_len_reward:
            reward = RewardBreakdown(reward.r_act, reward.r_fmt, 0.0)
        rollouts.append(Rollout(hyp.tokens, act_ids, reward,
                                lp_policy_old=float(dc.evaluate(lp_pol)),
                                lp_prm_old=float(dc.evaluate(lp_prm))))
        lp_prm_nodes.append(lp_prm)
        lp_pol_nodes.append(lp_pol)
    adv = group_advantages([r.reward.r_total for r in rollouts], config.eps_std)
    for r, a in zip(rollouts, adv):
        r.advantage = float(a)
    ratios = [joint_ratio(lp_pol_nodes[n], rollouts[n].lp_policy_old,
                          lp_prm_nodes[n], rollouts[n].lp_prm_old)
              for n in range(config.n_rollouts)]
    return rollouts, ratios, adv


def _mean_khat(prm: ProgressModel, state: StepSample, tau: float = 1.0) -> float:
    ids = prm.vocab.encode(state.instruction)
    logits = prm.teacher_logits_graph(state.features(), ids)
    _, khat = prefix_distribution(prefix_ce(logits, ids), tau, len(ids))
    return float(dc.evaluate(khat))


def _dump_rollouts(rollouts: list[Rollout]) -> str:
    lines = []
    for n, r in enumerate(rollouts):
        lines.append(canonical_json({
            "n": n, "progress_ids": r.progress_ids, "action_ids": r.action_ids,
            "r_act": r.reward.r_act, "r_fmt": r.reward.r_fmt,
            "r_len": r.reward.r_len, "advantage": r.advantage,
            "lp_policy_old": r.lp_policy_old, "lp_prm_old": r.lp_prm_old,
        }))
    return "\n".join(lines)


def train_ppcf(states: list[StepSample], prm: ProgressModel, policy: PolicyModel,
               config: PPCFConfig, seed: int, log_path=None
               ) -> tuple[ProgressModel, PolicyModel, list[dict]]:
    """Joint clipped-surrogate finetuning; one gradient update per snapshot.

    Both models are updated in place; rewards use expert labels only, so no
    environment interaction happens here. Deterministic per seed.
    """
    opt_prm = Adam(prm.params.leaves, lr=config.lr)
    opt_pol = Adam(policy.params.leaves, lr=config.lr)
    pick_rng = np.random.default_rng(np.random.SeedSequence([seed, 33]))
    log: list[dict] = []
    K = policy.config.k_actions
    for step_no in range(config.steps):
        idx = pick_rng.choice(len(states), size=min(config.states_per_step, len(states)),
                              replace=False)
        state_losses = []
        all_rollouts: list[Rollout] = []
        ratio_nodes: list[dc.Node] = []
        for slot, si in enumerate(sorted(int(i) for i in idx)):
            roll_rng = np.random.default_rng(np.random.SeedSequence([seed, step_no, slot]))
            rollouts, ratios, adv = _rollout_group(prm, policy, states[si], config, roll_rng)
            state_losses.append(grpo_loss(ratios, adv, config.clip_eps))
            all_rollouts += rollouts
            ratio_nodes += ratios
        total = state_losses[0]
        for t in state_losses[1:]:
            total = dc.add(total, t)
        total = dc.mul(total, 1.0 / len(state_losses))
        leaves = list(prm.params.leaves.values()) + list(policy.params.leaves.values())
        loss_val, grads, ratio_vals = dc.value_and_grad(total, leaves, aux=ratio_nodes)
        bad = not np.isfinite(loss_val) or any(
            not np.isfinite(grads[lf]).all() for lf in leaves)
        if bad:
            raise TrainingDiverged(
                f"non-finite stage-3 update at step {step_no}; rollout dump:\n"
                + _dump_rollouts(all_rollouts))
        if abs(loss_val) > config.divergence_limit:
            raise TrainingDiverged(f"stage-3 loss {loss_val} at step {step_no}")
        opt_prm.step({n: grads[lf] for n, lf in prm.params.leaves.items()})
        opt_pol.step({n: grads[lf] for n, lf in policy.params.leaves.items()})

        rvals = [float(v) for v in ratio_vals]
        acts = np.array([r.reward.r_act for r in all_rollouts])
        rec = {
            "step": step_no,
            "loss": float(loss_val),
            "reward_mean": float(np.mean([r.reward.r_total for r in all_rollouts])),
            "r_act_hist": [int((acts == v).sum()) for v in range(K + 1)],
            "fmt_rate": float(np.mean([r.reward.r_fmt for r in all_rollouts])),
            "len_reward_mean": float(np.mean([r.reward.r_len for r in all_rollouts])),
            "clip_fraction": float(np.mean([
                not (1 - config.clip_eps <= v <= 1 + config.clip_eps) for v in rvals])),
            "mean_progress_len": float(np.mean([len(r.progress_ids) for r in all_rollouts])),
            "mean_khat": float(np.mean([_mean_khat(prm, states[si])
                                        for si in sorted(int(i) for i in idx)])),
        }
        log.append(rec)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in log:
                fh.write(canonical_json(rec) + "\n")
    return prm, policy, log
