"""Closed-loop evaluation, navigation metrics, and progress-quality scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import diffcore as dc
from .datagen import history_indices
from .models import PolicyModel, ProgressModel
from .sapp import prefix_ce, prefix_distribution
from .world import (
    ACTION_INDEX, ACTION_TOKENS, Episode, Observation, World,
    expert_action, observe, step,
)


@dataclass
class EvalConfig:
    execute_steps: int = 3
    max_steps: int = 120
    history_len: int = 8

    def __post_init__(self):
        if self.execute_steps < 1:
            raise ValueError("execute_steps must be >= 1")


@dataclass
class Trajectory:
    episode_id: str
    positions: list[tuple[float, float]]
    actions: list[str]

    @property
    def path_length(self) -> float:
        return sum(math.hypot(x1 - x0, y1 - y0)
                   for (x0, y0), (x1, y1) in zip(self.positions, self.positions[1:]))


@dataclass
class MetricsReport:
    n_episodes: int
    ne: float
    sr: float
    osr: float
    spl: float
    spearman: float | None = None
    violation_rate: float | None = None

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes, "ne": self.ne, "sr": self.sr,
            "osr": self.osr, "spl": self.spl, "spearman": self.spearman,
            "violation_rate": self.violation_rate,
        }


# --- agents ----------------------------------------------------------------------

class PolicyAgent:
    """Greedy progress decode feeding the K-step action head."""

    def __init__(self, policy: PolicyModel, prm: ProgressModel):
        self.policy = policy
        self.prm = prm

    def plan(self, world: World, episode: Episode, pose, feats, t: int) -> list[str]:
        instr_ids = self.policy.vocab.encode(episode.instruction.tokens)
        progress = self.prm.decode(
            feats, mode="greedy",
            max_len=len(instr_ids) + self.prm.config.extra_decode)
        ids = self.policy.greedy_actions(feats, instr_ids, progress.tokens)
        return [ACTION_TOKENS[i] for i in ids]


class ExpertAgent:
    """Replays the waypoint-following teacher; scores SR = SPL = 1."""

    def __init__(self, k_actions: int = 3):
        self.k_actions = k_actions

    def plan(self, world: World, episode: Episode, pose, feats, t: int) -> list[str]:
        out = []
        sim = pose
        for j in range(self.k_actions):
            a = expert_action(world, sim, episode, min(t + j, len(episode.actions) - 1))
            out.append(a)
            sim, _, terminal = step(world, sim, a)
            if terminal:
                out += ["STOP"] * (self.k_actions - len(out))
                break
        return out


class RandomAgent:
    """Uniform over the action vocabulary; the SR noise floor."""

    def __init__(self, seed: int, k_actions: int = 3):
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 44]))
        self.k_actions = k_actions

    def plan(self, world, episode, pose, feats, t) -> list[str]:
        return [ACTION_TOKENS[int(i)]
                for i in self.rng.integers(len(ACTION_TOKENS), size=self.k_actions)]


# --- closed loop -----------------------------------------------------------------

def run_episode(agent, world: World, episode: Episode, cfg: EvalConfig) -> Trajectory:
    pose = episode.start
    positions = [(pose.x, pose.y)]
    taken: list[str] = []
    obs_seq: list[Observation] = []
    prev = -1
    t = 0
    obs_seq.append(observe(world, pose, prev, 0))
    done = False
    while not done and t < cfg.max_steps:
        hist = [obs_seq[i] for i in history_indices(t, cfg.history_len)]
        feats = np.array([o.features() for o in hist] + [obs_seq[t].features()])
        plan = agent.plan(world, episode, pose, feats, t)
        for action in plan[:cfg.execute_steps]:
            pose, _, terminal = step(world, pose, action)
            positions.append((pose.x, pose.y))
            taken.append(action)
            prev = ACTION_INDEX[action]
            t += 1
            if terminal or t >= cfg.max_steps:
                done = terminal
                break
            obs_seq.append(observe(world, pose, prev, t))
    return Trajectory(episode.episode_id, positions, taken)


def evaluate_policy(agent, tasks: list[tuple[World, Episode]],
                    cfg: EvalConfig | None = None) -> tuple[MetricsReport, list[Trajectory]]:
    cfg = cfg or EvalConfig()
    trajectories = [run_episode(agent, w, ep, cfg) for w, ep in tasks]
    episodes = [ep for _, ep in tasks]
    radius = tasks[0][0].spec.success_radius if tasks else 1.0
    return compute_metrics(trajectories, episodes, radius), trajectories


def compute_metrics(trajectories: list[Trajectory], episodes: list[Episode],
                    radius: float) -> MetricsReport:
    """NE / SR / OSR / SPL over paired trajectories and episodes."""
    if len(trajectories) != len(episodes):
        raise ValueError("trajectory/episode count mismatch")
    nes, srs, osrs, spls = [], [], [], []
    for traj, ep in zip(trajectories, episodes):
        gx, gy = ep.goal
        dists = [math.hypot(x - gx, y - gy) for x, y in traj.positions]
        ne = dists[-1]
        success = 1.0 if ne <= radius else 0.0
        oracle = 1.0 if min(dists) <= radius else 0.0
        shortest = ep.shortest_path_length
        spl = success * shortest / max(traj.path_length, shortest) if shortest > 0 else success
        nes.append(ne)
        srs.append(success)
        osrs.append(oracle)
        spls.append(spl)
    n = len(episodes)
    return MetricsReport(
        n_episodes=n,
        ne=float(np.mean(nes)) if n else 0.0,
        sr=float(np.mean(srs)) if n else 0.0,
        osr=float(np.mean(osrs)) if n else 0.0,
        spl=float(np.mean(spls)) if n else 0.0,
    )


# --- progress quality --------------------------------------------------------------

def episode_khats(prm: ProgressModel, episode: Episode, tau: float = 1.0,
                  H: int = 8, variant: str = "prefix",
                  ce_mode: str = "sum") -> tuple[list[float], list[int]]:
    """(progress value per step, aligned prefix length per step) along a
    recorded episode. The "prefix" variant scores the expected prefix length;
    "numeric" reads the scalar completion head. Ranks are what downstream
    correlation uses, so the two scales are interchangeable there."""
    ids = prm.vocab.encode(episode.instruction.tokens)
    khats, kstars = [], []
    for t in range(len(episode.actions)):
        hist = [episode.observations[i] for i in history_indices(t, H)]
        feats = np.array([o.features() for o in hist]
                         + [episode.observations[t].features()])
        if variant == "numeric":
            khats.append(float(dc.evaluate(prm.progress_scalar_graph(feats))))
        else:
            logits = prm.teacher_logits_graph(feats, ids)
            _, khat = prefix_distribution(prefix_ce(logits, ids, ce_mode), tau, len(ids))
            khats.append(float(dc.evaluate(khat)))
        kstars.append(episode.instruction.aligned_prefix_length(t))
    return khats, kstars


def progress_quality(prm: ProgressModel, episodes: list[Episode], tau: float = 1.0,
                     H: int = 8, variant: str = "prefix", ce_mode: str = "sum"
                     ) -> tuple[float | None, float, list[dict]]:
    """(mean per-episode Spearman, monotonicity violation rate, trace records).

    Episodes where either series is constant have undefined correlation and are
    excluded from the mean (marked in their trace record)."""
    corrs = []
    violations = 0
    pairs = 0
    traces = []
    for ep in episodes:
        khats, kstars = episode_khats(prm, ep, tau=tau, H=H, variant=variant,
                                      ce_mode=ce_mode)
        rec = {"episode_id": ep.episode_id, "khat": khats, "k_star": kstars}
        if len(set(khats)) < 2 or len(set(kstars)) < 2:
            rec["spearman"] = None
        else:
            rho = stats.spearmanr(khats, kstars).statistic
            rec["spearman"] = float(rho)
            corrs.append(float(rho))
        violations += sum(1 for a, b in zip(khats, khats[1:]) if b < a)
        pairs += max(len(khats) - 1, 0)
        traces.append(rec)
    mean_corr = float(np.mean(corrs)) if corrs else None
    rate = violations / pairs if pairs else 0.0
    return mean_corr, rate, traces
