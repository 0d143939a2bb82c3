"""Step-level supervised samples, prefix-paired progress supervision, and
DAgger collection with expert relabeling."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .serial import canonical_json
from .world import (
    ACTION_INDEX, ACTION_TOKENS, Episode, Observation, World,
    expert_action, observe, step,
)

FORMAT_VERSION = 1


class DatasetError(Exception):
    pass


def history_indices(t: int, H: int) -> np.ndarray:
    """Indices of the sampled observation history for step t (always H entries;
    short prefixes repeat the first observation)."""
    if t + 1 >= H:
        return np.round(np.linspace(0, t, H)).astype(int)
    return np.concatenate([np.zeros(H - (t + 1), dtype=int), np.arange(t + 1)])


@dataclass
class StepSample:
    uid: str
    episode_id: str
    t: int
    history: tuple[Observation, ...]   # H entries
    current: Observation
    instruction: tuple[str, ...]
    expert_actions: tuple[str, ...]    # K entries, STOP-padded
    k_star: int                        # aligned prefix length (evaluation-only)

    def features(self) -> np.ndarray:
        """(H+1, FEATURE_DIM) matrix: history rows then the current observation."""
        return np.array([o.features() for o in self.history] + [self.current.features()])

    def to_record(self) -> dict:
        return {
            "uid": self.uid,
            "episode_id": self.episode_id,
            "t": self.t,
            "history": [o.to_record() for o in self.history],
            "current": self.current.to_record(),
            "instruction": list(self.instruction),
            "expert_actions": list(self.expert_actions),
            "k_star": self.k_star,
        }

    @staticmethod
    def from_record(d: dict) -> "StepSample":
        return StepSample(
            uid=d["uid"],
            episode_id=d["episode_id"],
            t=d["t"],
            history=tuple(Observation.from_record(o) for o in d["history"]),
            current=Observation.from_record(d["current"]),
            instruction=tuple(d["instruction"]),
            expert_actions=tuple(d["expert_actions"]),
            k_star=d["k_star"],
        )


@dataclass
class DatasetFile:
    header: dict
    samples: list[StepSample]

    def __len__(self) -> int:
        return len(self.samples)


def make_header(config_hash: str, seed: int, kind: str, count: int) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "seed": seed,
        "kind": kind,
        "count": count,
    }


def expert_next_k(episode: Episode, t: int, K: int) -> tuple[str, ...]:
    """a*_{t:t+K-1}, STOP-padded past the terminal action."""
    acts = list(episode.actions[t:t + K])
    acts += ["STOP"] * (K - len(acts))
    return tuple(acts)


def build_sl_dataset(episodes: list[Episode], K: int, config_hash: str, seed: int,
                     H: int = 8) -> DatasetFile:
    """One sample per step of each episode, pairing the trajectory prefix with
    the full instruction."""
    samples: list[StepSample] = []
    for ep in episodes:
        T = len(ep.actions)
        if T == 0:
            raise DatasetError(f"episode {ep.episode_id} has zero steps")
        for t in range(T):
            hist = tuple(ep.observations[i] for i in history_indices(t, H))
            samples.append(StepSample(
                uid=f"{ep.episode_id}t{t}:sl",
                episode_id=ep.episode_id,
                t=t,
                history=hist,
                current=ep.observations[t],
                instruction=ep.instruction.tokens,
                expert_actions=expert_next_k(ep, t, K),
                k_star=ep.instruction.aligned_prefix_length(t),
            ))
    return DatasetFile(make_header(config_hash, seed, "sl", len(samples)), samples)


def dagger_collect(policy, prm, tasks: list[tuple[World, Episode]], seed: int,
                   config_hash: str, K: int = 3, H: int = 8, epsilon: float = 0.1,
                   max_steps: int = 120) -> DatasetFile:
    """Roll the current policy with eps-greedy exploration and relabel every
    visited state with the expert's next-K actions."""
    samples: list[StepSample] = []
    truncated = 0
    for task_idx, (wld, ep) in enumerate(tasks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, task_idx]))
        instr_ids = policy.vocab.encode(ep.instruction.tokens)
        pose = ep.start
        obs_seq: list[Observation] = []
        prev = -1
        t = 0
        while t < max_steps:
            obs_seq.append(observe(wld, pose, prev, t))
            hist = tuple(obs_seq[i] for i in history_indices(t, H))
            feats = np.array([o.features() for o in hist] + [obs_seq[t].features()])
            # expert relabel: simulate the expert forward K steps from here
            labels = []
            sim_pose = pose
            for j in range(K):
                a = expert_action(wld, sim_pose, ep, min(t + j, len(ep.actions) - 1))
                labels.append(a)
                sim_pose, _, term = step(wld, sim_pose, a)
                if term:
                    labels += ["STOP"] * (K - len(labels))
                    break
            k_star = ep.instruction.aligned_prefix_length(min(t, len(ep.actions) - 1))
            samples.append(StepSample(
                uid=f"{ep.episode_id}t{t}:dagger{task_idx}",
                episode_id=ep.episode_id,
                t=t,
                history=hist,
                current=obs_seq[t],
                instruction=ep.instruction.tokens,
                expert_actions=tuple(labels),
                k_star=k_star,
            ))
            # learner's move
            if rng.random() < epsilon:
                act_id = int(rng.integers(len(ACTION_TOKENS)))
            else:
                progress = prm.decode(feats, mode="greedy",
                                      max_len=len(instr_ids) + prm.config.extra_decode)
                act_id = policy.greedy_actions(feats, instr_ids, progress.tokens)[0]
            action = ACTION_TOKENS[act_id]
            pose, _, terminal = step(wld, pose, action)
            prev = act_id
            t += 1
            if terminal:
                break
        else:
            truncated += 1
    ds = DatasetFile(make_header(config_hash, seed, "dagger", len(samples)), samples)
    ds.header["truncated_rollouts"] = truncated
    return ds


def aggregate(a: DatasetFile, b: DatasetFile) -> DatasetFile:
    """Concatenate datasets; record uids must stay unique."""
    uids = {s.uid for s in a.samples}
    dup = [s.uid for s in b.samples if s.uid in uids]
    if dup:
        raise DatasetError(f"duplicate record ids in aggregation: {dup[:3]}")
    header = dict(a.header)
    header["kind"] = f"{a.header['kind']}+{b.header['kind']}"
    header["count"] = len(a.samples) + len(b.samples)
    return DatasetFile(header, a.samples + b.samples)


def write_dataset(path, ds: DatasetFile) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(ds.header) + "\n")
        for s in ds.samples:
            fh.write(canonical_json(s.to_record()) + "\n")


def read_dataset(path, expected_config_hash: str | None = None) -> DatasetFile:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first:
            raise DatasetError(f"{path}: no header")
        header = json.loads(first)
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"{path}: format version mismatch: {header.get('format_version')}")
        if expected_config_hash is not None and header.get("config_hash") != expected_config_hash:
            raise DatasetError(f"{path}: config hash mismatch")
        samples = [StepSample.from_record(json.loads(line))
                   for line in fh if line.strip()]
    if header.get("count") != len(samples):
        raise DatasetError(f"{path}: truncated file: header says {header.get('count')}, "
                           f"found {len(samples)}")
    return DatasetFile(header, samples)
