"""End-to-end orchestration: data generation, the three training stages,
progress-module variants, evaluation, and ablation suites."""

from __future__ import annotations

import os

import numpy as np

from . import diffcore as dc
from .datagen import DatasetFile, build_sl_dataset, write_dataset
from .evaluation import (
    EvalConfig, PolicyAgent, RandomAgent, evaluate_policy, progress_quality,
)
from .models import ModelConfig, ProgressModel, Vocab
from .optim import Adam
from .policy_pretrain import Stage2Config, train_policy
from .ppcf import PPCFConfig, train_ppcf
from .report import emit_report
from .runconfig import RunConfig
from .sapp import SAPPConfig, TrainingDiverged, train_sapp
from .world import Episode, World, WorldGenError, WorldSpec, generate_episode, generate_world


def model_config_from(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        d=cfg["model.d"], n_heads=cfg["model.n_heads"],
        n_blocks=cfg["model.n_blocks"], d_ff=cfg["model.d_ff"],
        history_len=cfg["data.history_len"], k_actions=cfg["data.k_actions"],
        max_pos=cfg["model.max_pos"],
    )


def make_world(cfg: RunConfig, world_seed: int) -> World:
    """First viable seed at or after `world_seed`; generation can reject
    cramped layouts."""
    for s in range(world_seed, world_seed + 16):
        try:
            return generate_world(WorldSpec(
                seed=s, extent=cfg["world.extent"], n_rooms=cfg["world.n_rooms"],
                n_landmarks=cfg["world.n_landmarks"],
                success_radius=cfg["world.success_radius"]))
        except WorldGenError:
            continue
    raise WorldGenError(f"no viable world near seed {world_seed}")


def make_tasks(cfg: RunConfig, seed: int, n_worlds: int, episodes_per_world: int,
               world_seed_offset: int = 0) -> list[tuple[World, Episode]]:
    tasks = []
    wp = (cfg["data.waypoints_min"], cfg["data.waypoints_max"])
    for j in range(n_worlds):
        world = make_world(cfg, 100 * seed + world_seed_offset + j)
        for i in range(episodes_per_world):
            tasks.append((world, generate_episode(world, i, n_waypoints=wp)))
    return tasks


def training_dataset(cfg: RunConfig, seed: int) -> tuple[list[tuple[World, Episode]], DatasetFile]:
    tasks = make_tasks(cfg, seed, cfg["data.n_train_worlds"], cfg["data.episodes_per_world"])
    ds = build_sl_dataset([ep for _, ep in tasks], K=cfg["data.k_actions"],
                          config_hash=cfg.hash, seed=seed, H=cfg["data.history_len"])
    return tasks, ds


def eval_tasks(cfg: RunConfig, seed: int) -> list[tuple[World, Episode]]:
    return make_tasks(cfg, seed, 1, cfg["data.n_eval_episodes"],
                      world_seed_offset=cfg["data.eval_world_seed_offset"])


# --- progress-module variants -----------------------------------------------------

def _variant_descent(dataset: DatasetFile, loss_fn, seed: int, model_config: ModelConfig,
                     lr: float, epochs: int, batch_size: int) -> ProgressModel:
    prm = ProgressModel.init(model_config, Vocab(), seed)
    opt = Adam(prm.params.leaves, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 55]))
    n = len(dataset.samples)
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            losses = [loss_fn(prm, dataset.samples[j]) for j in order[i:i + batch_size]]
            total = losses[0]
            for t in losses[1:]:
                total = dc.add(total, t)
            total = dc.mul(total, 1.0 / len(losses))
            val, grads = dc.value_and_grad(total, list(prm.params.leaves.values()))
            if not np.isfinite(val):
                raise TrainingDiverged(f"variant training loss {val}")
            opt.step({nm: grads[lf] for nm, lf in prm.params.leaves.items()})
    return prm


def train_progress_numeric(dataset: DatasetFile, seed: int, model_config: ModelConfig,
                           lr: float = 1e-3, epochs: int = 3, batch_size: int = 8) -> ProgressModel:
    """Scalar completion-ratio head regressed on t/T with squared error."""
    T: dict[str, int] = {}
    for s in dataset.samples:
        T[s.episode_id] = max(T.get(s.episode_id, 0), s.t + 1)

    def loss(prm, s):
        target = s.t / T[s.episode_id]
        diff = dc.sub(prm.progress_scalar_graph(s.features()), dc.Constant(target))
        return dc.mul(diff, diff)

    return _variant_descent(dataset, loss, seed, model_config, lr, epochs, batch_size)


def train_progress_reconstruction(dataset: DatasetFile, seed: int, model_config: ModelConfig,
                                  lr: float = 1e-3, epochs: int = 3,
                                  batch_size: int = 8) -> ProgressModel:
    """Decode the full instruction at every step regardless of progress."""

    def loss(prm, s):
        ids = prm.vocab.encode(s.instruction)
        return dc.mul(dc.neg(prm.sequence_logprob_graph(s.features(), ids)),
                      1.0 / (len(ids) + 1))

    return _variant_descent(dataset, loss, seed, model_config, lr, epochs, batch_size)


def train_stage1(cfg: RunConfig, dataset: DatasetFile, seed: int,
                 log_path=None) -> tuple[ProgressModel, list[dict]]:
    mc = model_config_from(cfg)
    variant = cfg["variant.progress"]
    if variant == "prefix":
        sc = SAPPConfig(tau=cfg["sapp.tau"], mode=cfg["sapp.mode"],
                        pair_cap=cfg["sapp.pair_cap"], lr=cfg["sapp.lr"],
                        epochs=cfg["sapp.epochs"], batch_size=cfg["sapp.batch_size"],
                        use_mono=cfg["sapp.use_mono"], use_prefix=cfg["sapp.use_prefix"],
                        ema_decay=cfg["sapp.ema_decay"])
        return train_sapp(dataset, sc, seed, model_config=mc, log_path=log_path)
    if variant == "numeric":
        prm = train_progress_numeric(dataset, seed, mc, lr=cfg["sapp.lr"],
                                     epochs=cfg["sapp.epochs"],
                                     batch_size=cfg["sapp.batch_size"])
        return prm, []
    if variant == "reconstruction":
        prm = train_progress_reconstruction(dataset, seed, mc, lr=cfg["sapp.lr"],
                                            epochs=cfg["sapp.epochs"],
                                            batch_size=cfg["sapp.batch_size"])
        return prm, []
    if variant == "none":
        return ProgressModel.init(mc, Vocab(), seed), []
    raise ValueError(f"unknown progress variant {variant!r}")


# --- stages 2, 3, and evaluation ----------------------------------------------------

def train_stage2(cfg: RunConfig, dataset: DatasetFile, prm: ProgressModel, seed: int,
                 dagger_tasks=None, log_path=None):
    s2 = Stage2Config(k_actions=cfg["data.k_actions"], lr=cfg["stage2.lr"],
                      epochs=cfg["stage2.epochs"], batch_size=cfg["stage2.batch_size"],
                      use_dagger=cfg["stage2.use_dagger"],
                      dagger_epsilon=cfg["stage2.dagger_epsilon"])
    return train_policy(dataset, prm, s2, seed, model_config=model_config_from(cfg),
                        dagger_tasks=dagger_tasks, dagger_config_hash=cfg.hash,
                        log_path=log_path)


def train_stage3(cfg: RunConfig, dataset: DatasetFile, prm, policy, seed: int, log_path=None):
    pc = PPCFConfig(n_rollouts=cfg["ppcf.n_rollouts"], clip_eps=cfg["ppcf.clip_eps"],
                    beta=cfg["ppcf.beta"], temperature=cfg["ppcf.temperature"],
                    eps_std=cfg["ppcf.eps_std"], steps=cfg["ppcf.steps"],
                    states_per_step=cfg["ppcf.states_per_step"], lr=cfg["ppcf.lr"],
                    coarse_match=cfg["ppcf.coarse_match"],
                    use_len_reward=cfg["ppcf.use_len_reward"])
    return train_ppcf(dataset.samples, prm, policy, pc, seed, log_path=log_path)


def evaluate_checkpoint(cfg: RunConfig, prm, policy, tasks):
    ec = EvalConfig(execute_steps=cfg["eval.execute_steps"],
                    max_steps=cfg["eval.max_steps"],
                    history_len=cfg["data.history_len"])
    report, trajectories = evaluate_policy(PolicyAgent(policy, prm), tasks, ec)
    variant = "numeric" if cfg["variant.progress"] == "numeric" else "prefix"
    corr, viol, traces = progress_quality(prm, [ep for _, ep in tasks],
                                          tau=cfg["sapp.tau"],
                                          H=cfg["data.history_len"], variant=variant,
                                          ce_mode=cfg["sapp.mode"])
    report.spearman = corr
    report.violation_rate = viol
    return report, trajectories, traces


def run_pipeline(cfg: RunConfig, seed: int, out_dir, run_stage3: bool = True) -> dict:
    """Data -> stage 1 -> stage 2 -> optional stage 3 -> evaluation -> report.

    Every artifact lands under out_dir; identical (config, seed) reruns must
    reproduce each file byte for byte.
    """
    os.makedirs(out_dir, exist_ok=True)
    tasks, dataset = training_dataset(cfg, seed)
    write_dataset(os.path.join(out_dir, "train_data.jsonl"), dataset)

    prm, _ = train_stage1(cfg, dataset, seed,
                          log_path=os.path.join(out_dir, "stage1_log.jsonl"))
    prm.params.save(os.path.join(out_dir, "prm_stage1.ckpt"))

    policy, _ = train_stage2(cfg, dataset, prm, seed,
                             dagger_tasks=tasks if cfg["stage2.use_dagger"] else None,
                             log_path=os.path.join(out_dir, "stage2_log.jsonl"))
    policy.params.save(os.path.join(out_dir, "policy_stage2.ckpt"))

    rl_log = None
    if run_stage3:
        prm, policy, rl_log = train_stage3(
            cfg, dataset, prm, policy, seed,
            log_path=os.path.join(out_dir, "stage3_log.jsonl"))
        prm.params.save(os.path.join(out_dir, "prm_stage3.ckpt"))
        policy.params.save(os.path.join(out_dir, "policy_stage3.ckpt"))

    held_out = eval_tasks(cfg, seed)
    report, trajectories, traces = evaluate_checkpoint(cfg, prm, policy, held_out)
    files = emit_report(out_dir, [("final", report)], cfg.hash,
                        traces=traces, rl_log=rl_log)
    return {"report": report, "trajectories": trajectories, "traces": traces,
            "rl_log": rl_log, "files": files, "prm": prm, "policy": policy,
            "dataset": dataset}


# --- ablation suites -----------------------------------------------------------------

ABLATION_SUITES = ("sapp_losses", "ppcf_rewards", "exec_steps", "progress_variant")


def _with(cfg: RunConfig, overrides: dict) -> RunConfig:
    out = RunConfig(dict(cfg.values))
    out.values.update(overrides)
    return out


def _suite_rows(suite: str, cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    if suite == "sapp_losses":
        return [
            ("none", _with(cfg, {"variant.progress": "none"})),
            ("prefix", _with(cfg, {"sapp.use_mono": False})),
            ("prefix+mono", _with(cfg, {"sapp.use_mono": True})),
        ]
    if suite == "ppcf_rewards":
        return [
            ("act+fmt", _with(cfg, {"ppcf.use_len_reward": False})),
            ("act+fmt+len", _with(cfg, {"ppcf.use_len_reward": True})),
        ]
    if suite == "exec_steps":
        return [(f"exec{k}", _with(cfg, {"eval.execute_steps": k})) for k in (1, 2, 3)]
    if suite == "progress_variant":
        return [(v, _with(cfg, {"variant.progress": v}))
                for v in ("prefix", "numeric", "reconstruction")]
    raise ValueError(f"unknown ablation suite {suite!r}")


def ablate(suite: str, cfg: RunConfig, seeds: list[int], out_dir=None,
           run_stage3: bool | None = None):
    """Trains and evaluates each row of the suite on shared seeds; returns
    (row name, seed, MetricsReport) triples and optionally writes the table."""
    if run_stage3 is None:
        run_stage3 = suite == "ppcf_rewards"
    rows = []
    for name, row_cfg in _suite_rows(suite, cfg):
        for seed in seeds:
            tasks, dataset = training_dataset(row_cfg, seed)
            prm, _ = train_stage1(row_cfg, dataset, seed)
            policy, _ = train_stage2(row_cfg, dataset, prm, seed)
            if run_stage3:
                prm, policy, _ = train_stage3(row_cfg, dataset, prm, policy, seed)
            report, _, _ = evaluate_checkpoint(row_cfg, prm, policy,
                                               eval_tasks(row_cfg, seed))
            rows.append((f"{name}/s{seed}", report))
    if out_dir is not None:
        emit_report(out_dir, rows, cfg.hash)
    return rows
