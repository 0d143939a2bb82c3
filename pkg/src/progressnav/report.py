"""Tab-separated metric tables, comma-separated traces, and vector charts."""

from __future__ import annotations

import os
import xml.etree.ElementTree as ET

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402

METRIC_COLUMNS = ("n_episodes", "ne", "sr", "osr", "spl", "spearman", "violation_rate")


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_table(path, rows: list[tuple[str, MetricsReport]], config_hash: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write("name\t" + "\t".join(METRIC_COLUMNS) + "\n")
        for name, rep in rows:
            d = rep.to_dict()
            fh.write(name + "\t" + "\t".join(_fmt(d[c]) for c in METRIC_COLUMNS) + "\n")


def read_metrics_table(path) -> tuple[str, list[tuple[str, dict]]]:
    """Inverse of write_metrics_table, for round-trip checks."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    config_hash = lines[0].split("=", 1)[1]
    cols = lines[1].split("\t")[1:]
    rows = []
    for ln in lines[2:]:
        if not ln:
            continue
        parts = ln.split("\t")
        d = {}
        for c, raw in zip(cols, parts[1:]):
            if raw == "NA":
                d[c] = None
            elif c == "n_episodes":
                d[c] = int(raw)
            else:
                d[c] = float(raw)
        rows.append((parts[0], d))
    return config_hash, rows


def write_traces(path, traces: list[dict], config_hash: str) -> None:
    """Per-episode progress series, one row per step."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write("episode_id,t,khat,k_star\n")
        for tr in traces:
            for t, (kh, ks) in enumerate(zip(tr["khat"], tr["k_star"])):
                fh.write(f"{tr['episode_id']},{t},{kh!r},{ks}\n")


def _savefig_deterministic(fig, path, config_hash: str) -> None:
    # byte-identical re-emission: pin the hash salt and drop the timestamp
    with matplotlib.rc_context({"svg.hashsalt": "progressnav"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    ET.parse(path)  # fail loudly on malformed output


def plot_progress_traces(path, traces: list[dict], config_hash: str,
                         max_episodes: int = 6) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for tr in traces[:max_episodes]:
        ts = range(len(tr["khat"]))
        ax.plot(ts, tr["khat"], label=f"{tr['episode_id']} predicted")
        ax.plot(ts, tr["k_star"], linestyle="--", label=f"{tr['episode_id']} aligned")
    ax.set_xlabel("step")
    ax.set_ylabel("prefix length")
    ax.set_title(f"progress traces ({config_hash[:12]})")
    if traces:
        ax.legend(fontsize=6)
    _savefig_deterministic(fig, path, config_hash)


def plot_reward_curve(path, log: list[dict], config_hash: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in log]
    ax.plot(steps, [r["reward_mean"] for r in log], label="mean group reward")
    ax.plot(steps, [r["loss"] for r in log], label="surrogate loss")
    ax.set_xlabel("outer step")
    ax.set_ylabel("value")
    ax.set_title(f"co-finetuning rewards ({config_hash[:12]})")
    if log:
        ax.legend(fontsize=8)
    _savefig_deterministic(fig, path, config_hash)


def emit_report(out_dir, rows: list[tuple[str, MetricsReport]], config_hash: str,
                traces: list[dict] | None = None,
                rl_log: list[dict] | None = None) -> list[str]:
    """Writes metrics.tsv plus optional traces.csv and SVG charts; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    table = os.path.join(out_dir, "metrics.tsv")
    write_metrics_table(table, rows, config_hash)
    written.append(table)
    if traces is not None:
        tpath = os.path.join(out_dir, "traces.csv")
        write_traces(tpath, traces, config_hash)
        written.append(tpath)
        cpath = os.path.join(out_dir, "progress_traces.svg")
        plot_progress_traces(cpath, traces, config_hash)
        written.append(cpath)
    if rl_log is not None:
        rpath = os.path.join(out_dir, "reward_curve.svg")
        plot_reward_curve(rpath, rl_log, config_hash)
        written.append(rpath)
    return written
