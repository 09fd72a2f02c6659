"""Evaluation of trained checkpoints: metric tables, metrics.json, gate
traces, attention heatmap dumps, and clearance sweeps."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .pegsim import evaluate_rollouts
from .policy import RolloutPolicy, write_pgm
from .training import load_policy_checkpoint

GATE_HEADER = "step,t,alpha,phase"


def eval_base_seed(seed: int) -> int:
    # well away from data-generation seeds, so eval layouts are unseen
    return 20_000 + 997 * seed


def run_config_for_checkpoint(ckpt_path: str | Path, config_path: str | Path | None) -> RunConfig:
    if config_path is not None:
        return load_run_config(config_path)
    resolved = Path(ckpt_path).parent / "resolved.toml"
    if not resolved.exists():
        raise FileNotFoundError(
            f"no --config given and no resolved.toml next to {ckpt_path}")
    return load_run_config(resolved)


def evaluate_checkpoint(ckpt_path: str | Path, run_cfg: RunConfig, trials: int,
                        clearance: str, horizon: int = 200, seed: int = 0,
                        out_dir: str | Path | None = None, dump_attn: bool = False,
                        dump_gate: bool = False, attn_trials: int = 2) -> dict:
    """Roll out a checkpoint and return / persist the metric dictionary."""
    cfg = run_cfg.model
    params, stats = load_policy_checkpoint(ckpt_path, cfg)
    if stats is None:
        raise ValueError(f"checkpoint {ckpt_path} carries no normalization stats")
    policy = RolloutPolicy(params, cfg, stats, variant=run_cfg.ablate, collect_attn=dump_attn)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if dump_gate:
            (out / "gate").mkdir(exist_ok=True)
        if dump_attn:
            (out / "attn").mkdir(exist_ok=True)

    def on_trial_end(i: int, outcome: dict, trace: list, pol) -> None:
        if out is None:
            return
        if dump_gate:
            lines = [GATE_HEADER]
            for t, alpha, phase in trace:
                a = "" if alpha is None else f"{alpha:.6f}"
                lines.append(f"{t // cfg.chunk},{t},{a},{phase}")
            (out / "gate" / f"trial_{i:03d}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        if dump_attn and i < attn_trials:
            for t, maps in pol.attn_frames:
                for c, m in enumerate(maps):
                    write_pgm(out / "attn" / f"attn_ep{i}_t{t}_cam{c}.pgm", m)

    metrics = evaluate_rollouts(policy, trials, clearance, horizon=horizon,
                                base_seed=eval_base_seed(seed), collect_traces=True,
                                on_trial_end=on_trial_end)
    result = {
        "trials": metrics.trials,
        "missed": metrics.missed_rate,
        "grasp": metrics.grasp_rate,
        "insert": metrics.insert_rate,
        "clearance": clearance,
        "seed": seed,
    }
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return result, metrics


def format_metrics_table(result: dict) -> str:
    return "\n".join([
        f"Missed       : {100.0 * result['missed']:6.1f}%",
        f"Grasp        : {100.0 * result['grasp']:6.1f}%",
        f"Peg-in-hole  : {100.0 * result['insert']:6.1f}%",
    ])


def sweep(checkpoints: list[str], clearances: list[str], trials: int, seed: int,
          horizon: int = 200) -> list[dict]:
    """Evaluate each checkpoint at each clearance; rows for the robustness plot."""
    rows = []
    for ck in checkpoints:
        run_cfg = run_config_for_checkpoint(ck, None)
        method = Path(ck).parent.name or Path(ck).stem
        for level in clearances:
            result, _ = evaluate_checkpoint(ck, run_cfg, trials, level, seed=seed, horizon=horizon)
            rows.append({"method": method, "clearance": level,
                         "missed": result["missed"], "grasp": result["grasp"],
                         "insert": result["insert"]})
    return rows


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    lines = ["method,clearance,missed,grasp,insert"]
    for r in rows:
        lines.append(f"{r['method']},{r['clearance']},{r['missed']:.4f},{r['grasp']:.4f},{r['insert']:.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
