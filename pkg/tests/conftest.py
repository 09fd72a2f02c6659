"""Shared fixtures for the acceptance experiments.

Training runs and expert datasets are expensive, so they are produced
through a content-keyed cache directory (default .acceptance_cache at
the repo root, disable with TACFUSE_CACHE=0). Every cached artifact is
produced by exactly the same code path the CLI uses; the cache only
skips re-running identical recipes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import pytest

from tacfuse.config import RunConfig, desk_config
from tacfuse.dataset import gen_dataset
from tacfuse.training import train

REPO_ROOT = Path(__file__).resolve().parent.parent
CACHE_ENABLED = os.environ.get("TACFUSE_CACHE", "1") != "0"
CACHE_ROOT = Path(os.environ.get("TACFUSE_CACHE_DIR", REPO_ROOT / ".acceptance_cache"))

# frozen experiment recipe (see decisions ledger)
RECIPE = {
    "episodes": 100,
    "train_steps": 2500,
    "batch_size": 8,
    "overfit_episodes": 10,
    "overfit_steps": 4000,
    "eval_trials": 50,
    "seeds": (0, 1, 2),
    "horizon": 200,
}


def cache_dir(name: str) -> Path:
    d = CACHE_ROOT / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def dataset_dir(clearance: str, episodes: int, seed: int = 0) -> Path:
    """Expert dataset, generated once per (clearance, episodes, seed)."""
    d = cache_dir(f"data_{clearance}_{episodes}_s{seed}")
    marker = d / "manifest.json"
    if not (CACHE_ENABLED and marker.exists()):
        gen_dataset(d, episodes=episodes, clearance=clearance, seed=seed,
                    horizon=RECIPE["horizon"])
    return d


def trained_run(clearance: str, variant: str, seed: int, steps: int | None = None,
                episodes: int | None = None) -> Path:
    """Train (or fetch) one policy; returns the run directory."""
    steps = RECIPE["train_steps"] if steps is None else steps
    episodes = RECIPE["episodes"] if episodes is None else episodes
    data = dataset_dir(clearance, episodes)
    run = cache_dir(f"run_{clearance}_{variant}_s{seed}_n{episodes}_t{steps}")
    ckpt = run / "checkpoint.rtackpt"
    if CACHE_ENABLED and ckpt.exists() and (run / "resolved.toml").exists():
        return run
    cfg = RunConfig(model=desk_config(), steps=steps, batch_size=RECIPE["batch_size"],
                    seed=seed, ablate=variant, clearance=clearance,
                    data_dir=str(data), out_dir=str(run))
    from tacfuse.config import write_resolved
    write_resolved(cfg, run / "resolved.toml")
    train(cfg, progress=False)
    return run


def cached_eval(run: Path, clearance: str, trials: int, seed: int = 0,
                dump_gate: bool = False) -> dict:
    """Evaluate a run directory; metrics are cached beside the checkpoint."""
    from tacfuse.evalrun import evaluate_checkpoint, run_config_for_checkpoint
    tag = f"eval_{clearance}_t{trials}_s{seed}"
    blob = run / f"{tag}.json"
    if CACHE_ENABLED and blob.exists():
        return json.loads(blob.read_text())
    run_cfg = run_config_for_checkpoint(run / "checkpoint.rtackpt", None)
    out = run / tag
    result, metrics = evaluate_checkpoint(run / "checkpoint.rtackpt", run_cfg, trials,
                                          clearance, horizon=RECIPE["horizon"], seed=seed,
                                          out_dir=out, dump_gate=dump_gate)
    # persist the trace-derived gate statistics alongside the rates
    contact_alpha, free_alpha, per_trial = [], [], []
    for trace, outcome in zip(metrics.traces, metrics.outcomes):
        ca = [a for (_, a, ph) in trace if ph == "contact" and a is not None]
        fa = [a for (_, a, ph) in trace if ph == "free" and a is not None]
        per_trial.append({"insert": outcome["insert"], "grasp": outcome["grasp"],
                          "n_contact": len(ca),
                          "alpha_contact": sum(ca) / len(ca) if ca else None,
                          "alpha_free": sum(fa) / len(fa) if fa else None})
        contact_alpha.extend(ca)
        free_alpha.extend(fa)
    result["alpha_contact_mean"] = sum(contact_alpha) / len(contact_alpha) if contact_alpha else None
    result["alpha_free_mean"] = sum(free_alpha) / len(free_alpha) if free_alpha else None
    result["per_trial"] = per_trial
    blob.write_text(json.dumps(result, indent=2))
    return result


@pytest.fixture(scope="session")
def recipe():
    return dict(RECIPE)
