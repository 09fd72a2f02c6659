"""Training loop: minibatch behavior cloning with the four-term
objective, ablation wiring, per-step CSV logging, and checkpointing."""

from __future__ import annotations

import dataclasses
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import Tensor
from .config import ModelConfig, RunConfig
from .dataset import NormStats, compute_norm_stats, load_dataset, sample_batch
from .fusion import project_tau
from .losses import infonce, kl_gaussian, l1_action, recon_mse, total_loss
from .optim import NonFiniteGradError, OptimState, adamw_step, collect_grads, zero_grads
from .policy import forward_batch, init_policy_params
from .rng import stream

LOG_HEADER = "step,l1,kl,rec,con,total,alpha_mean,tau_g"


class NumericFailure(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"numeric failure at step {step}: {message}")
        self.step = step


@dataclasses.dataclass
class TrainResult:
    steps: int
    final_total: float
    log_path: Path
    checkpoint_path: Path
    seconds: float


def save_policy_checkpoint(path: str | Path, params: dict[str, Tensor],
                           opt: OptimState | None, stats: NormStats | None) -> None:
    records: dict[str, np.ndarray] = {k: p.data for k, p in params.items()}
    if opt is not None:
        for k in params:
            records[k + ".m1"] = opt.m[k]
            records[k + ".m2"] = opt.v[k]
        records["opt.step"] = np.array([float(opt.step)], dtype=np.float64)
    if stats is not None:
        records.update(stats.to_records())
    ckpt.write_records(path, records)


class CheckpointMismatch(ValueError):
    pass


def load_policy_checkpoint(path: str | Path, cfg: ModelConfig) -> tuple[dict[str, Tensor], NormStats | None]:
    records = ckpt.read_records(path)
    reference = init_policy_params(cfg, seed=0)
    params: dict[str, Tensor] = {}
    for name, ref in reference.items():
        if name not in records:
            raise CheckpointMismatch(f"checkpoint is missing parameter '{name}'")
        arr = records[name]
        if arr.shape != ref.shape:
            raise CheckpointMismatch(
                f"parameter '{name}' has shape {arr.shape}, config expects {ref.shape}")
        params[name] = Tensor(arr.astype(cfg.dtype), requires_grad=True)
    stats = None
    if "norm.action_mean" in records:
        stats = NormStats.from_records(records)
    return params, stats


def train(run_cfg: RunConfig, progress: bool = False) -> TrainResult:
    t0 = time.time()
    cfg = run_cfg.model
    out_dir = Path(run_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = load_dataset(run_cfg.data_dir)
    stats = compute_norm_stats(records)
    params = init_policy_params(cfg, run_cfg.seed)
    opt = OptimState.init(params, cfg.lr, cfg.lr_backbone, cfg.lr_tactile, cfg.weight_decay)
    batch_rng = stream(run_cfg.seed, "train.batch")
    eps_rng = stream(run_cfg.seed, "train.eps")

    variant = run_cfg.ablate
    want_recon = variant != "no-recon" and cfg.lambda_rec > 0
    lambda_rec = 0.0 if variant == "no-recon" else cfg.lambda_rec

    base_lr = dict(opt.lr_map)
    log_path = out_dir / "train_log.csv"
    ckpt_path = out_dir / "checkpoint.rtackpt"
    final_total = float("nan")
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(LOG_HEADER + "\n")
        for step_i in range(1, run_cfg.steps + 1):
            if cfg.warmup_steps > 0:
                scale = min(1.0, step_i / cfg.warmup_steps)
                opt.lr_map = {k: v * scale for k, v in base_lr.items()}
            batch = sample_batch(records, stats, run_cfg.batch_size, batch_rng, cfg.chunk)
            eps = eps_rng.standard_normal((run_cfg.batch_size, cfg.z_dim))
            out = forward_batch(params, cfg, batch.cams, batch.tacs, batch.proprio,
                                gt_chunk=batch.chunk, eps=eps, variant=variant,
                                train=True, want_recon=want_recon)
            l1 = l1_action(out.chunk, Tensor(batch.chunk, dtype=cfg.dtype), mask=batch.mask)
            kl = kl_gaussian(out.mu, out.logvar)
            if out.recon is not None:
                rec = recon_mse(out.recon, Tensor(batch.tacs, dtype=cfg.dtype))
            else:
                rec = Tensor(np.zeros((), dtype=cfg.dtype))
            con = infonce(out.e_v, out.e_t, cfg.tau_con)
            try:
                total, bd = total_loss(l1, kl, rec, con, cfg.lambda_kl, lambda_rec,
                                       cfg.lambda_con, cfg.tau_con)
            except FloatingPointError as e:
                raise NumericFailure(step_i, str(e)) from e
            zero_grads(params)
            total.backward()
            try:
                adamw_step(params, collect_grads(params), opt, cfg.beta1, cfg.beta2, cfg.adam_eps)
            except NonFiniteGradError as e:
                raise NumericFailure(step_i, str(e)) from e
            project_tau(params)
            alpha_mean = float(out.alpha.data.mean())
            tau_g = float(params["gate.tau"].data[0])
            log.write(f"{step_i},{bd.l1:.6g},{bd.kl:.6g},{bd.rec:.6g},{bd.con:.6g},"
                      f"{bd.total:.6g},{alpha_mean:.6g},{tau_g:.6g}\n")
            final_total = bd.total
            if progress and (step_i % run_cfg.log_every == 0 or step_i == 1):
                rate = step_i / max(time.time() - t0, 1e-9)
                print(f"step {step_i}/{run_cfg.steps} total={bd.total:.4f} l1={bd.l1:.4f} "
                      f"alpha={alpha_mean:.3f} ({rate:.2f} it/s)", flush=True)

    save_policy_checkpoint(ckpt_path, params, opt, stats)
    return TrainResult(steps=run_cfg.steps, final_total=final_total, log_path=log_path,
                       checkpoint_path=ckpt_path, seconds=time.time() - t0)
