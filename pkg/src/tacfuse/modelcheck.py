"""End-to-end gradient verification of the full training objective.

Builds a deterministic synthetic batch, perturbs a fresh double-precision
initialization away from its structured zeros (zeroed final layers would
otherwise leave exactly-zero gradients that a relative-error test cannot
score), and runs the finite-difference oracle over every parameter.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .config import ModelConfig
from .gradcheck import GradCheckReport, grad_check
from .losses import infonce, kl_gaussian, l1_action, recon_mse, total_loss
from .policy import forward_batch, init_policy_params
from .rng import stream


def synthetic_batch(cfg: ModelConfig, seed: int = 0, batch: int = 2) -> dict[str, np.ndarray]:
    """Deterministic random batch. Two samples so the contrastive term has
    a real negative; one padded chunk row so masking is on the path."""
    rng = stream(seed, "modelcheck.batch")
    b = batch
    mask = np.ones((b, cfg.chunk), dtype=np.float64)
    if b > 1 and cfg.chunk > 1:
        mask[-1, -1] = 0.0
    return {
        "cams": rng.uniform(0.0, 1.0, (b, cfg.cameras, cfg.cam_channels, cfg.cam_h, cfg.cam_w)),
        "tacs": rng.uniform(0.0, 1.0, (b, cfg.sensors, cfg.tac_channels, cfg.tac_h, cfg.tac_w)),
        "proprio": rng.normal(0.0, 1.0, (b, cfg.proprio_dim)),
        "chunk": rng.normal(0.0, 1.0, (b, cfg.chunk, cfg.action_dim)),
        "eps": rng.normal(0.0, 1.0, (b, cfg.z_dim)),
        "mask": mask,
    }


def checkable_params(cfg: ModelConfig, seed: int = 0, jitter: float = 0.05) -> dict[str, Tensor]:
    params = init_policy_params(cfg, seed)
    for name, p in params.items():
        noise = stream(seed, "modelcheck.jitter." + name).uniform(-jitter, jitter, p.shape)
        p.data = p.data + noise.astype(p.data.dtype)
    return params


def full_loss_closure(params: dict[str, Tensor], cfg: ModelConfig, batch: dict[str, np.ndarray]):
    def loss_fn() -> Tensor:
        out = forward_batch(params, cfg, batch["cams"], batch["tacs"], batch["proprio"],
                            gt_chunk=batch["chunk"], eps=batch["eps"], train=True,
                            want_recon=True)
        l1 = l1_action(out.chunk, Tensor(batch["chunk"], dtype=cfg.dtype), mask=batch["mask"])
        kl = kl_gaussian(out.mu, out.logvar)
        rec = recon_mse(out.recon, Tensor(batch["tacs"], dtype=cfg.dtype))
        con = infonce(out.e_v, out.e_t, cfg.tau_con)
        total, _ = total_loss(l1, kl, rec, con, cfg.lambda_kl, cfg.lambda_rec,
                              cfg.lambda_con, cfg.tau_con)
        return total
    return loss_fn


def check_model_grads(cfg: ModelConfig, seed: int = 0, tol: float = 1e-4,
                      eps: float = 1e-5, max_coords: int = 32,
                      workers: int = 1) -> GradCheckReport:
    if cfg.precision != "f64":
        cfg = cfg.replace(precision="f64")
    params = checkable_params(cfg, seed)
    batch = synthetic_batch(cfg, seed)
    loss_fn = full_loss_closure(params, cfg, batch)
    return grad_check(loss_fn, params, eps=eps, tol=tol, max_coords=max_coords, seed=seed,
                      workers=workers)


def module_rollup(report: GradCheckReport) -> dict[str, float]:
    """Max relative error per top-level parameter prefix."""
    groups: dict[str, float] = {}
    for name, err in report.max_rel_err.items():
        key = name.split(".", 1)[0]
        groups[key] = max(groups.get(key, 0.0), err)
    return groups
