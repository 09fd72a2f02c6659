"""Training objectives: masked L1 on action chunks, Gaussian KL to the
standard-normal prior, tactile reconstruction MSE, and an InfoNCE-style
contrastive alignment term, combined as

    total = l1 + lambda_kl * kl + lambda_rec * rec + lambda_con * con

KL is summed over the latent dimension and averaged over the batch;
reconstruction uses a per-pixel mean so the weight is resolution
independent; contrastive negatives are the other tactile embeddings in
the batch (asymmetric, as in the denominator of the alignment loss).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclasses.dataclass
class LossBreakdown:
    l1: float
    kl: float
    rec: float
    con: float
    total: float
    lambda_kl: float
    lambda_rec: float
    lambda_con: float
    tau_con: float


def l1_action(pred: Tensor, gt: Tensor, mask: Tensor | np.ndarray | None = None) -> Tensor:
    """Mean absolute error over chunk entries; masked rows contribute 0.

    mask, when given, has one entry per chunk row (shape chunk[:-1]) with
    1 for valid rows; the mean runs over valid entries only.
    """
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt, pred)
    if pred.shape != gt.shape:
        raise ShapeError(f"l1_action shapes differ: {pred.shape} vs {gt.shape}")
    diff = ad.absolute(pred - gt)
    if mask is None:
        return ad.tmean(diff)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != pred.shape[:-1]:
        raise ShapeError(f"l1_action mask shape {m.shape} does not match chunk rows {pred.shape[:-1]}")
    m = m.astype(pred.data.dtype)
    valid = float(m.sum()) * pred.shape[-1]
    if valid == 0:
        raise ValueError("l1_action: mask selects no valid entries")
    weighted = diff * Tensor(m[..., None], dtype=pred.data.dtype)
    return ad.tsum(weighted) * (1.0 / valid)


def kl_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over the latent
    dimension and averaged over any batch axis."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar, mu)
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_gaussian shapes differ: {mu.shape} vs {logvar.shape}")
    per = (mu * mu + ad.exp(logvar) - 1.0 - logvar) * 0.5
    per_sample = ad.tsum(per, axis=-1)
    return ad.tmean(per_sample) if per_sample.ndim > 0 else per_sample


def recon_mse(recon: Tensor, target: Tensor) -> Tensor:
    """Per-pixel mean squared reconstruction error."""
    recon, target = ad.as_tensor(recon), ad.as_tensor(target, recon)
    if recon.shape != target.shape:
        raise ShapeError(f"recon_mse shapes differ: {recon.shape} vs {target.shape}")
    d = recon - target
    return ad.tmean(d * d)


def infonce(e_v: Tensor, e_t: Tensor, tau: float) -> Tensor:
    """Contrastive alignment of paired embeddings.

    Embeddings are L2-normalized here; similarity is the dot product of
    the normalized vectors. For row i the positive is e_t[i] and the
    negatives are the other tactile embeddings in the batch.
    """
    e_v, e_t = ad.as_tensor(e_v), ad.as_tensor(e_t, e_v)
    if e_v.ndim != 2 or e_v.shape != e_t.shape:
        raise ShapeError(f"infonce expects matching (B,P) embeddings, got {e_v.shape} vs {e_t.shape}")
    b = e_v.shape[0]
    if b < 1:
        raise ValueError("infonce requires batch size >= 1")
    for name, e in (("visual", e_v), ("tactile", e_t)):
        norms = np.sqrt((e.data ** 2).sum(axis=1))
        if (norms < 1e-12).any():
            raise ValueError(f"infonce: zero-norm {name} embedding before normalization")

    def normalize(e: Tensor) -> Tensor:
        sq = ad.tsum(e * e, axis=1, keepdims=True)
        return e / ad.sqrt(sq)

    ev = normalize(e_v)
    et = normalize(e_t)
    sims = ad.matmul(ev, ad.transpose(et)) * (1.0 / tau)
    shift = sims.data.max(axis=1, keepdims=True)
    lse = ad.log(ad.tsum(ad.exp(sims - shift), axis=1)) + Tensor(shift[:, 0], dtype=sims.data.dtype)
    pos = ad.tsum(sims * Tensor(np.eye(b, dtype=sims.data.dtype)), axis=1)
    return ad.tmean(lse - pos)


def total_loss(l1: Tensor, kl: Tensor, rec: Tensor, con: Tensor,
               lambda_kl: float, lambda_rec: float, lambda_con: float,
               tau_con: float) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the four objectives plus a float-level breakdown.

    The breakdown satisfies total == l1 + lambda_kl*kl + lambda_rec*rec +
    lambda_con*con exactly in double arithmetic.
    """
    parts = {"l1": l1, "kl": kl, "rec": rec, "con": con}
    for name, t in parts.items():
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"non-finite loss component '{name}'")
    total = l1 + lambda_kl * kl + lambda_rec * rec + lambda_con * con
    fl1, fkl, frec, fcon = (float(t.data) for t in (l1, kl, rec, con))
    breakdown = LossBreakdown(
        l1=fl1, kl=fkl, rec=frec, con=fcon,
        total=fl1 + lambda_kl * fkl + lambda_rec * frec + lambda_con * fcon,
        lambda_kl=lambda_kl, lambda_rec=lambda_rec, lambda_con=lambda_con, tau_con=tau_con,
    )
    return total, breakdown
