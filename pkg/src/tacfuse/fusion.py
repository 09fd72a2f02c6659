"""Cross-modal fusion: bidirectional cross-attention, the
proprioception-conditioned scalar gate, and reciprocal convex mixing.

The two cross-attention blocks (tactile->visual and visual->tactile)
have independent parameters and their own residual layer norms. The
gate maps the proprioceptive vector through a 3-layer MLP to a logit,
divides by a learnable temperature clamped at 0.1 from below, and
squashes through a sigmoid. Fusion is the convex pair

    V* = (1 - a) V + a V~        T* = a T + (1 - a) T~

so pushing reliance toward one modality's enhanced stream proportionally
down-weights the other's.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig
from .encoders import ValidationError, _embed_init, _linear_init, _zeros

TAU_FLOOR = 0.1


def init_mha_params(prefix: str, d: int, seed: int, dtype) -> dict[str, Tensor]:
    # No key bias: a shared shift of all keys moves every score in a row
    # by the same amount, which the softmax cancels exactly.
    p = {}
    for nm in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{nm}"] = _linear_init(seed, f"{prefix}.{nm}", d, d, dtype)
    for nm in ("bq", "bv", "bo"):
        p[f"{prefix}.{nm}"] = _zeros((d,), dtype)
    return p


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: dict[str, Tensor],
                         prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with `heads` heads, no masking.

    Inputs are (N,D) or (B,N,D); returns (output, attention weights) where
    the weights have shape (B,heads,Nq,Nk). Scale is 1/sqrt(D/heads).
    """
    squeeze = q_in.ndim == 2
    if squeeze:
        q_in = ad.reshape(q_in, (1,) + q_in.shape)
        k_in = ad.reshape(k_in, (1,) + k_in.shape)
        v_in = ad.reshape(v_in, (1,) + v_in.shape)
    d = params[f"{prefix}.wq"].shape[0]
    if q_in.shape[-1] != d or k_in.shape[-1] != d or v_in.shape[-1] != d:
        raise ShapeError(
            f"attention feature dims {q_in.shape[-1]}/{k_in.shape[-1]}/{v_in.shape[-1]} do not match params dim {d}")
    if d % heads != 0:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads
    b, nq = q_in.shape[0], q_in.shape[1]
    nk = k_in.shape[1]

    def split(x: Tensor, n: int) -> Tensor:
        x = ad.reshape(x, (b, n, heads, dh))
        return ad.transpose(x, (0, 2, 1, 3))

    q = split(ad.linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), nq)
    k = split(ad.matmul(k_in, params[f"{prefix}.wk"]), nk)
    v = split(ad.linear(v_in, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), nk)
    scores = ad.matmul(q, ad.swap_last2(k)) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, nq, d))
    out = ad.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    if squeeze:
        out = out[0]
    return out, attn


def init_fusion_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    dt = cfg.dtype
    p = {}
    p.update(init_mha_params("fuse.t2v", cfg.d_model, seed, dt))
    p.update(init_mha_params("fuse.v2t", cfg.d_model, seed, dt))
    for side in ("t2v", "v2t"):
        p[f"fuse.{side}.ln.g"] = Tensor(np.ones(cfg.d_model, dtype=dt), requires_grad=True)
        p[f"fuse.{side}.ln.b"] = _zeros((cfg.d_model,), dt)
    return p


def cross_attend(v: Tensor, t: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Mutual enhancement: T~ = LN(T + MHA(Q=T,K=V,V=V)), V~ = LN(V + MHA(Q=V,K=T,V=T)).

    Both outputs are computed from the same pre-update V and T.
    """
    if v.shape[-1] != t.shape[-1]:
        raise ShapeError(f"cross_attend feature dims differ: V {v.shape} vs T {t.shape}")
    t_enh, _ = multi_head_attention(t, v, v, params, "fuse.t2v", cfg.heads)
    v_enh, _ = multi_head_attention(v, t, t, params, "fuse.v2t", cfg.heads)
    t_tilde = ad.layer_norm(t + t_enh, params["fuse.t2v.ln.g"], params["fuse.t2v.ln.b"])
    v_tilde = ad.layer_norm(v + v_enh, params["fuse.v2t.ln.g"], params["fuse.v2t.ln.b"])
    return v_tilde, t_tilde


def init_gate_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    dt = cfg.dtype
    p = {}
    dims = (cfg.proprio_dim,) + tuple(cfg.gate_hidden) + (1,)
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        if last:
            # zero final layer: the gate opens training at exactly 0.5
            p[f"gate.l{i}.w"] = _zeros((din, dout), dt)
        else:
            p[f"gate.l{i}.w"] = _linear_init(seed, f"gate.l{i}.w", din, dout, dt)
        p[f"gate.l{i}.b"] = _zeros((dout,), dt)
    p["gate.tau"] = Tensor(np.ones(1, dtype=dt), requires_grad=True)
    return p


def compute_gate(x: Tensor | np.ndarray, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Scalar modality gate alpha in (0,1) from the proprioceptive state.

    alpha = sigmoid(g(x) / max(tau, 0.1)); accepts (P,) or (B,P) and
    returns (1,1) or (B,1).
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=cfg.dtype)
    if not np.isfinite(x.data).all():
        raise ValidationError("non-finite proprioceptive input to gate")
    if x.ndim == 1:
        x = ad.reshape(x, (1, -1))
    if x.shape[-1] != cfg.proprio_dim:
        raise ShapeError(f"gate expects proprio dim {cfg.proprio_dim}, got {x.shape}")
    h = x
    n_layers = len(cfg.gate_hidden) + 1
    for i in range(n_layers):
        h = ad.linear(h, params[f"gate.l{i}.w"], params[f"gate.l{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    tau_eff = ad.clamp_min(params["gate.tau"], TAU_FLOOR)
    return ad.sigmoid(h / tau_eff)


def project_tau(params: dict[str, Tensor]) -> None:
    """Clamp the gate temperature from below after an optimizer step."""
    if "gate.tau" in params:
        np.maximum(params["gate.tau"].data, TAU_FLOOR, out=params["gate.tau"].data)


def reciprocal_fuse(v: Tensor, t: Tensor, v_tilde: Tensor, t_tilde: Tensor,
                    alpha) -> tuple[Tensor, Tensor, Tensor]:
    """Convex reciprocal mixing of raw and cross-enhanced token streams.

    alpha may be a float or a (B,1) tensor; returns (V*, T*, alpha).
    """
    if v.shape != v_tilde.shape:
        raise ShapeError(f"reciprocal_fuse: V {v.shape} vs V~ {v_tilde.shape}")
    if t.shape != t_tilde.shape:
        raise ShapeError(f"reciprocal_fuse: T {t.shape} vs T~ {t_tilde.shape}")
    if not isinstance(alpha, Tensor):
        alpha = Tensor(np.asarray(alpha, dtype=v.data.dtype))
    a = alpha
    if a.ndim == 2 and v.ndim == 3:
        a = ad.reshape(a, (a.shape[0], 1, 1))
    one = 1.0
    v_star = (one - a) * v + a * v_tilde
    t_star = a * t + (one - a) * t_tilde
    return v_star, t_star, alpha
