"""CVAE action-chunking policy.

Training pipeline: encode camera and tactile streams, cross-attend,
gate, fuse, prepend a latent-style token and a proprioception token,
run the transformer encoder, then decode an action chunk from learned
query tokens. The style encoder (a small transformer over the ground
truth chunk) produces the latent posterior; at inference the latent is
the prior mean (zero), so infer_chunk and forward_train share one code
path.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig
from .encoders import (_embed_init, _linear_init, _zeros, decode_tactile,
                       encode_tactile, encode_visual, init_tactile_decoder_params,
                       init_tactile_params, init_visual_params)
from .fusion import (compute_gate, cross_attend, init_fusion_params,
                     init_gate_params, init_mha_params, multi_head_attention,
                     reciprocal_fuse)


@dataclasses.dataclass
class PolicyOutput:
    chunk: Tensor
    mu: Tensor | None = None
    logvar: Tensor | None = None
    recon: Tensor | None = None
    e_v: Tensor | None = None
    e_t: Tensor | None = None
    alpha: Tensor | None = None
    enc_attn: np.ndarray | None = None  # last encoder layer, (B,h,N,N)
    dec_attn: np.ndarray | None = None  # decoder cross-attention, (B,h,k,N)


def _init_ln(p: dict, prefix: str, d: int, dt) -> None:
    p[f"{prefix}.g"] = Tensor(np.ones(d, dtype=dt), requires_grad=True)
    p[f"{prefix}.b"] = _zeros((d,), dt)


def _init_transformer_layer(p: dict, prefix: str, cfg: ModelConfig, seed: int) -> None:
    dt = cfg.dtype
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    p.update(init_mha_params(f"{prefix}.attn", d, seed, dt))
    _init_ln(p, f"{prefix}.ln1", d, dt)
    p[f"{prefix}.ffn.w1"] = _linear_init(seed, f"{prefix}.ffn.w1", d, f, dt)
    p[f"{prefix}.ffn.b1"] = _zeros((f,), dt)
    p[f"{prefix}.ffn.w2"] = _linear_init(seed, f"{prefix}.ffn.w2", f, d, dt)
    p[f"{prefix}.ffn.b2"] = _zeros((d,), dt)
    _init_ln(p, f"{prefix}.ln2", d, dt)


def _init_decoder_layer(p: dict, prefix: str, cfg: ModelConfig, seed: int) -> None:
    dt = cfg.dtype
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    p.update(init_mha_params(f"{prefix}.self", d, seed, dt))
    _init_ln(p, f"{prefix}.ln1", d, dt)
    p.update(init_mha_params(f"{prefix}.cross", d, seed, dt))
    _init_ln(p, f"{prefix}.ln2", d, dt)
    p[f"{prefix}.ffn.w1"] = _linear_init(seed, f"{prefix}.ffn.w1", d, f, dt)
    p[f"{prefix}.ffn.b1"] = _zeros((f,), dt)
    p[f"{prefix}.ffn.w2"] = _linear_init(seed, f"{prefix}.ffn.w2", f, d, dt)
    p[f"{prefix}.ffn.b2"] = _zeros((d,), dt)
    _init_ln(p, f"{prefix}.ln3", d, dt)


def init_policy_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    dt = cfg.dtype
    d = cfg.d_model
    p: dict[str, Tensor] = {}
    p.update(init_visual_params(cfg, seed))
    p.update(init_tactile_params(cfg, seed))
    p.update(init_tactile_decoder_params(cfg, seed))
    p.update(init_fusion_params(cfg, seed))
    p.update(init_gate_params(cfg, seed))

    p["pol.z.w"] = _linear_init(seed, "pol.z.w", cfg.z_dim, d, dt)
    p["pol.z.b"] = _zeros((d,), dt)
    p["pol.z.type"] = _embed_init(seed, "pol.z.type", (1, d), dt)
    p["pol.prop.w"] = _linear_init(seed, "pol.prop.w", cfg.proprio_dim, d, dt)
    p["pol.prop.b"] = _zeros((d,), dt)
    p["pol.prop.type"] = _embed_init(seed, "pol.prop.type", (1, d), dt)
    for l in range(cfg.enc_layers):
        _init_transformer_layer(p, f"pol.enc{l}", cfg, seed)
    _init_ln(p, "pol.enc_out", d, dt)
    p["pol.dec.query"] = _embed_init(seed, "pol.dec.query", (cfg.chunk, d), dt)
    for l in range(cfg.dec_layers):
        _init_decoder_layer(p, f"pol.dec{l}", cfg, seed)
    _init_ln(p, "pol.dec_out", d, dt)
    p["pol.head.w"] = _linear_init(seed, "pol.head.w", d, cfg.action_dim, dt, scale=0.1)
    p["pol.head.b"] = _zeros((cfg.action_dim,), dt)

    p["sty.token"] = _embed_init(seed, "sty.token", (1, d), dt)
    p["sty.prop.w"] = _linear_init(seed, "sty.prop.w", cfg.proprio_dim, d, dt)
    p["sty.prop.b"] = _zeros((d,), dt)
    p["sty.act.w"] = _linear_init(seed, "sty.act.w", cfg.action_dim, d, dt)
    p["sty.act.b"] = _zeros((d,), dt)
    p["sty.pos"] = _embed_init(seed, "sty.pos", (cfg.chunk + 2, d), dt)
    for l in range(cfg.style_layers):
        _init_transformer_layer(p, f"sty.enc{l}", cfg, seed)
    _init_ln(p, "sty.enc_out", d, dt)
    p["sty.out.w"] = _linear_init(seed, "sty.out.w", d, 2 * cfg.z_dim, dt, scale=0.1)
    p["sty.out.b"] = _zeros((2 * cfg.z_dim,), dt)

    for side in ("v", "t"):
        p[f"con.{side}.w1"] = _linear_init(seed, f"con.{side}.w1", d, d, dt)
        p[f"con.{side}.b1"] = _zeros((d,), dt)
        p[f"con.{side}.w2"] = _linear_init(seed, f"con.{side}.w2", d, cfg.contrast_dim, dt)
        p[f"con.{side}.b2"] = _zeros((cfg.contrast_dim,), dt)
    return p


def _broadcast_rows(row: Tensor, b: int) -> Tensor:
    """(N,D) learned embedding -> (B,N,D) with gradient summed back."""
    zeros = Tensor(np.zeros((b, 1, 1), dtype=row.data.dtype))
    return ad.reshape(row, (1,) + row.shape) + zeros


def _ln(x: Tensor, params: dict, prefix: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _transformer_layer(x: Tensor, params: dict, prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    # pre-LN residual blocks: stable at desk-scale learning rates without a
    # pretrained backbone
    h = _ln(x, params, f"{prefix}.ln1")
    attn_out, attn_w = multi_head_attention(h, h, h, params, f"{prefix}.attn", heads)
    x = x + attn_out
    h = _ln(x, params, f"{prefix}.ln2")
    h = ad.relu(ad.linear(h, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
    h = ad.linear(h, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return x + h, attn_w


def _decoder_layer(q: Tensor, mem: Tensor, params: dict, prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    h = _ln(q, params, f"{prefix}.ln1")
    sa, _ = multi_head_attention(h, h, h, params, f"{prefix}.self", heads)
    q = q + sa
    h = _ln(q, params, f"{prefix}.ln2")
    ca, ca_w = multi_head_attention(h, mem, mem, params, f"{prefix}.cross", heads)
    q = q + ca
    h = _ln(q, params, f"{prefix}.ln3")
    h = ad.relu(ad.linear(h, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
    h = ad.linear(h, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return q + h, ca_w


def embed_proprio(x, params: dict, cfg: ModelConfig) -> Tensor:
    """Proprio vector -> a single policy token (1,D) or (B,1,D)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=cfg.dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, -1))
    if x.shape[-1] != cfg.proprio_dim:
        raise ShapeError(f"embed_proprio expects dim {cfg.proprio_dim}, got {x.shape}")
    tok = ad.linear(x, params["pol.prop.w"], params["pol.prop.b"])
    tok = ad.reshape(tok, (x.shape[0], 1, cfg.d_model)) + params["pol.prop.type"]
    return tok[0] if squeeze else tok


def encode_style(chunk, proprio, params: dict, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Posterior over the latent from the ground-truth chunk: (mu, logvar)."""
    if not isinstance(chunk, Tensor):
        chunk = Tensor(np.asarray(chunk), dtype=cfg.dtype)
    if not isinstance(proprio, Tensor):
        proprio = Tensor(np.asarray(proprio), dtype=cfg.dtype)
    squeeze = chunk.ndim == 2
    if squeeze:
        chunk = ad.reshape(chunk, (1,) + chunk.shape)
        proprio = ad.reshape(proprio, (1, -1))
    if chunk.shape[1:] != (cfg.chunk, cfg.action_dim):
        raise ShapeError(f"encode_style expects chunk (*,{cfg.chunk},{cfg.action_dim}), got {chunk.shape}")
    b = chunk.shape[0]
    style = _broadcast_rows(params["sty.token"], b)
    prop = ad.linear(proprio, params["sty.prop.w"], params["sty.prop.b"])
    prop = ad.reshape(prop, (b, 1, cfg.d_model))
    acts = ad.linear(chunk, params["sty.act.w"], params["sty.act.b"])
    seq = ad.concat([style, prop, acts], axis=1) + params["sty.pos"]
    for l in range(cfg.style_layers):
        seq, _ = _transformer_layer(seq, params, f"sty.enc{l}", cfg.heads)
    seq = _ln(seq, params, "sty.enc_out")
    head = ad.linear(seq[:, 0, :], params["sty.out.w"], params["sty.out.b"])
    mu = head[:, :cfg.z_dim]
    logvar = head[:, cfg.z_dim:]
    if squeeze:
        mu, logvar = mu[0], logvar[0]
    return mu, logvar


def _pool_project(tokens: Tensor, params: dict, side: str) -> Tensor:
    pooled = ad.tmean(tokens, axis=1)
    h = ad.relu(ad.linear(pooled, params[f"con.{side}.w1"], params[f"con.{side}.b1"]))
    return ad.linear(h, params[f"con.{side}.w2"], params[f"con.{side}.b2"])


def forward_batch(params: dict, cfg: ModelConfig, cams: np.ndarray, tacs: np.ndarray,
                  proprio: np.ndarray, gt_chunk: np.ndarray | None = None,
                  eps: np.ndarray | None = None, variant: str = "none",
                  train: bool = True, want_recon: bool = True,
                  want_attn: bool = False) -> PolicyOutput:
    """Run the full pipeline on a batch.

    cams (B,cameras,C,H,W), tacs (B,sensors,C,h,w), proprio (B,P) already
    normalized, gt_chunk (B,k,A) normalized (training only). `variant`
    wires the ablations: no-xattn bypasses cross-attention, no-gate pins
    alpha to 0.5, no-reciprocal forwards both enhanced streams unmixed.
    """
    v = encode_visual(Tensor(cams, dtype=cfg.dtype), params, cfg)
    t = encode_tactile(Tensor(tacs, dtype=cfg.dtype), params, cfg)
    b = v.shape[0]

    if variant == "no-xattn":
        v_tilde, t_tilde = v, t
    else:
        v_tilde, t_tilde = cross_attend(v, t, params, cfg)

    if variant == "no-gate":
        alpha = Tensor(np.full((b, 1), 0.5, dtype=cfg.dtype))
    else:
        alpha = compute_gate(Tensor(proprio, dtype=cfg.dtype), params, cfg)

    if variant == "no-reciprocal":
        v_star, t_star = v_tilde, t_tilde
    else:
        v_star, t_star, alpha = reciprocal_fuse(v, t, v_tilde, t_tilde, alpha)

    mu = logvar = None
    if train:
        if gt_chunk is None:
            raise ValueError("forward in training mode requires gt_chunk")
        mu, logvar = encode_style(Tensor(gt_chunk, dtype=cfg.dtype), Tensor(proprio, dtype=cfg.dtype), params, cfg)
        if eps is None:
            eps = np.zeros((b, cfg.z_dim))
        z = mu + ad.exp(logvar * 0.5) * Tensor(np.asarray(eps), dtype=cfg.dtype)
    else:
        z = Tensor(np.zeros((b, cfg.z_dim), dtype=cfg.dtype))

    z_tok = ad.linear(z, params["pol.z.w"], params["pol.z.b"])
    z_tok = ad.reshape(z_tok, (b, 1, cfg.d_model)) + params["pol.z.type"]
    prop_tok = embed_proprio(Tensor(proprio, dtype=cfg.dtype), params, cfg)

    seq = ad.concat([z_tok, prop_tok, v_star, t_star], axis=1)
    enc_attn = None
    for l in range(cfg.enc_layers):
        seq, attn_w = _transformer_layer(seq, params, f"pol.enc{l}", cfg.heads)
        if want_attn and l == cfg.enc_layers - 1:
            enc_attn = attn_w.data
    seq = _ln(seq, params, "pol.enc_out")
    queries = _broadcast_rows(params["pol.dec.query"], b)
    dec_attn = None
    for l in range(cfg.dec_layers):
        queries, ca_w = _decoder_layer(queries, seq, params, f"pol.dec{l}", cfg.heads)
        dec_attn = ca_w.data if want_attn else None
    queries = _ln(queries, params, "pol.dec_out")
    chunk = ad.linear(queries, params["pol.head.w"], params["pol.head.b"])

    recon = e_v = e_t = None
    if train and want_recon:
        recon = decode_tactile(t, params, cfg)
    if train:
        e_v = _pool_project(v, params, "v")
        e_t = _pool_project(t, params, "t")
    return PolicyOutput(chunk=chunk, mu=mu, logvar=logvar, recon=recon, e_v=e_v, e_t=e_t,
                        alpha=alpha, enc_attn=enc_attn, dec_attn=dec_attn)


def forward_train(obs_cams, obs_tacs, obs_proprio, gt_chunk, params: dict, cfg: ModelConfig,
                  eps: np.ndarray | None = None, variant: str = "none") -> PolicyOutput:
    """Single-observation training forward (batch of one)."""
    out = forward_batch(params, cfg, np.asarray(obs_cams)[None], np.asarray(obs_tacs)[None],
                        np.asarray(obs_proprio)[None], np.asarray(gt_chunk)[None],
                        eps=None if eps is None else np.asarray(eps)[None], variant=variant)
    return out


def infer_chunk(params: dict, cfg: ModelConfig, obs_cams, obs_tacs, obs_proprio,
                variant: str = "none", want_attn: bool = False):
    """Predict a normalized action chunk with the latent at the prior mean.

    Returns (chunk (k,A) ndarray, PolicyOutput).
    """
    with ad.no_grad():
        out = forward_batch(params, cfg, np.asarray(obs_cams)[None], np.asarray(obs_tacs)[None],
                            np.asarray(obs_proprio)[None], train=False, want_recon=False,
                            variant=variant, want_attn=want_attn)
    return out.chunk.data[0], out


def temporal_ensemble(chunk_buffer: list[tuple[int, np.ndarray]], m: float, t: int) -> np.ndarray:
    """Blend every prediction covering step t with weights exp(-m*age)."""
    if not chunk_buffer:
        raise ValueError("temporal_ensemble: empty chunk buffer")
    preds, weights = [], []
    for t_pred, chunk in chunk_buffer:
        idx = t - t_pred
        if 0 <= idx < chunk.shape[0]:
            preds.append(chunk[idx])
            weights.append(np.exp(-m * (t - t_pred)))
    if not preds:
        raise ValueError(f"temporal_ensemble: no prediction covers step {t}")
    w = np.asarray(weights)
    w = w / w.sum()
    return (np.stack(preds) * w[:, None]).sum(axis=0)


def attention_camera_maps(enc_attn: np.ndarray, cfg: ModelConfig) -> list[np.ndarray]:
    """Head- and query-averaged attention into each camera's visual tokens.

    Input is the last encoder layer's weights (B,h,N,N) for a batch of
    one; output is one (vis_h, vis_w) map per camera.
    """
    mean_in = enc_attn[0].mean(axis=(0, 1))  # (N,)
    nv = cfg.vis_tokens_per_camera
    vh, vw = cfg.vis_map_hw
    maps = []
    for c in range(cfg.cameras):
        start = 2 + c * nv
        maps.append(mean_in[start:start + nv].reshape(vh, vw))
    return maps


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """8-bit binary PGM (P5), min-max normalized per map."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


class RolloutPolicy:
    """Closed-loop driver: re-infers a chunk every `chunk` steps (or every
    step when temporal ensembling is on) and tracks the per-step gate."""

    def __init__(self, params: dict, cfg: ModelConfig, stats, variant: str = "none",
                 ensemble: bool = False, m: float = 0.05, collect_attn: bool = False):
        self.params = params
        self.cfg = cfg
        self.stats = stats
        self.variant = variant
        self.ensemble = ensemble
        self.m = m
        self.collect_attn = collect_attn
        self.attn_frames: list[tuple[int, list[np.ndarray]]] = []
        self.reset()

    def reset(self) -> None:
        self._t = 0
        self._buffer: list[tuple[int, np.ndarray]] = []
        self.last_alpha: float | None = None
        self.attn_frames = []

    def act(self, obs, state=None) -> np.ndarray:
        cfg = self.cfg
        proprio_n = self.stats.normalize_proprio(obs.proprio)
        if self.variant == "no-gate":
            self.last_alpha = 0.5
        else:
            with ad.no_grad():
                a = compute_gate(Tensor(proprio_n[None], dtype=cfg.dtype), self.params, cfg)
            self.last_alpha = float(a.data[0, 0])
        if self.ensemble or self._t % cfg.chunk == 0 or not self._buffer:
            chunk, out = infer_chunk(self.params, cfg, obs.cams, obs.tacs, proprio_n,
                                     variant=self.variant, want_attn=self.collect_attn)
            self._buffer.append((self._t, chunk))
            self._buffer = self._buffer[-8:]
            if self.collect_attn and out.enc_attn is not None:
                self.attn_frames.append((self._t, attention_camera_maps(out.enc_attn, cfg)))
        if self.ensemble:
            a_norm = temporal_ensemble(self._buffer, self.m, self._t)
        else:
            t_pred, chunk = self._buffer[-1]
            a_norm = chunk[min(self._t - t_pred, cfg.chunk - 1)]
        action = self.stats.denormalize_action(a_norm)
        self._t += 1
        return np.clip(action, -1.0, 1.0)
