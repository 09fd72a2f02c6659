"""Modality encoders and the tactile reconstruction decoder.

Camera images become visual tokens through a strided conv stack shared
across cameras (per-camera identity comes from learned embeddings, not
weights). Tactile images go through a dedicated 5-layer CNN with channel
progression 32-64-128-256-512, kernel 4, stride 2, padding 1; the
reconstruction decoder mirrors it with transposed convolutions and a
final sigmoid. Reconstruction reads the pre-fusion tactile tokens so the
objective regularizes the tactile encoder alone.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig
from .rng import stream


class ValidationError(ValueError):
    pass


def _conv_init(seed: int, name: str, cout: int, cin: int, k: int, dtype) -> Tensor:
    fan_in = cin * k * k
    w = stream(seed, name).normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
    return Tensor(w.astype(dtype), requires_grad=True)


def _linear_init(seed: int, name: str, din: int, dout: int, dtype, scale: float = 1.0) -> Tensor:
    std = scale * np.sqrt(2.0 / (din + dout))
    w = stream(seed, name).normal(0.0, std, size=(din, dout))
    return Tensor(w.astype(dtype), requires_grad=True)


def _embed_init(seed: int, name: str, shape: tuple, dtype) -> Tensor:
    # token content is O(1) after the conv stacks; embeddings init at a
    # comparable scale so position/identity is addressable from step one
    e = stream(seed, name).normal(0.0, 0.25, size=shape)
    return Tensor(e.astype(dtype), requires_grad=True)


def _zeros(shape: tuple, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_visual_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    dt = cfg.dtype
    p: dict[str, Tensor] = {}
    cin = cfg.cam_channels
    for i, cout in enumerate(cfg.vis_channels):
        p[f"vis.conv{i}.w"] = _conv_init(seed, f"vis.conv{i}.w", cout, cin, 4, dt)
        p[f"vis.conv{i}.b"] = _zeros((cout,), dt)
        cin = cout
    p["vis.proj.w"] = _linear_init(seed, "vis.proj.w", cfg.vis_channels[-1], cfg.d_model, dt)
    p["vis.proj.b"] = _zeros((cfg.d_model,), dt)
    p["vis.pos"] = _embed_init(seed, "vis.pos", (cfg.cameras, cfg.vis_tokens_per_camera, cfg.d_model), dt)
    p["vis.cam"] = _embed_init(seed, "vis.cam", (cfg.cameras, 1, cfg.d_model), dt)
    return p


def init_tactile_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    dt = cfg.dtype
    p: dict[str, Tensor] = {}
    cin = cfg.tac_channels
    for i, cout in enumerate(cfg.tac_enc_channels):
        p[f"tac.conv{i}.w"] = _conv_init(seed, f"tac.conv{i}.w", cout, cin, 4, dt)
        p[f"tac.conv{i}.b"] = _zeros((cout,), dt)
        cin = cout
    p["tac.proj.w"] = _linear_init(seed, "tac.proj.w", cfg.tac_enc_channels[-1], cfg.d_model, dt)
    p["tac.proj.b"] = _zeros((cfg.d_model,), dt)
    p["tac.pos"] = _embed_init(seed, "tac.pos", (cfg.sensors, cfg.tac_tokens_per_sensor, cfg.d_model), dt)
    p["tac.sensor"] = _embed_init(seed, "tac.sensor", (cfg.sensors, 1, cfg.d_model), dt)
    return p


def init_tactile_decoder_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    dt = cfg.dtype
    p: dict[str, Tensor] = {}
    p["tacdec.proj.w"] = _linear_init(seed, "tacdec.proj.w", cfg.d_model, cfg.tac_enc_channels[-1], dt)
    p["tacdec.proj.b"] = _zeros((cfg.tac_enc_channels[-1],), dt)
    chain = list(cfg.tac_enc_channels[::-1]) + [cfg.tac_channels]
    for i, (cout_side, cin_side) in enumerate(zip(chain[:-1], chain[1:])):
        # conv_transpose kernels keep conv layout (Cout, Cin, k, k); the layer maps cout_side -> cin_side
        p[f"tacdec.conv{i}.w"] = _conv_init(seed, f"tacdec.conv{i}.w", cout_side, cin_side, 4, dt)
        p[f"tacdec.conv{i}.b"] = _zeros((cin_side,), dt)
    return p


def _fold_streams(x: Tensor, expect_streams: int, expect_chw: tuple, what: str) -> tuple[Tensor, int]:
    """(B,S,C,H,W) or (S,C,H,W) -> (B*S,C,H,W); returns batch size."""
    if x.ndim == 4:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise ShapeError(f"{what}: expected (S,C,H,W) or (B,S,C,H,W), got {x.shape}")
    b, s = x.shape[0], x.shape[1]
    if s != expect_streams:
        raise ShapeError(f"{what}: expected {expect_streams} streams, got {s} (shape {x.shape})")
    for i in range(s):
        if x.shape[2:] != expect_chw:
            raise ShapeError(f"{what} stream {i}: expected {expect_chw}, got {x.shape[2:]}")
    return ad.reshape(x, (b * s,) + x.shape[2:]), b


def encode_visual(images, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Per-camera images -> visual tokens, camera-major.

    Accepts (cameras,C,H,W) for a single frame or (B,cameras,C,H,W) for a
    batch; returns (cameras*N_v, D) or (B, cameras*N_v, D) accordingly.
    """
    if isinstance(images, (list, tuple)):
        for i, im in enumerate(images):
            im = np.asarray(im)
            if im.shape != (cfg.cam_channels, cfg.cam_h, cfg.cam_w):
                raise ShapeError(
                    f"camera {i}: expected {(cfg.cam_channels, cfg.cam_h, cfg.cam_w)}, got {im.shape}")
        images = Tensor(np.stack([np.asarray(im) for im in images]), dtype=cfg.dtype)
    x = images if isinstance(images, Tensor) else Tensor(images, dtype=cfg.dtype)
    squeeze = x.ndim == 4
    x, b = _fold_streams(x, cfg.cameras, (cfg.cam_channels, cfg.cam_h, cfg.cam_w), "encode_visual")
    x = x * 2.0 - 1.0  # center [0,1] pixels for the conv stack
    for i in range(len(cfg.vis_channels)):
        x = ad.conv2d(x, params[f"vis.conv{i}.w"], stride=2, pad=1)
        x = ad.relu(x + ad.reshape(params[f"vis.conv{i}.b"], (-1, 1, 1)))
    cv = cfg.vis_channels[-1]
    nv = cfg.vis_tokens_per_camera
    x = ad.reshape(x, (b * cfg.cameras, cv, nv))
    x = ad.transpose(x, (0, 2, 1))
    x = ad.linear(x, params["vis.proj.w"], params["vis.proj.b"])
    x = ad.reshape(x, (b, cfg.cameras, nv, cfg.d_model))
    x = x + params["vis.pos"] + params["vis.cam"]
    tokens = ad.reshape(x, (b, cfg.cameras * nv, cfg.d_model))
    return tokens[0] if squeeze else tokens


def encode_tactile(tactile, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Per-sensor tactile images -> tactile tokens, sensor-major.

    Pixel values must lie in [0,1].
    """
    if isinstance(tactile, (list, tuple)):
        tactile = Tensor(np.stack([np.asarray(t) for t in tactile]), dtype=cfg.dtype)
    x = tactile if isinstance(tactile, Tensor) else Tensor(tactile, dtype=cfg.dtype)
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"tactile pixels out of range [0,1]: min={lo:.4f} max={hi:.4f}")
    squeeze = x.ndim == 4
    x, b = _fold_streams(x, cfg.sensors, (cfg.tac_channels, cfg.tac_h, cfg.tac_w), "encode_tactile")
    x = x * 2.0 - 1.0  # center [0,1] pixels for the conv stack
    for i in range(5):
        x = ad.conv2d(x, params[f"tac.conv{i}.w"], stride=2, pad=1)
        x = ad.relu(x + ad.reshape(params[f"tac.conv{i}.b"], (-1, 1, 1)))
    ct = cfg.tac_enc_channels[-1]
    nt = cfg.tac_tokens_per_sensor
    x = ad.reshape(x, (b * cfg.sensors, ct, nt))
    x = ad.transpose(x, (0, 2, 1))
    x = ad.linear(x, params["tac.proj.w"], params["tac.proj.b"])
    x = ad.reshape(x, (b, cfg.sensors, nt, cfg.d_model))
    x = x + params["tac.pos"] + params["tac.sensor"]
    tokens = ad.reshape(x, (b, cfg.sensors * nt, cfg.d_model))
    return tokens[0] if squeeze else tokens


def decode_tactile(tokens: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Reconstruct tactile images from (pre-fusion) tactile tokens.

    Returns (sensors,C,H,W) or (B,sensors,C,H,W), matching the token rank;
    output pixels are in [0,1] by the final sigmoid.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    b, n, d = tokens.shape
    nt = cfg.tac_tokens_per_sensor
    if n != cfg.sensors * nt or d != cfg.d_model:
        raise ShapeError(
            f"decode_tactile: expected token matrix (*, {cfg.sensors * nt}, {cfg.d_model}), got {tokens.shape}")
    ct = cfg.tac_enc_channels[-1]
    th, tw = cfg.tac_map_hw
    x = ad.linear(tokens, params["tacdec.proj.w"], params["tacdec.proj.b"])
    x = ad.reshape(x, (b * cfg.sensors, nt, ct))
    x = ad.transpose(x, (0, 2, 1))
    x = ad.reshape(x, (b * cfg.sensors, ct, th, tw))
    for i in range(5):
        x = ad.conv_transpose2d(x, params[f"tacdec.conv{i}.w"], stride=2, pad=1)
        x = x + ad.reshape(params[f"tacdec.conv{i}.b"], (-1, 1, 1))
        x = ad.relu(x) if i < 4 else ad.sigmoid(x)
    out = ad.reshape(x, (b, cfg.sensors) + x.shape[1:])
    return out[0] if squeeze else out
