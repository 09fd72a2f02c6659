import numpy as np
import pytest

from tacfuse import autodiff as ad
from tacfuse.autodiff import ShapeError, Tensor
from tacfuse.config import desk_config, paper_config
from tacfuse.encoders import (ValidationError, decode_tactile, encode_tactile,
                              encode_visual, init_tactile_decoder_params,
                              init_tactile_params, init_visual_params)
from tacfuse.gradcheck import grad_check
from tacfuse.losses import recon_mse
from tacfuse.rng import stream


@pytest.fixture(scope="module")
def desk64():
    return desk_config(precision="f64")


@pytest.fixture(scope="module")
def desk_params(desk64):
    p = {}
    p.update(init_visual_params(desk64, 0))
    p.update(init_tactile_params(desk64, 0))
    p.update(init_tactile_decoder_params(desk64, 0))
    return p


class TestVisualEncoder:
    def test_desk_token_shape(self, desk64, desk_params):
        imgs = stream(0, "v").uniform(0, 1, (desk64.cameras, 3, 64, 64))
        tokens = encode_visual(Tensor(imgs), desk_params, desk64)
        assert tokens.shape == (2 * 16, desk64.d_model)

    def test_batched_token_shape(self, desk64, desk_params):
        imgs = stream(1, "v").uniform(0, 1, (3, desk64.cameras, 3, 64, 64))
        tokens = encode_visual(Tensor(imgs), desk_params, desk64)
        assert tokens.shape == (3, 32, desk64.d_model)

    def test_paper_config_token_count_is_3nv(self):
        cfg = paper_config(precision="f64")
        nv = cfg.vis_tokens_per_camera
        assert cfg.cameras == 3
        assert cfg.num_visual_tokens == 3 * nv

    def test_identical_images_differ_only_by_embeddings(self, desk64, desk_params):
        img = stream(2, "v").uniform(0, 1, (3, 64, 64))
        tokens = encode_visual(Tensor(np.stack([img, img])), desk_params, desk64)
        nv = desk64.vis_tokens_per_camera
        block0 = tokens.data[:nv] - (desk_params["vis.pos"].data[0] + desk_params["vis.cam"].data[0])
        block1 = tokens.data[nv:] - (desk_params["vis.pos"].data[1] + desk_params["vis.cam"].data[1])
        np.testing.assert_allclose(block0, block1, atol=1e-10)

    def test_camera_permutation_permutes_blocks(self, desk64, desk_params):
        rng = stream(3, "v")
        imgs = rng.uniform(0, 1, (2, 3, 64, 64))
        t01 = encode_visual(Tensor(imgs), desk_params, desk64)
        # swap cameras and their embeddings
        p2 = dict(desk_params)
        p2["vis.pos"] = Tensor(desk_params["vis.pos"].data[::-1].copy())
        p2["vis.cam"] = Tensor(desk_params["vis.cam"].data[::-1].copy())
        t10 = encode_visual(Tensor(imgs[::-1].copy()), p2, desk64)
        nv = desk64.vis_tokens_per_camera
        np.testing.assert_allclose(t10.data[nv:], t01.data[:nv], atol=1e-12)
        np.testing.assert_allclose(t10.data[:nv], t01.data[nv:], atol=1e-12)

    def test_wrong_resolution_names_camera(self, desk64, desk_params):
        bad = [np.zeros((3, 64, 64)), np.zeros((3, 32, 64))]
        with pytest.raises(ShapeError, match="camera 1"):
            encode_visual(bad, desk_params, desk64)


class TestTactileEncoder:
    def test_desk_single_token_per_sensor(self, desk64, desk_params):
        tacs = stream(4, "t").uniform(0, 1, (2, 1, 32, 32))
        tokens = encode_tactile(Tensor(tacs), desk_params, desk64)
        assert tokens.shape == (2, desk64.d_model)
        assert desk64.tac_tokens_per_sensor == 1

    def test_paper_resolution_gives_196_tokens(self):
        cfg = paper_config()
        assert cfg.tac_tokens_per_sensor == 196

    def test_zero_images_identical_across_sensors_up_to_embeddings(self, desk64, desk_params):
        tokens = encode_tactile(Tensor(np.zeros((2, 1, 32, 32))), desk_params, desk64)
        t0 = tokens.data[0] - (desk_params["tac.pos"].data[0, 0] + desk_params["tac.sensor"].data[0, 0])
        t1 = tokens.data[1] - (desk_params["tac.pos"].data[1, 0] + desk_params["tac.sensor"].data[1, 0])
        np.testing.assert_allclose(t0, t1, atol=1e-10)

    def test_out_of_range_pixels_rejected(self, desk64, desk_params):
        bad = np.zeros((2, 1, 32, 32))
        bad[0, 0, 5, 5] = 1.5
        with pytest.raises(ValidationError, match="out of range"):
            encode_tactile(Tensor(bad), desk_params, desk64)

    def test_channel_progression_is_fixed(self, desk64, desk_params):
        for i, c in enumerate((32, 64, 128, 256, 512)):
            assert desk_params[f"tac.conv{i}.w"].shape[0] == c


class TestTactileDecoder:
    def test_output_matches_input_shape_and_range(self, desk64, desk_params):
        tacs = stream(5, "t").uniform(0, 1, (2, 1, 32, 32))
        tokens = encode_tactile(Tensor(tacs), desk_params, desk64)
        recon = decode_tactile(tokens, desk_params, desk64)
        assert recon.shape == (2, 1, 32, 32)
        assert np.all(recon.data >= 0.0) and np.all(recon.data <= 1.0)

    def test_token_count_mismatch(self, desk64, desk_params):
        with pytest.raises(ShapeError):
            decode_tactile(Tensor(np.zeros((5, desk64.d_model))), desk_params, desk64)


@pytest.mark.slow
def test_paper_dims_dry_run_shapes():
    # shapes only, never trained; tactile 448x448 is the recorded resize assumption
    cfg = paper_config(precision="f32")
    p = {}
    p.update(init_visual_params(cfg, 0))
    p.update(init_tactile_params(cfg, 0))
    rng = stream(6, "paper")
    imgs = rng.uniform(0, 1, (cfg.cameras, 3, cfg.cam_h, cfg.cam_w)).astype(np.float32)
    with ad.no_grad():
        v = encode_visual(Tensor(imgs, dtype=np.float32), p, cfg)
    assert v.shape == (cfg.cameras * cfg.vis_tokens_per_camera, 512)
    tacs = rng.uniform(0, 1, (cfg.sensors, 3, 448, 448)).astype(np.float32)
    with ad.no_grad():
        t = encode_tactile(Tensor(tacs, dtype=np.float32), p, cfg)
    assert t.shape == (cfg.sensors * 196, 512)


def test_gradcheck_through_encoders_and_decoder(desk64):
    cfg = desk64
    params = {}
    params.update(init_visual_params(cfg, 7))
    params.update(init_tactile_params(cfg, 7))
    params.update(init_tactile_decoder_params(cfg, 7))
    for p in params.values():
        p.data = p.data + stream(8, "jit").uniform(-0.03, 0.03, p.shape)
    rng = stream(9, "gc")
    imgs = rng.uniform(0, 1, (cfg.cameras, 3, 64, 64))
    tacs = rng.uniform(0.1, 0.9, (cfg.sensors, 1, 32, 32))
    tgt = rng.normal(size=(32, cfg.d_model))

    def loss():
        v = encode_visual(Tensor(imgs), params, cfg)
        t = encode_tactile(Tensor(tacs), params, cfg)
        recon = decode_tactile(t, params, cfg)
        dv = v - Tensor(tgt)
        return ad.tsum(dv * dv) * 0.01 + recon_mse(recon, Tensor(tacs))

    report = grad_check(loss, params, eps=1e-5, tol=1e-4, max_coords=6, workers=2)
    assert report.all_passed, {k: v for k, v in report.max_rel_err.items() if v > 1e-4}
