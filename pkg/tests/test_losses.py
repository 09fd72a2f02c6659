import numpy as np
import pytest

from tacfuse.autodiff import ShapeError, Tensor
from tacfuse.losses import infonce, kl_gaussian, l1_action, recon_mse, total_loss
from tacfuse.rng import stream


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestL1Action:
    def test_equal_is_zero(self):
        x = stream(0, "l1").normal(size=(8, 3))
        assert l1_action(t64(x), t64(x)).item() == 0.0

    def test_offset_by_one(self):
        x = stream(1, "l1").normal(size=(8, 3))
        assert l1_action(t64(x + 1.0), t64(x)).item() == pytest.approx(1.0, abs=1e-9)

    def test_matches_loop_oracle_100_cases(self):
        rng = stream(2, "l1")
        for _ in range(100):
            k, a_dim = int(rng.integers(1, 12)), int(rng.integers(1, 5))
            p, g = rng.normal(size=(k, a_dim)), rng.normal(size=(k, a_dim))
            acc = 0.0
            for i in range(k):
                for j in range(a_dim):
                    acc += abs(p[i, j] - g[i, j])
            want = acc / (k * a_dim)
            assert l1_action(t64(p), t64(g)).item() == pytest.approx(want, rel=1e-12)

    def test_masked_rows_contribute_zero(self):
        rng = stream(3, "l1")
        p = rng.normal(size=(6, 3))
        g = rng.normal(size=(6, 3))
        mask = np.array([1, 1, 1, 1, 0, 0], dtype=np.float64)
        base = l1_action(t64(p), t64(g), mask=mask).item()
        g2 = g.copy()
        g2[4:] += 100.0  # perturb only padded rows
        assert l1_action(t64(p), t64(g2), mask=mask).item() == pytest.approx(base, rel=1e-12)
        want = np.abs(p[:4] - g[:4]).mean()
        assert base == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l1_action(t64(np.zeros((2, 3))), t64(np.zeros((3, 2))))


class TestKLGaussian:
    def test_standard_normal_is_zero(self):
        assert kl_gaussian(t64(np.zeros(4)), t64(np.zeros(4))).item() == 0.0

    def test_unit_mean(self):
        assert kl_gaussian(t64([1.0]), t64([0.0])).item() == pytest.approx(0.5, abs=1e-12)

    def test_unit_logvar(self):
        want = 0.5 * (np.e - 2.0)
        assert kl_gaussian(t64([0.0]), t64([1.0])).item() == pytest.approx(want, abs=1e-9)

    def test_sum_over_dim_mean_over_batch(self):
        mu = np.array([[1.0, 1.0], [0.0, 0.0]])
        lv = np.zeros((2, 2))
        # sample KLs: (0.5+0.5)=1.0 and 0.0 -> batch mean 0.5
        assert kl_gaussian(t64(mu), t64(lv)).item() == pytest.approx(0.5, abs=1e-12)


class TestReconMSE:
    def test_equal_zero(self):
        x = stream(4, "rec").uniform(0, 1, size=(2, 1, 8, 8))
        assert recon_mse(t64(x), t64(x)).item() == 0.0

    def test_uniform_offset(self):
        x = stream(5, "rec").uniform(0, 0.5, size=(2, 1, 8, 8))
        assert recon_mse(t64(x + 0.1), t64(x)).item() == pytest.approx(0.01, abs=1e-9)

    def test_matches_loop_oracle_100_cases(self):
        rng = stream(6, "rec")
        for _ in range(100):
            hw = int(rng.integers(2, 7))
            a, b = rng.uniform(0, 1, size=(hw, hw)), rng.uniform(0, 1, size=(hw, hw))
            acc = 0.0
            for i in range(hw):
                for j in range(hw):
                    acc += (a[i, j] - b[i, j]) ** 2
            assert recon_mse(t64(a), t64(b)).item() == pytest.approx(acc / (hw * hw), rel=1e-12)


class TestInfoNCE:
    def test_single_sample_is_zero(self):
        e = stream(7, "nce").normal(size=(1, 8))
        assert infonce(t64(e), t64(e), tau=0.07).item() == 0.0

    def test_identical_embeddings_log_b(self):
        for b in (2, 4, 7):
            e = np.tile(stream(8, "nce").normal(size=(1, 16)), (b, 1))
            got = infonce(t64(e), t64(e), tau=0.07).item()
            assert got == pytest.approx(np.log(b), abs=1e-9)

    def test_orthonormal_pair_tau_one(self):
        e = np.eye(2)
        want = np.log(1.0 + np.exp(-1.0))
        assert infonce(t64(e), t64(e), tau=1.0).item() == pytest.approx(want, abs=1e-9)

    def test_nonnegative_and_positive_for_nondegenerate(self):
        rng = stream(9, "nce")
        for _ in range(20):
            b = int(rng.integers(2, 9))
            ev, et = rng.normal(size=(b, 12)), rng.normal(size=(b, 12))
            val = infonce(t64(ev), t64(et), tau=0.07).item()
            assert val > 0.0

    def test_decreases_when_positive_similarity_rises(self):
        rng = stream(10, "nce")
        ev = rng.normal(size=(4, 8))
        et = rng.normal(size=(4, 8))
        base = infonce(t64(ev), t64(et), tau=0.5).item()
        et_better = et.copy()
        et_better[0] = et_better[0] * 0.3 + 0.7 * ev[0] / np.linalg.norm(ev[0]) * np.linalg.norm(et[0])
        improved = infonce(t64(ev), t64(et_better), tau=0.5).item()
        assert improved < base

    def test_empty_batch_rejected(self):
        with pytest.raises((ValueError, ShapeError)):
            infonce(t64(np.zeros((0, 4))), t64(np.zeros((0, 4))), tau=0.07)

    def test_zero_norm_embedding_rejected(self):
        e = np.ones((2, 4))
        bad = e.copy()
        bad[1] = 0.0
        with pytest.raises(ValueError, match="zero-norm"):
            infonce(t64(e), t64(bad), tau=0.07)


class TestTotalLoss:
    def test_paper_weights_identity(self):
        one = t64(1.0)
        total, bd = total_loss(one, one, one, one, 10.0, 0.5, 0.1, 0.07)
        assert bd.total == pytest.approx(11.6, abs=1e-12)
        assert total.item() == pytest.approx(11.6, abs=1e-9)

    def test_breakdown_identity_exact(self):
        rng = stream(11, "tot")
        for _ in range(50):
            l1, kl, rec, con = (t64(abs(rng.normal())) for _ in range(4))
            lk, lr, lc = rng.uniform(0, 10), rng.uniform(0, 1), rng.uniform(0, 1)
            _, bd = total_loss(l1, kl, rec, con, lk, lr, lc, 0.07)
            want = bd.l1 + bd.lambda_kl * bd.kl + bd.lambda_rec * bd.rec + bd.lambda_con * bd.con
            assert abs(bd.total - want) <= 1e-12

    def test_ablation_path_reduces_to_l1(self):
        l1 = t64(0.7)
        zero = t64(0.0)
        _, bd = total_loss(l1, zero, zero, zero, 10.0, 0.0, 0.0, 0.07)
        assert bd.total == pytest.approx(0.7, abs=1e-12)

    def test_nonfinite_component_aborts_with_name(self):
        with pytest.raises(FloatingPointError, match="rec"):
            total_loss(t64(1.0), t64(1.0), t64(np.nan), t64(1.0), 10.0, 0.5, 0.1, 0.07)
