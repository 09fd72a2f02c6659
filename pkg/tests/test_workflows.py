"""End-to-end workflow checks that need trained models or full CLI runs.

Everything here rides on the same cached fixtures as the acceptance
suite, so repeated runs are cheap.
"""

import csv

import numpy as np
import pytest

from conftest import RECIPE, cache_dir, dataset_dir, trained_run

from tacfuse import pegsim as ps
from tacfuse.cli import main
from tacfuse.config import desk_config
from tacfuse.policy import RolloutPolicy, infer_chunk
from tacfuse.training import load_policy_checkpoint


@pytest.fixture(scope="module")
def overfit_policy():
    # test_acceptance's overfit fixture shares this cache directory
    run = cache_dir(f"run_overfit_loose_t{RECIPE['overfit_steps']}")
    if not (run / "checkpoint.rtackpt").exists():
        pytest.skip("overfit checkpoint not built yet (run test_acceptance first)")
    cfg = desk_config()
    params, stats = load_policy_checkpoint(run / "checkpoint.rtackpt", cfg)
    return params, stats, cfg


@pytest.mark.slow
class TestChunkedControl:
    def test_openloop_and_ensembled_both_complete_memorized_episode(self, overfit_policy):
        params, stats, cfg = overfit_policy
        from tacfuse.dataset import load_manifest
        seeds = [e["seed"] for e in load_manifest(cache_dir("data_overfit_loose10"))["episodes"]]
        done = {}
        for ensemble in (False, True):
            pol = RolloutPolicy(params, cfg, stats, ensemble=ensemble, m=0.05)
            m = ps.evaluate_rollouts(pol, 4, "loose", horizon=RECIPE["horizon"], seeds=seeds[:4])
            done[ensemble] = m.insert_rate
        assert done[False] >= 0.75, done
        assert done[True] >= 0.75, done

    def test_gate_value_is_load_bearing(self, overfit_policy):
        # substituting a constant gate changes the predicted chunk on a
        # contact-phase observation
        params, stats, cfg = overfit_policy
        st = ps.reset(3, "tight")
        for _ in range(RECIPE["horizon"]):
            a = ps.expert_action(st, 0.02)
            st = ps.step(st, a)
            if st.contact:
                break
        assert st.contact
        obs = ps.render(st)
        prop = stats.normalize_proprio(obs.proprio)

        chunks = {}
        for alpha in (0.1, 0.9):
            frozen = dict(params)
            # constant-gate network: zero MLP, bias = logit(alpha), tau = 1
            from tacfuse.autodiff import Tensor
            hid = cfg.gate_hidden[-1]
            frozen["gate.l0.w"] = Tensor(np.zeros_like(params["gate.l0.w"].data))
            frozen["gate.l1.w"] = Tensor(np.zeros_like(params["gate.l1.w"].data))
            frozen["gate.l2.w"] = Tensor(np.zeros((hid, 1), dtype=np.float32))
            frozen["gate.l2.b"] = Tensor(np.array([np.log(alpha / (1 - alpha))], dtype=np.float32))
            frozen["gate.tau"] = Tensor(np.array([1.0], dtype=np.float32))
            chunk, out = infer_chunk(frozen, cfg, obs.cams, obs.tacs, prop)
            assert abs(float(out.alpha.data[0, 0]) - alpha) < 1e-5
            chunks[alpha] = chunk
        delta = np.abs(chunks[0.1] - chunks[0.9]).max()
        assert delta > 0.0, "gate value must influence the predicted chunk"


@pytest.mark.slow
class TestTrainTrend:
    def test_total_loss_falls_below_quarter_of_early_loss(self):
        data = dataset_dir("loose", 50, seed=200)
        run = cache_dir("run_trend_loose50_t2000")
        if not (run / "train_log.csv").exists():
            rc = main(["train", "--data", str(data), "--steps", "2000",
                       "--out", str(run), "--seed", "0"])
            assert rc == 0
        rows = list(csv.DictReader(open(run / "train_log.csv")))
        step10 = float(rows[9]["total"])
        final = np.mean([float(r["total"]) for r in rows[-50:]])
        assert final < 0.25 * step10, (step10, final)


@pytest.mark.slow
class TestGradcheckCLI:
    def test_pass_at_default_tolerance(self, capsys):
        rc = main(["gradcheck", "--tol", "1e-4", "--coords", "2"])
        out = capsys.readouterr().out
        assert rc == 0, out
        assert "PASS" in out

    def test_overtight_tolerance_reports_failures(self, capsys):
        rc = main(["gradcheck", "--tol", "1e-12", "--coords", "2"])
        out = capsys.readouterr().out
        assert rc == 1
        assert "FAIL" in out
        assert "rel err" in out

    def test_deterministic_across_invocations(self, capsys):
        main(["gradcheck", "--tol", "1e-4", "--coords", "2"])
        first = capsys.readouterr().out
        main(["gradcheck", "--tol", "1e-4", "--coords", "2"])
        second = capsys.readouterr().out
        assert first == second


@pytest.mark.slow
def test_expert_oracle_rates():
    # calibrated-then-frozen scripted expert quality gates
    loose = ps.evaluate_rollouts(ps.ExpertPolicy(0.05), 200, "loose",
                                 horizon=RECIPE["horizon"], base_seed=70_000)
    assert loose.insert_rate >= 0.98
    tight = ps.evaluate_rollouts(ps.ExpertPolicy(0.05), 200, "tight",
                                 horizon=RECIPE["horizon"], base_seed=71_000)
    assert tight.insert_rate >= 0.95


@pytest.mark.slow
def test_random_policy_oracle():
    m = ps.evaluate_rollouts(ps.RandomPolicy(3), 100, "tight", horizon=RECIPE["horizon"])
    assert m.insert_rate <= 0.02


@pytest.mark.slow
def test_retention_rate_at_loose_clearance():
    from tacfuse.dataset import gen_dataset
    import tempfile
    with tempfile.TemporaryDirectory() as td:
        summary = gen_dataset(td, episodes=100, clearance="loose", seed=900,
                              horizon=RECIPE["horizon"])
        assert summary["retained"] / summary["attempts"] >= 0.95
