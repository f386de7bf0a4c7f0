"""CLI contract: subcommands, exit codes, config echo, output formats; plus
workflow-level checks that are awkward to drive through flags."""

import json
from types import SimpleNamespace

import numpy as np
import pytest

from evident import workflows
from evident.cli import main
from evident.workflows import SourceOutput


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    code = run("simulate", "--n-train", 6, "--n-val", 2, "--n-test", 2,
               "--seed", 3, "--out", root, "--height", 16, "--width", 16)
    assert code == 0
    return root


@pytest.fixture(scope="module")
def niw_ckpt(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "niw.ckpt"
    code = run("train", "--data", dataset, "--head", "niw", "--epochs", 2,
               "--seed", 1, "--out", path)
    assert code == 0
    return path


class TestSimulate:
    def test_counts_and_layout(self, dataset):
        for split, n in (("train", 6), ("val", 2), ("test", 2)):
            listing = json.loads(
                (dataset / split / "manifest.json").read_text())
            assert listing["schema"] == "evident-data-v1"
            assert len(listing["samples"]) == n
        assert (dataset / "config.json").is_file()

    def test_deterministic_bytes(self, tmp_path):
        args = ("simulate", "--n-train", 2, "--n-val", 1, "--n-test", 1,
                "--seed", 9, "--height", 16, "--width", 16)
        run(*args, "--out", tmp_path / "a")
        run(*args, "--out", tmp_path / "b")
        files_a = sorted((tmp_path / "a").rglob("*.darr"))
        files_b = sorted((tmp_path / "b").rglob("*.darr"))
        assert len(files_a) == len(files_b) > 0
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes()

    def test_unwritable_out_exits_3(self):
        assert run("simulate", "--n-train", 1, "--n-val", 0, "--n-test", 0,
                   "--out", "/dev/null/nested") == 3

    def test_bad_config_exits_2(self, tmp_path):
        assert run("simulate", "--n-train", 1, "--n-val", 0, "--n-test", 0,
                   "--height", 2, "--out", tmp_path / "x") == 2

    def test_unknown_flag_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            run("simulate", "--frobnicate", 1, "--out", tmp_path / "x")
        assert err.value.code == 2


class TestTrain:
    def test_writes_checkpoint_log_and_config(self, dataset, tmp_path):
        out = tmp_path / "m.ckpt"
        assert run("train", "--data", dataset, "--head", "niw", "--epochs",
                   1, "--out", out) == 0
        assert out.is_file()
        log = json.loads(out.with_suffix(".log.json").read_text())
        assert len(log["epochs"]) == 1
        echo = json.loads(out.with_suffix(".config.json").read_text())
        assert echo["command"] == "train"
        assert echo["head"] == "niw"

    def test_lambda_evi_changes_training(self, dataset, tmp_path):
        losses = {}
        for lam in ("0", "0.5"):
            out = tmp_path / f"m{lam}.ckpt"
            run("train", "--data", dataset, "--head", "niw", "--epochs", 2,
                "--seed", 0, "--lambda-evi", lam, "--out", out)
            log = json.loads(out.with_suffix(".log.json").read_text())
            losses[lam] = log["epochs"][-1]["loss"]
        assert losses["0"] != losses["0.5"]

    def test_retrain_from_echoed_config_reproduces(self, dataset, tmp_path):
        out1 = tmp_path / "m1.ckpt"
        run("train", "--data", dataset, "--head", "nig", "--epochs", 2,
            "--seed", 4, "--out", out1)
        out2 = tmp_path / "m2.ckpt"
        assert run("train", "--config", out1.with_suffix(".config.json"),
                   "--out", out2) == 0
        b1 = out1.read_bytes()
        b2 = out2.read_bytes()
        assert b1 == b2

    def test_missing_data_exits_3(self, tmp_path):
        assert run("train", "--data", tmp_path / "nowhere", "--out",
                   tmp_path / "m.ckpt") == 3


class TestEval:
    def test_report_and_curves(self, dataset, niw_ckpt, tmp_path):
        report_path = tmp_path / "report.json"
        assert run("eval", "--model", niw_ckpt, "--data", dataset,
                   "--report", report_path, "--curves",
                   tmp_path / "curves") == 0
        report = json.loads(report_path.read_text())
        assert report["schema"] == "evident-report-v1"
        assert len(report["per_image"]) == 2
        record = report["per_image"][0]
        for key in ("id", "mae", "rmse", "aurc", "ause", "nll", "n_valid"):
            assert key in record
        assert set(report["pointcloud"]) == {
            "accuracy", "completeness", "chamfer", "f1", "threshold"}
        for suffix in ("risk_coverage_perimg", "risk_coverage_pooled",
                       "sparsification_perimg", "sparsification_pooled"):
            csv = tmp_path / f"curves_{suffix}.csv"
            assert csv.is_file()
            assert csv.read_text().splitlines()[0] == "x,y_unc,y_oracle"

    def test_nll_independent_of_align(self, dataset, niw_ckpt, tmp_path):
        reports = {}
        for align in ("sim3", "none"):
            path = tmp_path / f"r_{align}.json"
            run("eval", "--model", niw_ckpt, "--data", dataset, "--align",
                align, "--report", path)
            reports[align] = json.loads(path.read_text())
        assert (reports["sim3"]["dataset"]["nll"]
                == reports["none"]["dataset"]["nll"])

    def test_conf_readout_omits_nll(self, dataset, niw_ckpt, tmp_path,
                                    capsys):
        path = tmp_path / "conf.json"
        assert run("eval", "--model", niw_ckpt, "--data", dataset,
                   "--readout", "conf", "--report", path) == 0
        report = json.loads(path.read_text())
        assert report["dataset"]["nll"] is None
        assert "NLL omitted" in capsys.readouterr().err

    def test_epi_readout_on_hetero_exits_5(self, dataset, tmp_path):
        ckpt = tmp_path / "het.ckpt"
        run("train", "--data", dataset, "--head", "hetero", "--epochs", 1,
            "--out", ckpt)
        assert run("eval", "--model", ckpt, "--data", dataset, "--readout",
                   "epi", "--report", tmp_path / "r.json") == 5

    def test_hetero_head_uses_gaussian_nll(self, dataset, tmp_path):
        ckpt = tmp_path / "het2.ckpt"
        run("train", "--data", dataset, "--head", "hetero", "--epochs", 1,
            "--out", ckpt)
        path = tmp_path / "het_report.json"
        assert run("eval", "--model", ckpt, "--data", dataset, "--readout",
                   "total", "--report", path) == 0
        assert json.loads(path.read_text())["dataset"]["nll"] is not None

    def test_single_member_zero_floor_exits_5(self, dataset, niw_ckpt,
                                              tmp_path):
        assert run("eval", "--baseline", "ensemble", "--members", niw_ckpt,
                   "--sigma0", "0", "--data", dataset, "--report",
                   tmp_path / "r.json") == 5

    def test_mcdropout_needs_dropout_ckpt(self, dataset, niw_ckpt, tmp_path):
        assert run("eval", "--baseline", "mcdropout", "--model", niw_ckpt,
                   "--T", 4, "--readout", "total", "--data", dataset,
                   "--report", tmp_path / "r.json") == 5

    def test_mcdropout_end_to_end(self, dataset, tmp_path):
        ckpt = tmp_path / "dm.ckpt"
        run("train", "--data", dataset, "--head", "hetero", "--dropout",
            "0.2", "--epochs", 1, "--out", ckpt)
        path = tmp_path / "mcd.json"
        assert run("eval", "--baseline", "mcdropout", "--model", ckpt,
                   "--T", 4, "--readout", "total", "--sigma0", "1e-4",
                   "--data", dataset, "--report", path) == 0
        report = json.loads(path.read_text())
        assert report["config"]["method"] == "mcdropout"
        assert np.isfinite(report["dataset"]["nll"])

    def test_k_disagrees_with_members_exits_5(self, dataset, niw_ckpt,
                                              tmp_path):
        assert run("eval", "--baseline", "ensemble", "--K", 3, "--members",
                   niw_ckpt, "--data", dataset, "--readout", "total",
                   "--report", tmp_path / "r.json") == 5


class TestGradcheck:
    def test_pass(self):
        for head in ("niw", "nig", "hetero"):
            assert run("gradcheck", "--head", head, "--trials", 10) == 0

    def test_impossible_tolerance_exits_6_with_replay(self, tmp_path,
                                                      monkeypatch):
        monkeypatch.chdir(tmp_path)
        replay = tmp_path / "fail.json"
        assert run("gradcheck", "--head", "niw", "--trials", 5, "--tol", "0",
                   "--replay-out", replay) == 6
        draw = json.loads(replay.read_text())
        # the serialized draw replays to the same max relative error
        assert workflows.gradcheck_replay(draw) == draw["max_rel_err"]
        assert run("gradcheck", "--replay", replay, "--tol", "1e-4") == 0


class TestRingcheck:
    def test_radius_zero_exits_2(self, dataset, niw_ckpt, tmp_path):
        assert run("ringcheck", "--data", dataset, "--model", niw_ckpt,
                   "--radius", 0, "--report", tmp_path / "r.json") == 2

    def test_report_structure(self, dataset, niw_ckpt, tmp_path):
        path = tmp_path / "ring.json"
        assert run("ringcheck", "--data", dataset, "--model", niw_ckpt,
                   "--radius", 2, "--report", path) == 0
        report = json.loads(path.read_text())
        ring = report["ring"]
        assert ring["ring_radius"] == 2
        assert ring["n_evaluated"] + ring["n_skipped"] == 2
        assert len(ring["per_sample"]) == 2


def fake_samples(rng, n=3, h=12, w=12):
    out = []
    for i in range(n):
        gt = rng.uniform(-1, 1, size=(h, w, 3)) + np.array([0, 0, 2.5])
        out.append(SimpleNamespace(
            id=f"img{i}", features=rng.normal(size=(h, w, 4)), gt=gt,
            base_pred=gt + 0.05 * rng.normal(size=(h, w, 3)),
            mask=np.ones((h, w), dtype=bool),
            sigma=np.full((h, w), 0.05),
            hard_mask=np.zeros((h, w), dtype=bool)))
    return out


class TestWorkflowLevel:
    def test_injected_oracle_uncertainty_gives_zero_ause(self):
        rng = np.random.default_rng(0)
        samples = fake_samples(rng)

        def oracle_source(sample):
            from evident.align import point_errors
            e = point_errors(sample.base_pred, sample.gt, sample.mask,
                             align=True)
            return SourceOutput(refined=np.asarray(sample.base_pred, float),
                                u=e.e, nll_kind="conf", nll_maps={})

        report, _ = workflows.evaluate_source(oracle_source, samples,
                                              align=True)
        for record in report["per_image"]:
            assert record["ause"] == pytest.approx(0.0, abs=1e-15)
            assert record["spearman_rho"] == pytest.approx(1.0)

    def test_mae_invariant_under_global_sim3(self):
        from evident.align import Sim3Transform, apply_sim3

        rng = np.random.default_rng(1)
        samples = fake_samples(rng)
        t = Sim3Transform(scale=2.3,
                          rotation=np.array([[0, -1, 0],
                                             [1, 0, 0],
                                             [0, 0, 1]], dtype=float),
                          translation=np.array([0.5, -1.0, 2.0]))
        perturbed = [SimpleNamespace(
            id=s.id, features=s.features, gt=s.gt,
            base_pred=apply_sim3(t, s.base_pred), mask=s.mask,
            sigma=s.sigma, hard_mask=s.hard_mask) for s in samples]
        src = workflows.make_conf_source()
        base, _ = workflows.evaluate_source(src, samples, align=True)
        pert, _ = workflows.evaluate_source(src, perturbed, align=True)
        assert pert["dataset"]["mae"] == pytest.approx(
            base["dataset"]["mae"], abs=1e-8)

    def test_sigma0_grid_search_returns_grid_value(self):
        rng = np.random.default_rng(2)
        samples = fake_samples(rng)

        def factory(sigma0):
            def source(sample):
                mean = np.asarray(sample.base_pred, float)
                var = np.full_like(mean, sigma0 + 1e-12)
                return SourceOutput(refined=mean, u=var.sum(axis=2),
                                    nll_kind="gaussian_diag",
                                    nll_maps={"mean": mean, "var": var})
            return source

        best = workflows.select_sigma0(factory, samples)
        assert best in workflows.SIGMA0_GRID
        # residuals are ~0.05-scale, so the best floor is the closest to
        # the true noise variance 0.0025
        assert best == pytest.approx(1e-3)

    def test_worker_count_env(self, monkeypatch):
        from evident._threads import worker_count

        monkeypatch.setenv("EVIDENT_THREADS", "2")
        assert worker_count(8) == 2
        monkeypatch.setenv("EVIDENT_THREADS", "0")
        assert worker_count(8) >= 1
        monkeypatch.delenv("EVIDENT_THREADS")
        assert worker_count(1) == 1

    def test_eval_independent_of_worker_count(self, monkeypatch):
        rng = np.random.default_rng(3)
        samples = fake_samples(rng, n=5)
        src = workflows.make_conf_source()
        monkeypatch.setenv("EVIDENT_THREADS", "1")
        seq, _ = workflows.evaluate_source(src, samples)
        monkeypatch.setenv("EVIDENT_THREADS", "4")
        par, _ = workflows.evaluate_source(src, samples)
        assert json.dumps(seq, sort_keys=True) == json.dumps(par,
                                                             sort_keys=True)

    def test_dataset_metrics_are_per_image_means(self):
        rng = np.random.default_rng(4)
        samples = fake_samples(rng, n=4)
        report, _ = workflows.evaluate_source(workflows.make_conf_source(),
                                              samples)
        for key in ("mae", "rmse", "aurc", "ause"):
            per_image = [r[key] for r in report["per_image"]]
            assert report["dataset"][key] == pytest.approx(
                np.mean(per_image), abs=1e-15)
