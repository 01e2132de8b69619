import json
import math

import numpy as np
import pytest

from fbsqueeze.experiments import (
    MomentsSpec,
    RelaxationSpec,
    SteadySpec,
    SweepSpec,
    TrajectorySpec,
    compare_outputs,
    moments_series,
    relaxation,
    rerun,
    steady_point,
    sweep,
    trajectories,
)
from fbsqueeze.experiments.io import fmt, read_config, read_csv
from fbsqueeze.master_eq import FeedbackParams
from fbsqueeze.moments import uncertainty_product_ss
from fbsqueeze.sme import run_trajectory
from fbsqueeze.states import thermal_state
from oracles import FROZEN


def grid(path):
    header, data = read_csv(path)
    return np.array([float(v) for v in header[1:]]), data[:, 0], data[:, 1:]


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestSpecs:
    @pytest.mark.parametrize("kw", [
        {"n_x": 1}, {"x_min": 2.0, "x_max": 1.0}, {"p_min": 0.0}, {"spacing": "cubic"},
        {"kappa_f": 0.0}, {"engine": "exact"}, {"engine": "moments", "include_unitary": True},
    ])
    def test_sweep_validation(self, kw):
        with pytest.raises(ValueError):
            SweepSpec(**kw)

    def test_axes(self):
        s = SweepSpec(x_min=0.5, x_max=4, n_x=8, spacing="linear")
        np.testing.assert_allclose(s.x_axis, np.arange(1, 9) * 0.5)
        assert SweepSpec().p_axis[0] == 0.25 and SweepSpec().p_axis[-1] == pytest.approx(16)

    @pytest.mark.parametrize("kw", [{"betas": ()}, {"betas": (-1,)}, {"kappas": (0,)},
                                    {"t_final": 0}])
    def test_relaxation_validation(self, kw):
        with pytest.raises(ValueError):
            RelaxationSpec(**kw)

    def test_relaxation_times(self):
        t = RelaxationSpec(t_final=1.0, sample_dt=0.25).times()
        np.testing.assert_allclose(t, [0, 0.25, 0.5, 0.75, 1.0])

    @pytest.mark.parametrize("kw", [{"n_traj": 0}, {"beta": 0}, {"dt": 0}, {"scheme": "rk"}])
    def test_trajectory_validation(self, kw):
        with pytest.raises(ValueError):
            TrajectorySpec(**kw)

    def test_params_from_dict(self):
        spec = TrajectorySpec(params={"gamma_x": 2.0, "gamma_p": 1.0, "kappa_f": 0.5})
        assert spec.params == FeedbackParams(2.0, 1.0, 0.5)
        assert TrajectorySpec(**json.loads(json.dumps(spec.to_dict()))) == spec

    def test_moments_spec_validation(self):
        with pytest.raises(ValueError):
            MomentsSpec(engine="full")
        with pytest.raises(ValueError):
            MomentsSpec(params=FeedbackParams(9, 4, 3))


class TestIO:
    def test_fmt_round_trips(self, rng):
        for v in rng.standard_normal(50) * 10.0 ** rng.integers(-8, 8, 50):
            assert float(fmt(v)) == v
        assert fmt(np.int64(3)) == "3"
        assert fmt(float("nan")) == "nan"

    def test_read_config(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\ngamma-x = 9\n--kappa_f: 1,2  # trailing\n\n")
        assert read_config(p) == {"gamma_x": "9", "kappa_f": "1,2"}
        p.write_text("no separator here\n")
        with pytest.raises(ValueError):
            read_config(p)


class TestSweep:
    def test_moments_engine_matches_formula(self, tmp_path):
        res = sweep(SweepSpec(n_x=9, n_p=7, kappa_f=1.3), tmp_path)
        ps, xs, prod = grid(tmp_path / "product.csv")
        assert len(xs) == 9 and len(ps) == 7
        for i, gx in enumerate(xs):
            for j, gp in enumerate(ps):
                ref = uncertainty_product_ss(1.3 * gx, 1.3 * gp, 1.3)
                assert prod[i, j] == pytest.approx(ref, rel=1e-12)
        assert res.exit_code == 0
        assert res.manifest["results"]["nan_cells"] == 0

    def test_csv_layout(self, tmp_path):
        sweep(SweepSpec(n_x=3, n_p=4), tmp_path)
        lines = (tmp_path / "r_x.csv").read_text().splitlines()
        assert lines[0].startswith("gamma_x/kappa_f \\ gamma_p/kappa_f,")
        assert len(lines[0].split(",")) == 5
        assert len(lines) == 4
        assert not (tmp_path / "dim.csv").exists()

    def test_full_engine_ideal_line_and_agreement(self, tmp_path):
        spec = SweepSpec(n_x=6, n_p=6, engine="full")
        res = sweep(spec, tmp_path / "full")
        sweep(SweepSpec(n_x=6, n_p=6), tmp_path / "mom")
        assert res.exit_code == 0
        assert res.manifest["truncation"]["status"] == "ok"
        _, _, prod = grid(tmp_path / "full" / "product.csv")
        # symmetric log axes: the anti-diagonal lies on gx gp = 4 kf^2
        anti = prod[np.arange(6), np.arange(6)[::-1]]
        np.testing.assert_allclose(anti, 0.25, rtol=5e-3)
        _, _, rx_full = grid(tmp_path / "full" / "r_x.csv")
        _, _, rx_mom = grid(tmp_path / "mom" / "r_x.csv")
        np.testing.assert_allclose(rx_full, rx_mom, rtol=5e-3)
        _, _, dims = grid(tmp_path / "full" / "dim.csv")
        assert np.all(dims >= 2)

    def test_unitary_minimum_at_coherent_point(self, tmp_path):
        spec = SweepSpec(x_min=0.5, x_max=4, p_min=0.5, p_max=4, n_x=8, n_p=8,
                         spacing="linear", kappa_f=1.5, include_unitary=True,
                         engine="extended")
        res = sweep(spec, tmp_path)
        ps, xs, prod = grid(tmp_path / "product.csv")
        _, _, rx = grid(tmp_path / "r_x.csv")
        i, j = np.unravel_index(np.argmin(prod), prod.shape)
        assert (xs[i], ps[j]) == (2.0, 2.0)
        assert prod[i, j] == pytest.approx(0.25, abs=1e-12)
        assert rx[i, j] == pytest.approx(1.0, abs=1e-12)
        mask = np.ones_like(prod, dtype=bool)
        mask[i, j] = False
        assert np.all(prod[mask] > 0.25 + 1e-6)
        assert res.manifest["results"]["min_product"]["value"] == pytest.approx(0.25)

    def test_unitary_full_engine_spot_check(self, tmp_path):
        spec = SweepSpec(x_min=1, x_max=3, p_min=1, p_max=3, n_x=3, n_p=3, spacing="linear",
                         kappa_f=1.5, include_unitary=True, engine="full")
        sweep(spec, tmp_path / "full")
        sweep(SweepSpec(**{**spec.to_dict(), "engine": "extended"}), tmp_path / "ext")
        for q in ("r_x", "r_p", "product", "purity"):
            a = grid(tmp_path / "full" / f"{q}.csv")[2]
            b = grid(tmp_path / "ext" / f"{q}.csv")[2]
            np.testing.assert_allclose(a, b, rtol=5e-3)

    def test_failed_cells_are_explained(self, tmp_path):
        res = sweep(SweepSpec(n_x=3, n_p=3, engine="full", dim=4), tmp_path)
        _, xs, rx = grid(tmp_path / "r_x.csv")
        ps = grid(tmp_path / "r_x.csv")[0]
        notes = res.manifest["notes"]
        nan_cells = {(float(xs[i]), float(ps[j])) for i, j in zip(*np.nonzero(np.isnan(rx)))}
        assert nan_cells
        noted = {(n["gamma_x/kappa_f"], n["gamma_p/kappa_f"]) for n in notes}
        assert nan_cells == noted
        assert all(n["reason"].startswith("TruncationError") for n in notes)
        assert res.exit_code == 3
        assert res.manifest["truncation"]["status"] == "hard"
        assert res.manifest["results"]["nan_cells"] == len(nan_cells)


class TestRelaxation:
    def test_fig3_series(self, tmp_path):
        spec = RelaxationSpec(betas=(1.0,), kappas=(1.0, 2.0, 3.0), dim=30)
        res = relaxation(spec, tmp_path)
        assert res.exit_code == 0
        series = res.manifest["results"]["series"]
        header, data = read_csv(tmp_path / "relax_beta1_kappa3.csv")
        assert header == ["t", "var_x", "purity"]
        # dim 30 truncates the Boltzmann tail at the 1e-11 level
        assert data[0, 1] == pytest.approx(FROZEN["thermal_beta1_x2"], rel=1e-9)
        assert data[0, 2] == pytest.approx(FROZEN["thermal_beta1_purity"], rel=1e-9)
        last = series[-1]
        assert last["var_x_final"] == pytest.approx(0.35, abs=0.01)
        assert last["purity_final"] == pytest.approx(0.99, abs=0.005)
        settle = [s["settling_time_var_x"] for s in series]
        assert settle[0] > settle[1] > settle[2]
        assert sorted(res.manifest["files"]) == [
            "relax_beta1_kappa1.csv", "relax_beta1_kappa2.csv", "relax_beta1_kappa3.csv"
        ]

    def test_failures_recorded_per_series(self, tmp_path):
        spec = RelaxationSpec(betas=(0.2, 5.0), kappas=(1.0,), dim=6, t_final=1.0)
        res = relaxation(spec, tmp_path)
        assert res.exit_code == 3
        series = res.manifest["results"]["series"]
        assert len(series) == 2 and all("error" in s for s in series)
        assert res.manifest["truncation"]["status"] == "hard"


class TestTrajectories:
    params = FeedbackParams(9.0, 4.0, 3.0, include_unitary=False)

    def test_single_trajectory_matches_run_trajectory(self, tmp_path):
        spec = TrajectorySpec(params=self.params, n_traj=1, t_final=0.2, dim=10, seed_base=17,
                              keep_signals=True)
        res = trajectories(spec, tmp_path)
        rec = run_trajectory(thermal_state(10, 2.0), self.params, 0.2, 1e-3, 17, n_samples=11)
        header, data = read_csv(tmp_path / "traj" / "traj_000017.csv")
        assert header == ["t", "mean_x", "mean_p", "var_x", "var_p", "purity"]
        np.testing.assert_array_equal(data[:, 0], rec.times)
        for k, name in enumerate(header[1:], 1):
            np.testing.assert_array_equal(data[:, k], rec[name])
        _, sig = read_csv(tmp_path / "traj" / "traj_000017_signals.csv")
        np.testing.assert_array_equal(sig[:, 1:], rec.signals)
        side = json.loads((tmp_path / "traj" / "traj_000017.json").read_text())
        assert side["seed"] == 17 and side["dt"] == 1e-3
        assert side["params"]["gamma_x"] == 9.0
        # one record: mean equals the trajectory, zero error bars
        header, ens = read_csv(tmp_path / "ensemble_mean.csv")
        col = dict(zip(header, ens.T))
        np.testing.assert_array_equal(col["var_x"], rec["var_x"])
        np.testing.assert_array_equal(col["mean_x2_stderr"], 0.0)
        assert res.manifest["results"]["n_used"] == 1

    def test_doubling_n_halves_error_variance(self, tmp_path):
        base = dict(params=self.params, t_final=0.2, dim=10, n_samples=5)
        small = trajectories(TrajectorySpec(n_traj=1000, **base), tmp_path / "a")
        large = trajectories(TrajectorySpec(n_traj=2000, seed_base=5000, **base), tmp_path / "b")
        assert small.manifest["results"]["n_failed"] == 0
        ha, a = read_csv(tmp_path / "a" / "ensemble_mean.csv")
        hb, b = read_csv(tmp_path / "b" / "ensemble_mean.csv")
        k = ha.index("mean_x2_stderr")
        ratio = (a[1:, k] / b[1:, k]) ** 2
        np.testing.assert_allclose(ratio, 2.0, rtol=0.2)
        assert np.all(np.abs(a[1:, ha.index("mean_x2_z")]) < 4)
        assert large.manifest["results"]["max_abs_z"]["mean_x2"] < 4

    def test_all_failed_gives_exit_2(self, tmp_path):
        spec = TrajectorySpec(params=FeedbackParams(9.0, 4.0, 3.0), n_traj=3, t_final=0.5,
                              dt=0.05, dim=10, beta=5.0, scheme="euler")
        res = trajectories(spec, tmp_path)
        assert res.exit_code == 2
        assert res.manifest["results"]["n_failed"] == 3
        assert not (tmp_path / "ensemble_mean.csv").exists()


class TestSinglePoint:
    def test_steady_full_and_moment_engines(self, tmp_path):
        res = steady_point(SteadySpec(params=FeedbackParams(9, 4, 3, include_unitary=False)),
                           tmp_path / "f")
        rep = res.manifest["results"]["report"]
        x2, p2, prod = FROZEN["steady_943"]
        assert rep["var_x"] == pytest.approx(x2, rel=1e-6)
        assert rep["uncertainty_product"] == pytest.approx(prod, rel=1e-6)
        res = steady_point(SteadySpec(engine="extended"), tmp_path / "e")
        rep = res.manifest["results"]["report"]
        x2, p2, sym, pur = FROZEN["steady_943_unitary"]
        assert rep["mean_x2"] == pytest.approx(x2, rel=1e-12)
        assert rep["purity"] == pytest.approx(pur, rel=1e-12)
        header, data = read_csv(tmp_path / "e" / "steady.csv")
        assert data.shape == (1, len(header))

    def test_moment_series(self, tmp_path):
        res = moments_series(MomentsSpec(x0=1.0, n_samples=11, t_final=2.0), tmp_path)
        header, data = read_csv(tmp_path / "moments.csv")
        col = dict(zip(header, data.T))
        assert col["var_x"][0] == pytest.approx(FROZEN["thermal_beta1_x2"], rel=1e-12)
        np.testing.assert_allclose(col["mean_x"], np.exp(-3.0 * col["t"]), rtol=1e-12)
        ext = moments_series(MomentsSpec(x0=1.0, n_samples=11, t_final=2.0, engine="extended"),
                             tmp_path / "ext")
        assert ext.manifest["results"]["final"] == pytest.approx(res.manifest["results"]["final"])


class TestReproducibility:
    @pytest.mark.parametrize("kind", ["sweep", "relax", "traj", "steady", "moments"])
    def test_rerun_is_byte_identical(self, kind, tmp_path):
        runners = {
            "sweep": lambda o: sweep(SweepSpec(n_x=3, n_p=3, engine="full"), o),
            "relax": lambda o: relaxation(RelaxationSpec(betas=(2.0,), kappas=(3.0,), dim=16,
                                                         t_final=1.0), o),
            "traj": lambda o: trajectories(TrajectorySpec(n_traj=4, t_final=0.05, dim=8,
                                                          keep_signals=True), o),
            "steady": lambda o: steady_point(SteadySpec(), o),
            "moments": lambda o: moments_series(MomentsSpec(n_samples=5), o),
        }
        first = runners[kind](tmp_path / "a")
        again = rerun(tmp_path / "a" / "manifest.json", tmp_path / "b")
        assert again.manifest["kind"] == kind
        assert again.manifest["spec"] == first.manifest["spec"]
        assert again.manifest["files"] == first.manifest["files"]
        assert compare_outputs(tmp_path / "a", tmp_path / "b") == []

    def test_compare_detects_changes(self, tmp_path):
        moments_series(MomentsSpec(n_samples=5), tmp_path / "a")
        rerun(tmp_path / "a", tmp_path / "b")
        f = tmp_path / "b" / "moments.csv"
        f.write_text(f.read_text().replace("0.", "1.", 1))
        assert compare_outputs(tmp_path / "a", tmp_path / "b") == ["moments.csv"]

    def test_manifest_contents(self, tmp_path):
        res = sweep(SweepSpec(n_x=3, n_p=3), tmp_path, config={"n_points": 3})
        m = manifest(tmp_path)
        for key in ("kind", "spec", "config", "versions", "seeds", "dim", "truncation",
                    "notes", "results", "wall_clock_s", "files"):
            assert key in m
        assert m["config"] == {"n_points": 3}
        assert {"numpy", "scipy", "python", "fbsqueeze"} <= set(m["versions"])
        assert all((tmp_path / f).exists() for f in m["files"])
        assert m["files"] == res.manifest["files"]

    def test_unknown_kind(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"kind": "plot", "spec": {}}))
        with pytest.raises(ValueError):
            rerun(tmp_path, tmp_path / "out")


def test_relaxation_series_decays_to_steady(tmp_path):
    spec = RelaxationSpec(betas=(2.0,), kappas=(2.0,), dim=20, t_final=5.0, sample_dt=0.5)
    res = relaxation(spec, tmp_path)
    s = res.manifest["results"]["series"][0]
    assert math.isclose(s["var_x_final"], s["var_x_steady"], rel_tol=1e-6)
