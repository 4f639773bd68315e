import json

import numpy as np
import pytest

from dbar_eit.dbar import ConductivityImage
from dbar_eit.pipeline import (ExperimentConfig, PipelineError, compute_metrics, run_pipeline,
                               write_outputs)
from dbar_eit.priors import assemble_piecewise_sigma
from dbar_eit import thorax


def tiny_config(**over):
    base = dict(z_n=31, prior_method="blind", noise_levels=[0.0],
                r2_list=[5.0], alpha_list=[0.5, 1.0], periodic_m=7,
                k_spacing=0.55, data_mesh_nodes=5, reference_mesh_nodes=4,
                mollification_mm=10.0)
    base.update(over)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def blind_result():
    return run_pipeline(tiny_config())


class TestConfig:
    def test_roundtrip(self):
        cfg = tiny_config()
        doc = cfg.to_json()
        cfg2 = ExperimentConfig.from_json(doc)
        assert cfg2 == cfg
        assert cfg2.config_hash() == cfg.config_hash()

    def test_unknown_keys_rejected(self):
        with pytest.raises(PipelineError):
            ExperimentConfig.from_json({"zz_top": 1})

    def test_validation(self):
        with pytest.raises(PipelineError):
            tiny_config(prior_method="telepathy").validate()
        with pytest.raises(PipelineError):
            tiny_config(r2_list=[2.0]).validate()
        with pytest.raises(PipelineError):
            tiny_config(alpha_list=[1.5]).validate()
        with pytest.raises(PipelineError):
            tiny_config(z_n=30).validate()
        with pytest.raises(PipelineError):
            tiny_config(noise_levels=[-0.1]).validate()

    def test_hash_changes_with_content(self):
        assert tiny_config().config_hash() != tiny_config(seed=123).config_hash()

    def test_noise_seed_derivation(self):
        cfg = tiny_config(noise_levels=[0.0, 0.001], seed=7)
        assert cfg.noise_seed(0) == 7
        assert cfg.noise_seed(1) == 1007


class TestMetrics:
    def test_identity_image(self):
        cfg = tiny_config()
        grid = cfg.zgrid()
        regions = cfg.phantom_regions()
        phantom = assemble_piecewise_sigma(regions, cfg.phantom_values, grid)
        img = ConductivityImage(grid=grid, values=phantom.values.copy())
        m = compute_metrics(img, phantom, regions)
        assert m.rel_l2_error == 0.0
        # phantom contrast: lower left lung 0.600 vs upper 0.240 = 2.5
        # (organ overlaps move the polygon means slightly off the plateaus)
        assert m.effusion_contrast == pytest.approx(2.5, rel=0.05)

    def test_flat_on_homogeneous(self):
        cfg = tiny_config(phantom_values={k: 1.0 for k in thorax.PHANTOM_VALUES})
        grid = cfg.zgrid()
        regions = cfg.phantom_regions()
        phantom = assemble_piecewise_sigma(regions, cfg.phantom_values, grid)
        img = ConductivityImage(grid=grid, values=np.ones(grid.points.shape))
        assert compute_metrics(img, phantom, regions).rel_l2_error == 0.0

    def test_grid_mismatch(self):
        cfg = tiny_config()
        grid = cfg.zgrid()
        other = ExperimentConfig(z_n=21).zgrid()
        regions = cfg.phantom_regions()
        phantom = assemble_piecewise_sigma(regions, cfg.phantom_values, grid)
        img = ConductivityImage(grid=other, values=np.ones(other.points.shape))
        with pytest.raises(PipelineError):
            compute_metrics(img, phantom, regions)


class TestRunPipeline:
    def test_sweep_completeness(self, blind_result):
        case = blind_result.cases[0]
        cfg = blind_result.config
        expected = 1 + len(cfg.r2_list) * len(cfg.alpha_list)  # baseline + sweep
        assert len(case.images) == expected
        assert not case.failures

    def test_prior_values_recorded(self, blind_result):
        assert blind_result.cases[0].prior_values["l_lung_top"] == 0.200

    def test_metrics_for_every_image(self, blind_result):
        case = blind_result.cases[0]
        assert set(case.metrics) == set(case.images)

    def test_trivial_prior_matches_baseline(self):
        ones = {k: 1.0 for k in thorax.BLIND_ESTIMATE_VALUES}
        cfg = tiny_config(blind_values=ones, alpha_list=[0.25])
        res = run_pipeline(cfg)
        case = res.cases[0]
        base = case.images[("none", cfg.r1, 1.0)]
        prior_img = case.images[("blind", 5.0, 0.25)]
        scale = np.abs(base.masked_values()).max()
        assert np.abs(prior_img.values - base.values).max() <= 1e-3 * scale

    def test_cell_failure_recorded_not_fatal(self, monkeypatch):
        import dbar_eit.pipeline as pl

        calls = {"n": 0}
        real = pl.reconstruct_sweep

        def flaky(T, params_list, mu_int, zgrid, **kw):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("synthetic cell failure")
            return real(T, params_list, mu_int, zgrid, **kw)

        monkeypatch.setattr(pl, "reconstruct_sweep", flaky)
        cfg = tiny_config(r2_list=[5.0, 7.5])
        res = run_pipeline(cfg)
        case = res.cases[0]
        assert "r2=5" in case.failures
        assert any(key[1] == 7.5 for key in case.images if key[0] == "blind")


class TestIterateMode:
    def test_iteration_uses_updated_prior(self):
        cfg = tiny_config(prior_method="iterate", r2_list=[5.0], alpha_list=[0.75])
        res = run_pipeline(cfg)
        case = res.cases[0]
        # the iteration source image is kept, and the prior was re-extracted
        assert ("blind_source", cfg.iterate_source_r2, cfg.iterate_source_alpha) in case.images
        assert case.prior_values["l_lung_bottom"] != cfg.blind_values["l_lung_bottom"]
        # the effusion enters the updated prior from the data
        assert case.prior_values["l_lung_bottom"] > case.prior_values["l_lung_top"]


class TestOutputs:
    def test_artifacts_and_manifest(self, blind_result, tmp_path):
        manifest = write_outputs(blind_result, tmp_path)
        assert (tmp_path / "manifest.json").exists()
        loaded = json.loads((tmp_path / "manifest.json").read_text())
        assert loaded["config_hash"] == blind_result.config.config_hash()
        case_doc = loaded["noise_cases"][0]
        files = {img["method"] + str(img["r2"]) + str(img["alpha"]) for img in case_doc["images"]}
        assert len(files) == len(blind_result.cases[0].images)
        for img in case_doc["images"]:
            assert (tmp_path / img["file"]).exists()
            assert (tmp_path / img["png"]).exists()
        assert (tmp_path / "phantom.csv").exists()
        assert any(p.suffix == ".csv" and p.name.startswith("scattering") for p in tmp_path.iterdir())

    def test_png_scale_metadata(self, blind_result, tmp_path):
        from dbar_eit.plotting import read_png_metadata

        manifest = write_outputs(blind_result, tmp_path)
        png = tmp_path / manifest["noise_cases"][0]["images"][-1]["png"]
        meta = read_png_metadata(png)
        assert meta["dbar-eit:scale"].startswith("shared:noise-")
        want = manifest["noise_cases"][0]["color_scale"]["vmin"]
        assert float(meta["dbar-eit:vmin"]) == pytest.approx(want, rel=1e-7)

    def test_rerun_bitwise_identical(self, tmp_path):
        # recompute from scratch both times: determinism, not cache hits
        cfg = tiny_config(prior_method="none", r2_list=[3.8], alpha_list=[1.0])
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        write_outputs(run_pipeline(cfg, reuse_cache=False), out_a)
        write_outputs(run_pipeline(cfg, reuse_cache=False), out_b)
        for fa in sorted((out_a / "images").glob("*.csv")):
            fb = out_b / "images" / fa.name
            assert fa.read_bytes() == fb.read_bytes()

    def test_stage_cache_reuse(self):
        from dbar_eit.pipeline import clear_stage_cache

        clear_stage_cache()
        cfg = tiny_config(prior_method="none", r2_list=[3.8], alpha_list=[1.0])
        a = run_pipeline(cfg)
        b = run_pipeline(cfg)  # second run reuses DN maps and scattering
        np.testing.assert_array_equal(a.cases[0].baseline.values, b.cases[0].baseline.values)
        assert b.runtime_s["total"] < a.runtime_s["total"]


class TestCLI:
    def test_simulate_writes_files(self, tmp_path):
        from dbar_eit.cli import main

        cfgfile = tmp_path / "cfg.json"
        cfgfile.write_text(json.dumps(tiny_config(out_dir=str(tmp_path / "out")).to_json()))
        rc = main(["simulate", "--config", str(cfgfile)])
        assert rc == 0
        assert (tmp_path / "out" / "voltages_noise-0.csv").exists()
        assert (tmp_path / "out" / "dn_noise-0.csv").exists()

    def test_reconstruct_and_metrics_and_render(self, tmp_path, capsys):
        from dbar_eit.cli import main

        cfg = tiny_config(prior_method="none", r2_list=[3.8], alpha_list=[1.0],
                          out_dir=str(tmp_path / "out"))
        cfgfile = tmp_path / "cfg.json"
        cfgfile.write_text(json.dumps(cfg.to_json()))
        rc = main(["reconstruct", "--config", str(cfgfile)])
        assert rc == 0
        img = next((tmp_path / "out" / "images").glob("*.csv"))
        capsys.readouterr()
        rc = main(["metrics", "--config", str(cfgfile), "--image", str(img)])
        assert rc == 0
        out = capsys.readouterr().out
        doc = json.loads(out[out.index("{"):])
        assert "rel_l2_error" in doc
        rc = main(["render", "--config", str(cfgfile), "--image", str(img),
                   "--out", str(tmp_path / "r.png")])
        assert rc == 0
        assert (tmp_path / "r.png").exists()

    def test_flag_overrides(self, tmp_path):
        from dbar_eit.cli import main

        rc = main(["reconstruct", "--prior", "none", "--z-n", "21", "--r1", "3.8",
                   "--r2", "3.8", "--alpha", "1.0", "--noise", "0.0",
                   "--out", str(tmp_path / "o")])
        assert rc == 0
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert man["config"]["z_n"] == 21
        assert man["config"]["noise_levels"] == [0.0]

    def test_bad_config_exit_code(self, tmp_path):
        from dbar_eit.cli import main

        cfgfile = tmp_path / "bad.json"
        cfgfile.write_text(json.dumps({"prior_method": "nope"}))
        assert main(["reconstruct", "--config", str(cfgfile)]) == 2


class TestPriorExport:
    def test_prior_csv_and_png_written(self, blind_result, tmp_path):
        manifest = write_outputs(blind_result, tmp_path)
        case_doc = manifest["noise_cases"][0]
        assert case_doc["prior_files"] == ["prior_noise-0.csv", "prior_noise-0.png"]
        vals = np.loadtxt(tmp_path / "prior_noise-0.csv", delimiter=",")
        np.testing.assert_array_equal(vals, blind_result.cases[0].prior.sigma_pr.values)
        assert (tmp_path / "prior_noise-0.png").exists()


class TestRegionsFile:
    def test_pipeline_reads_polygon_json(self, tmp_path):
        from dbar_eit.geometry import dump_regions_json
        from dbar_eit import thorax as tx

        domain = tx.paper_domain()
        regions = tx.thorax_regions(domain.radius)
        path = tmp_path / "regions.json"
        dump_regions_json(domain, regions, path)
        cfg = tiny_config(prior_method="none", r2_list=[3.8], alpha_list=[1.0],
                          regions_file=str(path))
        loaded = cfg.phantom_regions()
        assert [r.label for r in loaded] == [r.label for r in regions]
        res = run_pipeline(cfg)
        assert not res.cases[0].failures


class TestConjugateSymmetry:
    def test_symmetric_prior_halves_work(self):
        from dbar_eit.geometry import PolygonRegion, build_zgrid, kgrid_for_radius
        from dbar_eit.pipeline import prior_scattering_sweep
        from dbar_eit.priors import blind_estimate_prior

        grid = build_zgrid(143.2, 31)
        # a blob centered on the x axis: mirror symmetric about it
        t = 2 * np.pi * np.arange(12) / 12
        blob = PolygonRegion("blob", 40 * np.exp(1j * t) + 30.0)
        prior = blind_estimate_prior([blob], {"background": 1.0, "blob": 2.0}, grid, 10.0)
        kg = kgrid_for_radius(3.0, target_spacing=0.5)
        t_a, mu_a, diag_a = prior_scattering_sweep(prior, kg, 2.0, [3.0], grid,
                                                   periodic_m=7, use_conjugate_symmetry=False)
        t_b, mu_b, diag_b = prior_scattering_sweep(prior, kg, 2.0, [3.0], grid,
                                                   periodic_m=7, use_conjugate_symmetry=True)
        assert diag_b["ls_solves"] < 0.6 * diag_a["ls_solves"]
        m = np.isfinite(t_a)
        np.testing.assert_array_equal(m, np.isfinite(t_b))
        assert np.abs(t_a[m] - t_b[m]).max() < 1e-4 * np.abs(t_a[m]).max()
        assert np.abs(mu_a[3.0].values - mu_b[3.0].values).max() < 1e-4

    def test_asymmetric_prior_refused(self):
        from dbar_eit.geometry import kgrid_for_radius
        from dbar_eit.pipeline import prior_scattering_sweep
        from dbar_eit.priors import blind_estimate_prior
        from dbar_eit import thorax as tx

        cfg = tiny_config()
        grid = cfg.zgrid()
        prior = blind_estimate_prior(tx.thorax_regions(143.2), tx.BLIND_ESTIMATE_VALUES,
                                     grid, 10.0)
        kg = kgrid_for_radius(3.0, target_spacing=0.5)
        with pytest.raises(PipelineError, match="mirror symmetric"):
            prior_scattering_sweep(prior, kg, 2.0, [3.0], grid, periodic_m=7,
                                   use_conjugate_symmetry=True)
