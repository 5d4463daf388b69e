import csv
import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ergflow import config as C
from ergflow import data as D
from ergflow.attention import RectificationConfig
from ergflow.cli import _expand_grid, main
from ergflow.config import RunConfig
from ergflow.data import DatasetSpec, ModeSpec
from ergflow.guidance import ErgParams, GuidanceSpec
from ergflow.models import DenoiserConfig, EncoderConfig, init_model
from ergflow.sampler import SamplerConfig
from ergflow.train import TrainConfig, save_checkpoint

from conftest import perturb_model


def tiny_run_config(tmp_path, steps=6, per_mode=12) -> RunConfig:
    ds = DatasetSpec(modes=(ModeSpec(0, (2.0, 4.0), 1.2, 1.0),
                            ModeSpec(1, (6.0, 4.0), 1.2, 1.0)),
                     image_side=8, per_mode=per_mode, jitter=0.3, seed=0)
    erg = ErgParams(rect=RectificationConfig(mode="temperature", tau=0.01, alpha=1.0,
                                             gamma=1.5, steps=1, layer_lo=0, layer_hi=2),
                    kappa=0.4, tau_c=0.01, enc_lo=0, enc_hi=2)
    return RunConfig(
        dataset=ds,
        denoiser=DenoiserConfig(image_side=8, patch=2, depth=2, dim=16, heads=2,
                                cond_tokens=6, mlp_ratio=2),
        encoder=EncoderConfig(vocab=32, depth=2, dim=16, heads=2, max_len=6, mlp_ratio=2),
        train=TrainConfig(steps=steps, batch=4, checkpoint_every=1000, seed=0),
        sampler=SamplerConfig(steps=4, seed=0, batch=2),
        guidance=GuidanceSpec(method="none", w=1.0, erg=erg),
        out_dir=str(tmp_path / "run"),
    )


@pytest.fixture()
def workspace(tmp_path):
    cfg = tiny_run_config(tmp_path)
    cfg_path = tmp_path / "config.json"
    C.save(cfg, cfg_path)
    model = perturb_model(init_model(cfg.denoiser, cfg.encoder, seed=cfg.seed), seed=3)
    ckpt = tmp_path / "model.ckpt"
    save_checkpoint(model.params, ckpt)
    return {"cfg": cfg, "cfg_path": str(cfg_path), "ckpt": str(ckpt), "root": tmp_path}


class TestTrainCommand:
    def test_train_writes_artifacts_and_is_deterministic(self, tmp_path):
        cfg = tiny_run_config(tmp_path, steps=4)
        cfg_path = tmp_path / "c.json"
        C.save(cfg, cfg_path)
        assert main(["train", "--config", str(cfg_path)]) == 0
        out = cfg.out_dir
        assert os.path.exists(os.path.join(out, "config.json"))
        assert os.path.exists(os.path.join(out, "train_loss.csv"))
        final = os.path.join(out, "ckpt_000004.ckpt")
        assert os.path.exists(final)
        h1 = hashlib.sha256(open(final, "rb").read()).hexdigest()

        cfg2 = C.override(cfg, "out_dir", str(tmp_path / "run2"))
        C.save(cfg2, cfg_path)
        assert main(["train", "--config", str(cfg_path)]) == 0
        h2 = hashlib.sha256(
            open(os.path.join(cfg2.out_dir, "ckpt_000004.ckpt"), "rb").read()).hexdigest()
        assert h1 == h2

    def test_loss_csv_shape(self, tmp_path):
        cfg = tiny_run_config(tmp_path, steps=3)
        cfg_path = tmp_path / "c.json"
        C.save(cfg, cfg_path)
        main(["train", "--config", str(cfg_path)])
        rows = open(os.path.join(cfg.out_dir, "train_loss.csv")).read().splitlines()
        assert rows[0] == "step,loss"
        assert len(rows) == 4


class TestSampleCommand:
    def test_none_equals_cfg_at_w1(self, workspace):
        root = workspace["root"]
        a, b = str(root / "s_none"), str(root / "s_cfg")
        assert main(["sample", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                     "--out", a, "--guidance", "none", "--n", "2"]) == 0
        assert main(["sample", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                     "--out", b, "--guidance", "cfg", "--w", "1.0", "--n", "2"]) == 0
        for name in sorted(os.listdir(a)):
            if name.endswith(".pgm"):
                assert open(os.path.join(a, name), "rb").read() == \
                    open(os.path.join(b, name), "rb").read()

    def test_paper_style_defaults_accepted(self, workspace):
        out = str(workspace["root"] / "s_erg")
        rc = main(["sample", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--out", out, "--guidance", "erg", "--w", "3", "--tau-i", "0.01",
                   "--tau-c", "0.01", "--kappa", "0.4", "--steps", "4", "--n", "2"])
        assert rc == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["guidance"]["method"] == "erg"
        assert manifest["guidance"]["erg"]["rect"]["tau"] == 0.01
        assert manifest["guidance"]["erg"]["kappa"] == 0.4
        assert len(manifest["files"]) == 4
        assert os.path.exists(os.path.join(out, "config.json"))

    def test_autoguidance_without_weak_ckpt_is_config_error(self, workspace):
        rc = main(["sample", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--out", str(workspace["root"] / "x"), "--guidance", "autoguidance",
                   "--n", "1"])
        assert rc == 2

    def test_uncond_with_tau_c_is_config_error(self, workspace):
        rc = main(["sample", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--out", str(workspace["root"] / "x"), "--guidance", "erg",
                   "--w", "3", "--uncond", "--n", "1"])
        assert rc == 2

    def test_uncond_with_unit_tau_c_works(self, workspace):
        rc = main(["sample", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--out", str(workspace["root"] / "u"), "--guidance", "erg",
                   "--w", "3", "--uncond", "--tau-c", "1.0", "--n", "2"])
        assert rc == 0

    def test_numeric_blowup_exit_code(self, workspace):
        rc = main(["sample", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--out", str(workspace["root"] / "blow"), "--guidance", "cfg",
                   "--w", "3e38", "--n", "2"])
        assert rc == 3


class TestEvalCommand:
    def test_reference_set_evaluates_to_perfect_scores(self, workspace, tmp_path):
        cfg = workspace["cfg"]
        samples = D.generate(cfg.dataset)
        dump_dir = tmp_path / "dump"
        D.dump_samples(samples, dump_dir)
        out_csv = tmp_path / "metrics.csv"
        assert main(["eval", "--config", workspace["cfg_path"], "--samples", str(dump_dir),
                     "--out", str(out_csv)]) == 0
        with open(out_csv) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["run_id", "params_json", "frechet", "precision", "recall",
                           "density", "coverage", "consistency"]
        vals = dict(zip(rows[0], rows[1]))
        assert float(vals["precision"]) == 1.0
        assert float(vals["coverage"]) == 1.0
        assert float(vals["consistency"]) == 1.0
        assert float(vals["frechet"]) < 0.01

    def test_missing_manifest_is_config_error(self, workspace, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["eval", "--config", workspace["cfg_path"], "--samples", str(empty),
                   "--out", str(tmp_path / "m.csv")])
        assert rc == 2


class TestSweepCommand:
    def test_grid_expansion_matches_search_protocol(self):
        grid = {"guidance.cads.tau1": [0.6, 0.8], "guidance.cads.tau2": [0.8, 1.0],
                "guidance.cads.s": [0.25, 1.0]}
        combos = _expand_grid(grid)
        assert len(combos) == 8
        assert {tuple(sorted(c.items())) for c in combos} == {
            tuple(sorted({"guidance.cads.tau1": a, "guidance.cads.tau2": b,
                          "guidance.cads.s": s}.items()))
            for a in (0.6, 0.8) for b in (0.8, 1.0) for s in (0.25, 1.0)}

    def test_single_point_grid_ranks_first(self, workspace):
        out = str(workspace["root"] / "sweep1")
        rc = main(["sweep", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--grid", json.dumps({"guidance.w": [3.0]}), "--out", out, "--n", "3"])
        assert rc == 0
        ranks = open(os.path.join(out, "ranks.csv")).read().splitlines()
        assert ranks[1].startswith("run_000,1.0000")
        front = json.load(open(os.path.join(out, "pareto.json")))
        assert front["front"] == ["run_000"]
        with open(os.path.join(out, "sweep.csv")) as f:
            assert len(list(csv.reader(f))) == 2

    def test_two_point_sweep_outputs(self, workspace):
        out = str(workspace["root"] / "sweep2")
        grid = {"guidance.method": ["cfg"], "guidance.w": [1.0, 3.0]}
        rc = main(["sweep", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--grid", json.dumps(grid), "--out", out, "--n", "3"])
        assert rc == 0
        payload = json.load(open(os.path.join(out, "pareto.json")))
        assert payload["metrics"] == ["density", "coverage", "consistency"]
        assert 1 <= len(payload["front"]) <= 2

    def test_unknown_grid_field_is_config_error(self, workspace):
        rc = main(["sweep", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--grid", json.dumps({"guidance.wobble": [1.0]}),
                   "--out", str(workspace["root"] / "x")])
        assert rc == 2

    def test_parallel_jobs_respect_env_cap(self, workspace, monkeypatch):
        monkeypatch.setenv("ERG_THREADS", "1")
        out = str(workspace["root"] / "sweep_par")
        grid = {"guidance.w": [1.0, 2.0]}
        rc = main(["sweep", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--grid", json.dumps(grid), "--out", out, "--n", "3", "--jobs", "8"])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "sweep.csv"))


class TestAnalyzeCommand:
    @pytest.mark.parametrize("study", ["variance", "decomposition", "certainty"])
    def test_studies_produce_reports(self, workspace, study):
        out = str(workspace["root"] / f"an_{study}")
        rc = main(["analyze", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                   "--study", study, "--out", out, "--seeds", "3", "--n", "2"])
        assert rc == 0
        assert os.path.exists(os.path.join(out, f"{study}.csv"))
        payload = json.load(open(os.path.join(out, f"{study}.json")))
        assert "summary" in payload

    def test_variance_bin_edges_independent_of_seed_count(self, workspace):
        root = workspace["root"]
        for seeds, name in ((2, "va"), (4, "vb")):
            main(["analyze", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
                  "--study", "variance", "--out", str(root / name), "--seeds", str(seeds)])
        a = json.load(open(root / "va" / "variance.json"))
        b = json.load(open(root / "vb" / "variance.json"))
        assert len(a["histograms"]["marginal_null"]["edges"]) == \
            len(b["histograms"]["marginal_null"]["edges"])

    def test_certainty_fractions_in_range_on_random_weights(self, workspace):
        out = str(workspace["root"] / "an_c2")
        main(["analyze", "--config", workspace["cfg_path"], "--ckpt", workspace["ckpt"],
              "--study", "certainty", "--out", out, "--n", "2"])
        rows = open(os.path.join(out, "certainty.csv")).read().splitlines()[1:]
        fractions = [float(r.split(",")[1]) for r in rows]
        assert len(fractions) == 2  # depth of the tiny model
        assert all(0.0 <= f <= 1.0 for f in fractions)


class TestEntryPoint:
    def test_console_script_help(self):
        proc = subprocess.run([sys.executable, "-m", "ergflow.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for cmd in ("train", "sample", "eval", "sweep", "analyze"):
            assert cmd in proc.stdout

    def test_bad_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"sampler": {"steps": 0}}')
        rc = main(["train", "--config", str(bad)])
        assert rc == 2
