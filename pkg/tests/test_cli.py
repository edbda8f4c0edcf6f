import json
import os

import pytest

from carpetlab import cli
from carpetlab import geometry as G


def run(argv):
    return cli.main(argv)


def envelopes(out_dir):
    out = {}
    for name in os.listdir(out_dir):
        if name.endswith(".json"):
            with open(os.path.join(out_dir, name)) as fh:
                env = json.load(fh)
            if isinstance(env, dict) and "payload" in env:
                out[env["key"]] = env
    return out


@pytest.fixture()
def bad_spec_file(tmp_path):
    retained = [list(c) for c in G.PRESETS["sc2"].retained if c != (0, 0)]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"dimension": 2, "length_scale": 3,
                             "retained": retained}))
    return str(p)


class TestDirectOps:
    def test_validate_ok(self, tmp_path):
        assert run(["--out", str(tmp_path), "validate"]) == 0

    def test_validate_bad_spec(self, tmp_path, bad_spec_file, capsys):
        code = run(["--spec", bad_spec_file, "--out", str(tmp_path),
                    "validate"])
        assert code == cli.EXIT_VALIDATION
        out = capsys.readouterr().out
        assert "symmetry" in out

    def test_cells_smoke(self, tmp_path, capsys):
        assert run(["--out", str(tmp_path), "cells", "--level", "1"]) == 0
        payload = json.loads(capsys.readouterr().out.split("envelope:")[0])
        assert payload["count"] == 8

    def test_form_hilbert_smoke(self, tmp_path, capsys):
        assert run(["--out", str(tmp_path), "form", "hilbert",
                    "--level", "1"]) == 0
        payload = json.loads(capsys.readouterr().out.split("envelope:")[0])
        assert payload["h"] > 0

    def test_direct_op_cached_on_rerun(self, tmp_path, capsys):
        argv = ["--out", str(tmp_path), "rho", "--n-max", "2"]
        assert run(argv) == 0
        capsys.readouterr()
        assert run(argv) == 0
        assert "(cached)" in capsys.readouterr().out


class TestPipeline:
    def test_stage_list(self, tmp_path):
        code = run(["--out", str(tmp_path), "pipeline",
                    "--stages", "validate,rho,timescale"])
        assert code == 0
        envs = envelopes(str(tmp_path))
        assert {e["operation"] for e in envs.values()} >= {
            "validate", "rho", "timescale"}

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"carpet": "sc2", "pipeline": ["validate"],
                                   "bogus": 1}))
        assert run(["--out", str(tmp_path), "pipeline",
                    "--config", str(cfg)]) == cli.EXIT_VALIDATION

    def test_unknown_stage_param(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "carpet": "sc2",
            "pipeline": [{"stage": "rho", "nmax": 3}]}))
        assert run(["--out", str(tmp_path), "pipeline",
                    "--config", str(cfg)]) == cli.EXIT_VALIDATION

    def test_unknown_stage_name(self, tmp_path):
        assert run(["--out", str(tmp_path), "pipeline",
                    "--stages", "frobnicate"]) == cli.EXIT_VALIDATION

    def test_validation_failure_exit(self, tmp_path, bad_spec_file):
        code = run(["--spec", bad_spec_file, "--out", str(tmp_path),
                    "pipeline", "--stages", "validate,rho"])
        assert code == cli.EXIT_VALIDATION

    def test_cache_hit_and_determinism(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        stages = "validate,rho,timescale"
        for out in (out_a, out_b):
            assert run(["--out", str(out), "pipeline", "--stages", stages]) == 0
        env_a, env_b = envelopes(str(out_a)), envelopes(str(out_b))
        assert set(env_a) == set(env_b)
        for key in env_a:
            assert env_a[key]["payload_sha256"] == env_b[key]["payload_sha256"]
            assert env_a[key]["payload"] == env_b[key]["payload"]
        # second run over the same directory reuses every envelope
        before = {k: v["payload_sha256"] for k, v in env_a.items()}
        assert run(["--out", str(out_a), "pipeline", "--stages", stages]) == 0
        after = {k: v["payload_sha256"]
                 for k, v in envelopes(str(out_a)).items()}
        assert before == after


class TestReport:
    def test_empty_dir(self, tmp_path):
        assert run(["--out", str(tmp_path), "report"]) == 0
        assert os.path.exists(tmp_path / "summary.tsv")

    def test_figures_and_summary(self, tmp_path, capsys):
        code = run(["--out", str(tmp_path), "pipeline", "--stages",
                    "validate,rho,timescale,heatkernel"])
        assert code == 0
        capsys.readouterr()
        assert run(["--out", str(tmp_path), "report"]) == 0
        text = capsys.readouterr().out
        assert "figures:" in text
        pngs = [f for f in os.listdir(tmp_path) if f.endswith(".png")]
        assert pngs
        tsvs = [f for f in os.listdir(tmp_path) if f.endswith(".tsv")]
        assert "summary.tsv" in tsvs
        with open(tmp_path / "summary.txt") as fh:
            assert "rho" in fh.read()
