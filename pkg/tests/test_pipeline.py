import csv
import json

import numpy as np
import pytest

from primcascade import cli
from primcascade import cloud as cl
from primcascade import merge as mg
from primcascade import pipeline as pl

SMALL = dict(n_full=16384, n_low=2048)


def oracle_cfg(**kw):
    return pl.PipelineConfig(**SMALL, global_segmenter="oracle", local_segmenter="oracle", **kw)


# --- configuration


def test_default_config_valid():
    pl.PipelineConfig().validate()


@pytest.mark.parametrize("kw", [dict(n_low=0), dict(n_low=200000), dict(eta=0.0),
                                dict(theta=1.5), dict(heatmap="Nope"),
                                dict(global_segmenter="magic"), dict(global_resolution="mid"),
                                dict(use_patches=False, use_global_in_merge=False),
                                dict(local_ransac={"bogus": 1}),
                                dict(oracle_corruption={"flip_rate": 2.0})])
def test_config_rejects(kw):
    with pytest.raises(pl.ConfigError):
        pl.PipelineConfig(**kw).validate()


def test_config_rejects_oversized_downsample():
    with pytest.raises(pl.ConfigError, match="exceeds the cloud size"):
        pl.PipelineConfig(**SMALL).validate(1000)


def test_config_json_round_trip(tmp_path):
    cfg = pl.PipelineConfig(**SMALL, eta=0.03, epsilons=(0.005, 0.01), seed=9)
    pl.save_config(cfg, tmp_path / "c.json")
    assert pl.load_config(tmp_path / "c.json") == cfg


def test_config_unknown_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"etaa": 0.1}))
    with pytest.raises(pl.ConfigError, match="unknown config keys"):
        pl.load_config(tmp_path / "c.json")


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(pl.WORKERS_ENV, "3")
    assert pl.worker_count() == 3
    monkeypatch.setenv(pl.WORKERS_ENV, "zero")
    with pytest.raises(pl.ConfigError):
        pl.worker_count()


# --- end to end


def test_oracle_pipeline_is_perfect(small_scene, small_low):
    res = pl.run_pipeline(oracle_cfg(), small_scene, small_low, workers=1)
    rep = res.report
    assert rep.seg_miou == 100.0 and rep.type_accuracy == 100.0
    assert rep.normal_diff_deg == 0.0
    assert rep.sk_coverage[0.01] == 100.0
    assert not mg.constraint_violations(res.grouping, res.stacked.column_scope)


def test_pipeline_deterministic(small_scene, small_low):
    cfg = pl.PipelineConfig(**SMALL)
    a = pl.run_pipeline(cfg, small_scene, small_low, workers=1)
    b = pl.run_pipeline(cfg, small_scene, small_low, workers=1)
    assert a.provenance["labels_hash"] == b.provenance["labels_hash"]


def test_worker_count_does_not_change_result(small_scene, small_low):
    cfg = pl.PipelineConfig(**SMALL)
    a = pl.run_pipeline(cfg, small_scene, small_low, workers=1)
    b = pl.run_pipeline(cfg, small_scene, small_low, workers=3)
    assert len(a.cover) >= 2
    assert a.provenance["labels_hash"] == b.provenance["labels_hash"]
    assert a.provenance["patch_hashes"] == b.provenance["patch_hashes"]


def test_ablation_global_only(small_scene, small_low):
    res = pl.run_pipeline(oracle_cfg(use_patches=False), small_scene, small_low, workers=1)
    assert len(res.cover) == 0 and not res.patch_segs
    assert set(res.stacked.column_scope.tolist()) == {-1}


def test_ablation_patches_only(small_scene, small_low):
    res = pl.run_pipeline(oracle_cfg(use_global_in_merge=False), small_scene, small_low,
                          workers=1)
    assert -1 not in res.stacked.column_scope.tolist() and len(res.cover) > 0


def test_ablation_uniform_patch_pool(small_scene, small_low):
    cfg = oracle_cfg(use_patch_selection=False, max_patches=4)
    res = pl.run_pipeline(cfg, small_scene, small_low, workers=1)
    assert res.provenance["patches"]["pool_size"] == len(small_low)
    assert len(res.cover) == 4


def test_empty_pool_warns_and_falls_back(small_scene, small_low):
    # no ground-truth primitive owns fewer than 0.1% of the points
    res = pl.run_pipeline(oracle_cfg(eta=0.001), small_scene, small_low, workers=1)
    assert any("empty patch pool" in w for w in res.provenance["warnings"])
    assert res.report.seg_miou == 100.0


def test_failing_patch_is_skipped(small_scene, small_low, monkeypatch):
    real = pl.segment_patch

    def flaky(cfg, cloud, patch, index):
        if index == 0:
            raise RuntimeError("synthetic failure")
        return real(cfg, cloud, patch, index)

    monkeypatch.setattr(pl, "segment_patch", flaky)
    res = pl.run_pipeline(oracle_cfg(), small_scene, small_low, workers=1)
    assert res.provenance["skipped_patches"] == ["patch 0: synthetic failure"]
    assert 0 not in res.stacked.column_scope.tolist()


def test_bare_cloud_has_no_report(small_scene, small_low):
    c = small_scene.cloud
    bare = cl.PointCloud(c.points, c.normals)
    cfg = pl.PipelineConfig(**SMALL, heatmap="Curvature")
    res = pl.run_pipeline(cfg, bare, small_low, workers=1)
    assert res.report is None and res.final.labels.min() >= 0


def test_low_resolution_global_propagates(small_scene, small_low):
    cfg = pl.PipelineConfig(**SMALL, global_resolution="low")
    seg = pl.global_stage(cfg, small_scene.cloud, small_low)
    assert seg.flags["propagated"] and len(seg.indices) == len(small_scene.cloud)


# --- command line


@pytest.fixture
def cli_env(tmp_path):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(SMALL))
    assert cli.main(["synth", "--seed", "3", "--points", "16384", "--primitives", "6",
                     "-o", str(tmp_path / "scene")]) == 0
    return tmp_path, cfgp


def test_cli_stage_chain_matches_run(cli_env):
    tmp, cfgp = cli_env
    scene = str(tmp / "scene")
    c = ["--config", str(cfgp)]
    assert cli.main(["run", scene, *c, "-o", str(tmp / "run")]) == 0
    assert cli.main(["patches", scene, *c, "-o", str(tmp / "p.json")]) == 0
    n_patches = len(json.loads((tmp / "p.json").read_text())["patches"])
    segs = [str(tmp / "g.seg")]
    assert cli.main(["segment", scene, *c, "--scope", "global", "-o", segs[0]]) == 0
    for i in range(n_patches):
        segs.append(str(tmp / f"p{i}.seg"))
        assert cli.main(["segment", scene, *c, "--scope", f"patch:{i}", "--patches",
                         str(tmp / "p.json"), "-o", segs[-1]]) == 0
    assert cli.main(["merge", scene, *segs, *c, "-o", str(tmp / "chain")]) == 0
    assert cli.main(["evaluate", scene, str(tmp / "chain"), *c]) == 0
    for name in ("labels.cpf", "primitives.json", "grouping.json", "report.json",
                 "report_cloud.csv", "report_primitives.csv"):
        assert (tmp / "run" / name).read_bytes() == (tmp / "chain" / name).read_bytes(), name


def test_cli_exit_codes(cli_env, capsys):
    tmp, cfgp = cli_env
    assert cli.main([]) == 2
    assert cli.main(["run", str(tmp / "missing"), "-o", str(tmp / "o")]) == 2
    (tmp / "bad.json").write_text('{"eta": 7}')
    assert cli.main(["run", str(tmp / "scene"), "--config", str(tmp / "bad.json"),
                     "-o", str(tmp / "o")]) == 2
    (tmp / "junk.cpf").write_bytes(b"not a cloud")
    assert cli.main(["patches", str(tmp / "junk.cpf"), "-o", str(tmp / "p.json")]) == 2
    assert cli.main(["segment", str(tmp / "scene"), "--config", str(cfgp), "--scope", "patch:0",
                     "-o", str(tmp / "x.seg")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_runtime_failure_exit_code(cli_env, monkeypatch):
    tmp, cfgp = cli_env

    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(pl, "run_pipeline", boom)
    assert cli.main(["run", str(tmp / "scene"), "--config", str(cfgp),
                     "-o", str(tmp / "o")]) == 3


def test_cli_multi_input_aggregate(cli_env):
    tmp, cfgp = cli_env
    assert cli.main(["synth", "--seed", "4", "--points", "16384", "--primitives", "5",
                     "-o", str(tmp / "scene2")]) == 0
    cfg = {**SMALL, "global_segmenter": "oracle", "local_segmenter": "oracle"}
    (tmp / "o.json").write_text(json.dumps(cfg))
    assert cli.main(["run", str(tmp / "scene"), str(tmp / "scene2"), "--config",
                     str(tmp / "o.json"), "-o", str(tmp / "out")]) == 0
    rep = json.loads((tmp / "out" / "report.json").read_text())
    assert rep["n_clouds"] == 2 and rep["metrics"]["Seg. (Mean IoU) (%)"] == 100.0
    assert (tmp / "out" / "scene" / "labels.cpf").exists()
    assert (tmp / "out" / "scene2" / "provenance.json").exists()


def test_cli_bench_merge(tmp_path):
    out = tmp_path / "b.csv"
    assert cli.main(["bench-merge", "--columns", "6", "--instances", "5", "-o", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 5
    assert all(float(r["ratio"]) <= 1 + 1e-12 for r in rows)
    assert all(r["exact_solved"] == "True" for r in rows)


def test_cli_synth_suites(tmp_path):
    for suite in ("small", "curvature", "flat"):
        assert cli.main(["synth", "--suite", suite, "--points", "8192",
                         "-o", str(tmp_path / suite)]) == 0
        assert len(cl.load_scene(tmp_path / suite).cloud) == 8192


def test_run_outputs_provenance(tmp_path, small_scene, small_low):
    res = pl.run_pipeline(oracle_cfg(), small_scene, small_low, workers=1)
    hashes = pl.write_outputs(res, small_scene.cloud, tmp_path)
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["files"] == hashes and "labels.cpf" in hashes
    assert prov["config"]["n_low"] == 2048
    assert np.array_equal(cl.load_cloud(tmp_path / "labels.cpf").gt_label, res.final.labels)
