import json
import subprocess
import sys
import time

import numpy as np
import pytest

from magnneto import cli
from magnneto.baselines import default_ospf_weights
from magnneto.reports import check_csv, read_csv
from magnneto.routing import ecmp_loads
from magnneto.topology import fixture_path, load_fixture, load_traffic

DIAMOND = str(fixture_path("diamond"))
TRAIN8 = str(fixture_path("train8"))


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def init_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("init")
    tms = out / "tms"
    assert run("gen-tm", "--topology", TRAIN8, "--count", 2, "--out", tms) == 0
    assert run("train", "--topology", TRAIN8, "--traffic", tms, "--seed", 0, "--out", out / "run") == 0
    return out / "run" / "final.ckpt"


def test_gen_tm_single_uniform(tmp_path):
    assert run("gen-tm", "--topology", DIAMOND, "--profile", "uniform", "--seed", 3, "--out", tmp_path) == 0
    files = sorted(tmp_path.glob("*.tm"))
    assert [f.name for f in files] == ["uniform_000003.tm"]
    load_traffic(files[0], 4)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "gen-tm" and manifest["seeds"]["tm_seeds"] == [3]


def test_gen_tm_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("gen-tm", "--topology", DIAMOND, "--count", 3, "--out", tmp_path / d) == 0
    files = sorted((tmp_path / "a").glob("*.tm"))
    assert len(files) == 3
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_gen_tm_hundred_gravity_normalized(tmp_path):
    topo = load_fixture("nsfnet")
    assert topo.n_nodes == 14
    assert run("gen-tm", "--topology", fixture_path("nsfnet"), "--count", 100, "--target-util", 0.6, "--out", tmp_path) == 0
    files = sorted(tmp_path.glob("gravity_*.tm"))
    assert len(files) == 100
    w = default_ospf_weights(topo)
    for f in files:
        tm = load_traffic(f, 14)
        assert ecmp_loads(topo, tm, w).max_utilization == pytest.approx(0.6, rel=1e-9)


def test_train_zero_iterations_writes_initial_checkpoint(init_ckpt):
    assert init_ckpt.exists()
    _, rows = read_csv(init_ckpt.parent / "train_log.csv")
    assert rows == []


def test_train_fixture_run(tmp_path):
    tms = tmp_path / "tms"
    assert run("gen-tm", "--topology", TRAIN8, "--count", 5, "--target-util", 0.9, "--out", tms) == 0
    t0 = time.perf_counter()
    code = run("train", "--topology", TRAIN8, "--traffic", tms, "--seed", 4, "--iterations", 200, "--out", tmp_path / "run")
    elapsed = time.perf_counter() - t0
    assert code == 0
    assert elapsed < 600
    assert check_csv(tmp_path / "run" / "train_log.csv") == "train_log"
    _, rows = read_csv(tmp_path / "run" / "train_log.csv")
    assert len(rows) == 200
    assert all(np.isfinite(r["actor_loss"]) for r in rows)


def test_eval_reports(tmp_path, init_ckpt):
    tms = tmp_path / "tms"
    assert run("gen-tm", "--topology", TRAIN8, "--count", 3, "--out", tms) == 0
    (tms / "zero.tm").write_text("DEMANDS 0\n")
    out = tmp_path / "eval"
    assert run("eval", "--checkpoint", init_ckpt, "--topology", TRAIN8, "--traffic", tms, "--seed", 1, "--out", out) == 0
    for name in ("eval", "eval_summary", "eval_cdf"):
        assert check_csv(out / f"{name}.csv") == name
    _, rows = read_csv(out / "eval.csv")
    assert len(rows) == 8
    zero = [r for r in rows if r["tm"] == "zero"]
    assert {r["mode"] for r in zero} == {"greedy", "sampled"}
    assert all(r["flag"] and r["improvement_pct"] is None for r in zero)
    _, cdf = read_csv(out / "eval_cdf.csv")
    for mode in ("greedy", "sampled"):
        pts = [r for r in cdf if r["mode"] == mode]
        assert len(pts) == 3
        assert [r["cdf"] for r in pts] == pytest.approx([1 / 3, 2 / 3, 1.0])


def test_eval_reproducible_and_worker_independent(tmp_path, init_ckpt):
    tms = tmp_path / "tms"
    assert run("gen-tm", "--topology", DIAMOND, "--count", 3, "--out", tms) == 0
    ckpt_dir = tmp_path / "ck"
    assert run("train", "--topology", DIAMOND, "--traffic", tms, "--seed", 2, "--iterations", 2, "--out", ckpt_dir) == 0
    common = ["eval", "--checkpoint", ckpt_dir / "final.ckpt", "--topology", DIAMOND, "--traffic", tms, "--seed", 5]
    assert run(*common, "--out", tmp_path / "a") == 0
    assert run(*common, "--workers", 2, "--out", tmp_path / "b") == 0
    _, a = read_csv(tmp_path / "a" / "eval.csv")
    _, b = read_csv(tmp_path / "b" / "eval.csv")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time_s"} for r in rows]
    assert strip(a) == strip(b)


def test_compare_diamond(tmp_path):
    tms = tmp_path / "tms"
    assert run("gen-tm", "--topology", DIAMOND, "--count", 4, "--profile", "uniform", "--out", tms) == 0
    ck = tmp_path / "ck"
    assert run("train", "--topology", DIAMOND, "--traffic", tms, "--seed", 0, "--out", ck) == 0
    out = tmp_path / "cmp"
    argv = ["compare", "--topology", DIAMOND, "--traffic", tms, "--checkpoint", ck / "final.ckpt", "--w-max", 4, "--out", out]
    assert run(*argv) == 0
    assert check_csv(out / "compare.csv") == "compare"
    _, rows = read_csv(out / "compare.csv")
    by_tm = {}
    for r in rows:
        by_tm.setdefault(r["tm"], {})[r["optimizer"]] = r
    assert len(by_tm) == 4
    for opt in by_tm.values():
        assert set(opt) == {"default_ospf", "local_search", "magnneto", "brute_force"}
        best = opt["brute_force"]["max_utilization"]
        assert all(best <= r["max_utilization"] for r in opt.values())
        assert opt["local_search"]["improvement_pct"] >= 0
        assert opt["default_ospf"]["improvement_pct"] == 0


def test_compare_policy_faster_than_search_on_large_fixture(tmp_path, init_ckpt):
    geant = fixture_path("geant24")
    tms = tmp_path / "tms"
    assert run("gen-tm", "--topology", geant, "--count", 1, "--out", tms) == 0
    out = tmp_path / "cmp"
    assert run("compare", "--topology", geant, "--traffic", tms, "--checkpoint", init_ckpt, "--out", out) == 0
    _, rows = read_csv(out / "compare.csv")
    t = {r["optimizer"]: r["wall_time_s"] for r in rows}
    assert "brute_force" not in t
    assert t["magnneto"] < t["local_search"]
    assert all(r["improvement_pct"] >= 0 for r in rows if r["optimizer"] == "local_search")


def test_dist_check_command(tmp_path):
    out = tmp_path / "dc"
    assert run("dist-check", "--topology", DIAMOND, "--n-seeds", 3, "--n-actions", 2, "--out", out) == 0
    assert check_csv(out / "dist_check.csv") == "dist_check"
    _, rows = read_csv(out / "dist_check.csv")
    assert [r["seed"] for r in rows] == [0, 1, 2]
    assert not any(r["diverged"] for r in rows)


def test_overhead_command(tmp_path, capsys):
    out = tmp_path / "oh" / "overhead.csv"
    assert run("overhead", "--topology", fixture_path("nsfnet"), "--T", 1, "--out", out) == 0
    assert "76.8 bytes" in capsys.readouterr().out
    assert check_csv(out) == "overhead"
    _, rows = read_csv(out)
    assert len(rows) == load_fixture("nsfnet").n_links
    assert all(r["bytes_hidden"] == 307.2 for r in rows)
    assert all(r["MB_per_s"] == pytest.approx(r["total_MB"] * 1000) for r in rows)


# -- failures ------------------------------------------------------------------


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--topology", TRAIN8, "--traffic", str(tmp_path), "--out", str(tmp_path)])  # no --seed
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus"])
    assert exc.value.code == cli.EXIT_USAGE
    code = run("train", "--topology", TRAIN8, "--topology", DIAMOND, "--traffic", tmp_path, "--seed", 0, "--out", tmp_path)
    assert code == cli.EXIT_USAGE
    assert "error[usage]" in capsys.readouterr().err


def test_bad_input_exit_3(tmp_path, capsys):
    assert run("gen-tm", "--topology", tmp_path / "missing.topo", "--out", tmp_path) == cli.EXIT_INPUT
    bad = tmp_path / "bad.topo"
    bad.write_text("NODES 2\n0 a\n")
    assert run("overhead", "--topology", bad, "--out", tmp_path / "o.csv") == cli.EXIT_INPUT
    tms = tmp_path / "tms"
    tms.mkdir()
    (tms / "x.tm").write_text("0 9 1.0\n")
    code = run("eval", "--checkpoint", "nope", "--topology", DIAMOND, "--traffic", tms, "--seed", 0, "--out", tmp_path)
    assert code == cli.EXIT_INPUT
    err = capsys.readouterr().err
    assert "error[input]" in err and "x.tm" in err


def test_model_errors_exit_4(tmp_path, init_ckpt, capsys):
    tms = tmp_path / "tms"
    assert run("gen-tm", "--topology", DIAMOND, "--out", tms) == 0
    garbage = tmp_path / "g.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    for ckpt in (garbage, tmp_path / "absent.ckpt"):
        code = run("eval", "--checkpoint", ckpt, "--topology", DIAMOND, "--traffic", tms, "--seed", 0, "--out", tmp_path / "e")
        assert code == cli.EXIT_MODEL
    truncated = tmp_path / "t.ckpt"
    truncated.write_bytes(init_ckpt.read_bytes()[:-8])
    code = run("eval", "--checkpoint", truncated, "--topology", DIAMOND, "--traffic", tms, "--seed", 0, "--out", tmp_path / "e")
    assert code == cli.EXIT_MODEL
    assert "error[model]" in capsys.readouterr().err


def test_divergence_exit_5(tmp_path, monkeypatch):
    from magnneto import distsim

    real = distsim.run_distributed_episode

    def tampered(*args, **kwargs):
        return real(*args, **kwargs, seed_overrides={1: 999})

    monkeypatch.setattr(distsim, "run_distributed_episode", tampered)
    out = tmp_path / "dc"
    assert run("dist-check", "--topology", fixture_path("mesh6"), "--n-seeds", 2, "--out", out) == cli.EXIT_DIVERGENCE
    _, rows = read_csv(out / "dist_check.csv")
    assert all(r["diverged"] for r in rows)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "magnneto", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("gen-tm", "train", "eval", "compare", "dist-check", "overhead"):
        assert sub in res.stdout
