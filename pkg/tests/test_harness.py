import json
import os

import numpy as np
import pytest

from e5sh.core import ClassId
from e5sh.harness.cli import main
from e5sh.harness.experiment import ExperimentConfig, run_experiment
from e5sh.harness.report import report, resolve_baseline
from e5sh.harness.scenes import Dataset, SceneSpec, abundance, gen_dataset, generate_scene
from e5sh.metrics.records import read_csv, to_csv_text
from e5sh.netem import NS_PER_MS
from e5sh.perception import ConfigurationError


def _const_net(delay_ms=2.0, loss=0.0):
    return {"name": "const", "delay": {"kind": "constant", "params": [delay_ms]},
            "bandwidth_kbps": None, "loss": loss, "seed": 1}


def _run(data, **kw):
    kw.setdefault("frames", 6)
    return run_experiment(ExperimentConfig(**kw), data)


def test_generation_is_deterministic(tmp_path):
    a = gen_dataset(SceneSpec(width=96, height=64), 3, 9, tmp_path / "a")
    b = gen_dataset(SceneSpec(width=96, height=64), 3, 9, tmp_path / "b")
    for name in sorted(os.listdir(a)):
        with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read(), name


def test_strawberry_abundance_over_70_scenes():
    rng = np.random.default_rng(0)
    spec = SceneSpec(width=212, height=120)
    vals = [abundance(generate_scene(spec, rng)[2])[ClassId.STRAWBERRY] for _ in range(70)]
    assert 0.012 <= np.mean(vals) <= 0.032


def test_dataset_reads_back(small_dataset):
    ds = Dataset(small_dataset)
    assert len(ds) == 12
    f = ds.frame(3)
    assert f.rgb.shape == (120, 160, 3) and f.depth.shape == (120, 160)
    assert ds.mask(3).classes.shape == (120, 160)


@pytest.mark.parametrize("transport", ["tcpros", "mqtt-qos0", "mqtt-qos1"])
def test_sim_run_per_transport(small_dataset, transport):
    res = _run(small_dataset, transport=transport, robots=2)
    assert len(res.records) == 12
    assert all(r.ok and r.stages_monotone() for r in res.records)
    assert res.mask_mismatches == 0
    assert res.counters["sync_mismatch"] == 0


@pytest.mark.parametrize("transport", ["tcpros", "mqtt-qos1"])
def test_byte_conservation(small_dataset, transport):
    res = _run(small_dataset, transport=transport, network=_const_net(), robots=2)
    for r, (up, down) in res.links.items():
        mine = [x for x in res.records if x.robot_id == r]
        assert sum(x.bytes_up for x in mine) + res.untagged[r][0] == up.bytes
        assert sum(x.bytes_down for x in mine) + res.untagged[r][1] == down.bytes
        # the run stops when robots finish, so a trailing ack may still be in flight
        for link in (up, down):
            assert link.dropped == 0
            assert 0 <= link.bytes - link.bytes_delivered <= 8


def test_paper_sizes_are_accounted(small_dataset):
    res = _run(small_dataset, paper_sizes=True, network=_const_net(), frames=3)
    # an rgb+depth pair counts as 80 kB and a mask as 16 kB, plus per-message framing
    assert all(80_000 < r.bytes_up < 80_100 and 16_000 < r.bytes_down < 16_050 for r in res.records)
    assert len({r.bytes_up for r in res.records}) == 1


def test_sim_is_deterministic(small_dataset):
    a = to_csv_text(_run(small_dataset, transport="mqtt-qos1", network="wifi", seed=4).records)
    b = to_csv_text(_run(small_dataset, transport="mqtt-qos1", network="wifi", seed=4).records)
    c = to_csv_text(_run(small_dataset, transport="mqtt-qos1", network="wifi", seed=5).records)
    assert a == b and a != c


def test_three_robots_scale_throughput(small_dataset):
    from e5sh.harness.report import end_to_end_fps
    one = end_to_end_fps(_run(small_dataset, robots=1, frames=9).records)
    three = end_to_end_fps(_run(small_dataset, robots=3, frames=9).records)
    assert 2.7 <= three / one <= 3.3


def test_qos1_survives_heavy_loss(small_dataset):
    res = _run(small_dataset, transport="mqtt-qos1", network=_const_net(loss=0.2), frames=20, seed=2)
    assert all(r.ok for r in res.records)
    assert res.mask_mismatches == 0


def test_delayed_oracle_timing_is_exact(small_dataset):
    lat = {"detectron2/edge": {"kind": "constant", "params": [50.0]}}
    res = _run(small_dataset, network=_const_net(2.0), latency=lat, frames=4)
    for r in res.records:
        assert r.t_seg_end - r.t_seg_start == 50 * NS_PER_MS
        assert r.t_result - r.t_sent == 54 * NS_PER_MS


def test_live_smoke(small_dataset):
    res = _run(small_dataset, mode="live", network=_const_net(1.0), frames=3, transport="mqtt-qos1")
    assert len(res.records) == 3 and all(r.ok for r in res.records)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"robots": 1, "bogus": 3})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(mode="live", network=_const_net(loss=0.1))
    with pytest.raises(ConfigurationError):
        ExperimentConfig(mode="live", overhead_ms=5.0, network=_const_net())
    with pytest.raises(ConfigurationError):
        ExperimentConfig(transport="udp")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(model="yolo")
    cfg = ExperimentConfig(robots=2, seed=3)
    assert ExperimentConfig.from_json(json.dumps(cfg.to_dict())) == cfg


def test_resolve_baseline():
    cfgs = ["tcpros/5g/detectron2/edge", "tcpros/5g/detectron2/njxn", "qos0/5g/d2go8/edge"]
    assert resolve_baseline(cfgs[0], cfgs) == cfgs[0]
    assert resolve_baseline("d2go8", cfgs) == cfgs[2]
    with pytest.raises(KeyError):
        resolve_baseline("detectron2", cfgs)


def test_report_identities(small_dataset):
    recs = _run(small_dataset, frames=8).records + \
        _run(small_dataset, frames=8, platform="njxn").records
    out = report(recs, baseline="edge", permutations=20)
    base = out["configs"][out["baseline"]]
    assert base["speedup_vs_baseline"]["fps"] == 1.0
    s = base["fps"]
    assert base["throughput_up_kBps"] == pytest.approx(s * base["bytes_up_mean"] / 1000)
    nj = out["configs"]["tcpros/5g/detectron2/njxn"]["speedup_vs_baseline"]
    assert nj["segmentation_median_per_frame"] == pytest.approx(1 / 18.7, rel=1e-6)


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen", "--out", str(data), "--count", "4", "--seed", "1",
                 "--width", "96", "--height", "64"]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frames": 4, "transport": "mqtt-qos0"}))
    log = tmp_path / "log.csv"
    assert main(["run", "--config", str(cfg), "--data", str(data), "--out", str(log)]) == 0
    assert len(read_csv(str(log))) == 4
    for backend in ("oracle", "heuristic"):
        out = tmp_path / f"{backend}.json"
        assert main(["eval", "--data", str(data), "--backend", backend, "--out", str(out)]) == 0
        assert json.loads(out.read_text())["frames"] == 4
    st = tmp_path / "stats.json"
    assert main(["stats", "--log", str(log), "--shapiro", "--anova", "--out", str(st),
                 "--permutations", "20"]) == 0
    assert "shapiro_wilk" in json.loads(st.read_text())
    en = tmp_path / "energy.json"
    assert main(["energy", "--robots", "12", "--out", str(en)]) == 0
    assert json.loads(en.read_text())["break_even"] == 10
    rp = tmp_path / "summary.json"
    assert main(["report", "--log", str(log), "--baseline", "qos0", "--out", str(rp),
                 "--permutations", "20"]) == 0
    assert json.loads(rp.read_text())["baseline"] == "qos0/5g/detectron2/edge"
    assert main(["energy", "--robots", "0", "--out", str(en)]) == 2
    assert main(["run", "--config", str(cfg), "--data", str(tmp_path / "none"), "--out", str(log)]) == 1
