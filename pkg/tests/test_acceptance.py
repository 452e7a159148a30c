"""Acceptance criteria 1-12, one test each, in sim mode with fixed seeds.

Each test prints a single PASS/FAIL line for its criterion.
"""

import contextlib
import json
import math

import numpy as np
import pytest
import scipy.stats

import test_metrics as metrics_suite
import test_occmap as occ_suite
from _oracles import planted
from test_mqtt import qos0_under_loss, qos1_under_loss
from test_netem import rtt_stats
from test_occmap import octree_matches_dense, planning_maps_filter_non_target
from e5sh.core import ClassId
from e5sh.energy import break_even, consumption_ratio, default_power_models, power_at
from e5sh.harness.cli import main
from e5sh.harness.experiment import ExperimentConfig, run_experiment
from e5sh.harness.report import evaluate, report
from e5sh.metrics import (confusion, factor_analysis_2x3, picking_cycle_estimate, scores,
                          shapiro_wilk, throughput)
from e5sh.metrics.stats import NETWORKS, PROTOCOLS
from e5sh.metrics.timing import EDGE_PER_CYCLE_S, ROBOT_PC_PER_CYCLE_S


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def check(n, title):
        ok = False
        try:
            yield
            ok = True
        finally:
            with capsys.disabled():
                print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}")
    return check


def test_01_throughput_identity(criterion):
    with criterion(1, "throughput(30, 80 kB) = 2400 and throughput(50, 25 kB) = 1250 kB/s"):
        assert throughput(30, 80_000) == 2400
        assert throughput(50, 25_000) == 1250


def test_02_compute_speedup(criterion, small_dataset):
    with criterion(2, "edge vs njxn segmentation speedup 18.7 +- 0.2; d2go > 4.0"):
        for model, check in (("detectron2", lambda s: abs(s - 18.7) <= 0.2),
                             ("d2go8", lambda s: s > 4.0), ("d2go32", lambda s: s > 4.0)):
            recs = []
            for platform in ("edge", "njxn"):
                cfg = ExperimentConfig(frames=40, model=model, platform=platform, seed=11,
                                       timeout_s=60.0, build_maps=False)
                recs += run_experiment(cfg, small_dataset).records
            out = report(recs, baseline=f"{model}/njxn", permutations=10)
            sp = out["configs"][f"tcpros/5g/{model}/edge"]["speedup_vs_baseline"]
            assert check(sp["segmentation_median_per_frame"]), (model, sp)


def test_03_cumulative_fps(criterion, small_dataset):
    with criterion(3, "edge/detectron2 over 5g, 34.3 ms overhead: fps 8.6 +- 0.4, identity within 2%"):
        cfg = ExperimentConfig(frames=300, network="5g", paper_sizes=True, overhead_ms=34.3, seed=1)
        res = run_experiment(cfg, small_dataset)
        assert all(r.ok for r in res.records)
        s = report(res.records)["configs"]["tcpros/5g/detectron2/edge"]
        assert abs(s["fps"] - 8.6) <= 0.4, s["fps"]
        assert s["overhead_ms_mean"] == pytest.approx(34.3, rel=0.02)
        assert abs(s["fps"] - s["fps_identity"]) <= 0.02 * s["fps_identity"]


@pytest.mark.parametrize("seed", [3, 17, 29])
def test_04_qos_semantics(criterion, seed):
    with criterion(4, f"20% loss, seed {seed}: QoS1 1000/1000 distinct, dups flagged; QoS0 in 3-sigma of 0.8"):
        w = qos1_under_loss(1000, 0.2, seed)
        seen = set()
        for p in w.inbox["sub"]:
            assert p.payload not in seen or p.dup
            seen.add(p.payload)
        assert len(seen) == 1000
        n, p = 1000, 0.8
        got = len(qos0_under_loss(n, 0.2, seed).inbox["sub"])
        assert abs(got - n * p) <= 3 * math.sqrt(n * p * (1 - p)), got


def test_05_network_ordering(criterion):
    with criterion(5, "500 probes: 5g median and IQR below wifi; 5g median < 16.7 ms"):
        g, w = rtt_stats("5g", 500), rtt_stats("wifi", 500)
        assert g.median < w.median and g.iqr < w.iqr
        assert g.median < 16.7


def test_06_segmentation_metrics(criterion, small_dataset):
    with criterion(6, "oracle F1 = 1 for all classes; 2x2 example p=1 r=0.75 F1=6/7"):
        out = evaluate(small_dataset, "oracle")
        for c in ClassId:
            entry = out["classes"][c.name.lower()]
            assert entry["pooled"]["f1"] == 1.0
            assert entry["f1"]["median"] == entry["f1"]["q1"] == 1.0
        gt = np.full((2, 2), ClassId.STRAWBERRY, np.uint8)
        pred = gt.copy()
        pred[1, 1] = ClassId.CANOPY
        s = scores(confusion(pred, gt))[ClassId.STRAWBERRY]
        assert (s.p, s.r, s.f1) == (1.0, 0.75, 6 / 7)


def test_07_octree_oracle(criterion):
    with criterion(7, "100 random scenes match the dense oracle; clamp and monotone suites pass"):
        assert all(octree_matches_dense(seed) for seed in range(100))
        occ_suite.test_log_odds_stay_clamped()
        occ_suite.test_monotone_under_repeated_hits()
        occ_suite.test_monotone_under_repeated_misses()


def test_08_non_target_filtering(criterion):
    with criterion(8, "non-target berries absent from both maps, target present, 100/100 scenes"):
        assert sum(planning_maps_filter_non_target(seed) for seed in range(100)) == 100


def test_09_statistics(criterion):
    with criterion(9, "Shapiro-Wilk vs reference; planted network/protocol effects found, QoS0 = QoS1"):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(100)
        sw = shapiro_wilk(x)
        assert abs(sw.W - scipy.stats.shapiro(x).statistic) < 1e-3 and sw.p_value > 0.05
        assert shapiro_wilk(np.random.default_rng(0).exponential(size=100)).p_value < 0.01

        means = {(n, p): (100.0 if n == "5g" else 90.0) + (10.0 if p == "tcpros" else 0.0)
                 for n in NETWORKS for p in PROTOCOLS}
        obs = planted(means, seed=2)
        res = factor_analysis_2x3(obs, permutations=2000)
        assert res.p_value["network"] < 0.01 and res.p_value["protocol"] < 0.01
        qos = [o for o in obs if o[1] != "tcpros"]
        res2 = factor_analysis_2x3(qos, levels_b=("qos0", "qos1"), permutations=2000)
        assert res2.p_value["protocol"] > 0.05
        metrics_suite.test_factor_network_effect()


def test_10_energy(criterion):
    with criterion(10, "power anchors exact; ratio(1) > 3, ratio(5) < 2.4, ratio(12) in [2.0, 2.3]; break-even 10"):
        edge = default_power_models()[("edge", "detectron2")]
        assert [power_at(edge, n) for n in (1, 2, 3, 12)] == [33.6, 48.3, 59.7, 240.0]
        assert consumption_ratio(1) > 3
        assert consumption_ratio(5) < 2.4
        assert 2.0 <= consumption_ratio(12) <= 2.3
        assert break_even() == 10


def test_11_picking_cycle(criterion):
    with criterion(11, "3 edge cycles <= 3.1 s; 3 robot-PC cycles = 12 s"):
        assert picking_cycle_estimate(3, EDGE_PER_CYCLE_S) <= 3.1
        assert ROBOT_PC_PER_CYCLE_S == 4.0
        assert picking_cycle_estimate(3, ROBOT_PC_PER_CYCLE_S) == 12.0


def test_12_determinism(criterion, small_dataset, tmp_path):
    with criterion(12, "repeated `e5sh run` with the same config and seed is byte-identical"):
        for i, cfg in enumerate([{"frames": 20, "transport": "tcpros", "seed": 1},
                                 {"frames": 20, "transport": "mqtt-qos1", "network": "wifi", "seed": 2,
                                  "robots": 2},
                                 {"frames": 20, "transport": "mqtt-qos0", "platform": "njxn",
                                  "model": "d2go8", "seed": 3}]):
            path = tmp_path / f"cfg{i}.json"
            path.write_text(json.dumps(cfg))
            logs = []
            for j in range(2):
                out = tmp_path / f"log{i}_{j}.csv"
                assert main(["run", "--config", str(path), "--data", small_dataset, "--out", str(out)]) == 0
                logs.append(out.read_bytes())
            assert logs[0] == logs[1] and len(logs[0]) > 0
