from dataclasses import replace

import pytest

from fedirr.client import FEATURE_DIM, FEATURE_NAMES, EdgeNode, read_telemetry
from fedirr.config import ExperimentConfig
from fedirr.experiment import node_ids, run_demo, validation_set
from fedirr.learning import ModelParams, TrainConfig, local_train
from fedirr.server import checkpoint_load, checkpoint_path


@pytest.fixture(scope="module")
def single(tmp_path_factory):
    cfg = replace(ExperimentConfig(), nodes=1, ticks=80,
                  train=TrainConfig(local_epochs=30, learning_rate=0.2, max_rounds=6,
                                    convergence_tol=1e-12))
    out = tmp_path_factory.mktemp("single")
    return cfg, out, run_demo(cfg, out, figures=False)


class TestSingleNode:
    def test_rounds_match_centralized(self, single):
        cfg, out, result = single
        replay = EdgeNode("node-01", cfg)
        model = ModelParams.zeros(FEATURE_DIM, FEATURE_NAMES)
        rounds = result.training.final.round
        assert rounds == cfg.train.max_rounds
        for r in range(rounds):
            replay.model = model
            replay.run(cfg.ticks_per_round)
            data = replay.training_data()
            if len(data) < FEATURE_DIM + 2:
                expected = model.weights
            else:
                expected = local_train(model, data, cfg.train).weights
            ckpt = checkpoint_load(checkpoint_path(out / "checkpoints", r + 1))
            assert ckpt.weights == expected
            model = ckpt.params()

    def test_telemetry_rows(self, single):
        cfg, out, _ = single
        rows = read_telemetry(out / "telemetry" / "node-01.csv")
        assert [int(r["tick"]) for r in rows] == list(range(cfg.ticks))

    def test_alert_log_sorted(self, single):
        _, out, _ = single
        lines = (out / "alerts.log").read_text().splitlines()
        ticks = [int(line.split()[2].split("=")[1]) for line in lines]
        assert ticks == sorted(ticks)


def test_node_ids():
    assert node_ids(3) == ["node-01", "node-02", "node-03"]


def test_validation_is_seed_separated():
    cfg = replace(ExperimentConfig(), ticks=40)
    val = validation_set(cfg)
    node = EdgeNode("node-01", cfg)
    node.run()
    assert len(val) == 39
    assert [e.features for e in val] != [e.features for e in node.training_data()]
