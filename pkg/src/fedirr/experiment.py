"""All-in-one local run: server and nodes in one process over loopback TCP."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from pathlib import Path

from . import config as config_mod
from .alerts import AlertDispatcher, SinkConfig
from .client import (FEATURE_DIM, FEATURE_NAMES, ClientResult, EdgeNode, run_client,
                     simulate_offline, write_telemetry)
from .config import ExperimentConfig
from .report import node_summary, write_report
from .server import AggregationServer, TrainingResult

log = logging.getLogger(__name__)

VALIDATION_NODE = "__validation__"


def node_ids(n: int) -> list[str]:
    return [f"node-{i:02d}" for i in range(1, n + 1)]


def validation_set(cfg: ExperimentConfig):
    """Held-out examples from a seed-separated reactive node on the same scenario."""
    node = simulate_offline(cfg, VALIDATION_NODE, policy="reactive", buffer_cap=cfg.ticks + 1)
    return node.training_data()


@dataclass
class DemoResult:
    run_dir: Path
    training: TrainingResult
    nodes: list[EdgeNode]
    summary: list[dict]


def run_demo(cfg: ExperimentConfig, run_dir, figures: bool = True) -> DemoResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config_mod.dumps(cfg), encoding="utf-8")
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for old in ckpt_dir.glob("round_*.json"):
        old.unlink()

    server = AggregationServer(FEATURE_DIM, cfg.train, listen="127.0.0.1:0", out_dir=ckpt_dir,
                               deadline_s=cfg.server.deadline_s, validation=validation_set(cfg),
                               feature_names=FEATURE_NAMES)
    ids = node_ids(cfg.nodes)
    results: dict[str, ClientResult] = {}
    errors: dict[str, BaseException] = {}

    def worker(node_id: str) -> None:
        try:
            results[node_id] = run_client(cfg, node_id, server.address)
        except BaseException as exc:  # reported after join
            errors[node_id] = exc

    with server:
        server.bind()
        threads = [threading.Thread(target=worker, args=(nid,), name=f"node-{nid}", daemon=True)
                   for nid in ids]
        for t in threads:
            t.start()
        registered = server.wait_for_clients(cfg.nodes, cfg.server.registration_timeout_s)
        if registered < cfg.nodes:
            log.warning("only %d of %d nodes registered", registered, cfg.nodes)
        training = server.run_training()
    for t in threads:
        t.join()
    if errors:
        node_id, exc = sorted(errors.items())[0]
        raise RuntimeError(f"node {node_id} failed: {exc}") from exc

    nodes = [results[nid].node for nid in ids]
    for node in nodes:
        write_telemetry(run_dir / "telemetry" / f"{node.node_id}.csv", node.records)

    # alerts are dispatched after the run, in (tick, node) order, so the log is reproducible
    alerts_log = run_dir / "alerts.log"
    alerts_log.write_text("", encoding="utf-8")
    dispatcher = AlertDispatcher(
        list(cfg.sinks) + [SinkConfig(kind="file", target=str(alerts_log), rate_limit=4)],
        dt_hours=cfg.dt_hours)
    events = sorted((e for node in nodes for r in node.records for e in r.alerts),
                    key=lambda e: (e.tick, e.node_id))
    for event in events:
        dispatcher.dispatch(event)

    summary = [node_summary(node) for node in nodes]
    write_report(run_dir, summary, cfg, training, nodes if figures else None)
    return DemoResult(run_dir=run_dir, training=training, nodes=nodes, summary=summary)
