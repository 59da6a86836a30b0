"""Run training serially or as localhost worker subprocesses."""

from __future__ import annotations

import logging
import os
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from .collective import rendezvous
from .training import TrainConfig, TrainingLog, prepare_dataset, run_training, write_outputs

log = logging.getLogger(__name__)


class WorkerFailure(RuntimeError):
    def __init__(self, rank: int, returncode: int, detail: str = ""):
        self.rank = rank
        self.returncode = returncode
        msg = f"worker rank {rank} failed with exit code {returncode}"
        super().__init__(msg + (f": {detail}" if detail else ""))


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def run_worker(config: TrainConfig, rank: int, world: int, address: str) -> TrainingLog:
    """Body of one worker process: join the ring, train, write outputs."""
    if world != config.world:
        raise ValueError(f"world {world} does not match layout {config.layout}")
    ds = prepare_dataset(config)
    with rendezvous(world, address, rank, timeout=config.timeout) as group:
        dims, params, state, history = run_training(config, ds, group)
        group.barrier()
    write_outputs(config, dims, params, state, history, rank)
    return history


def _tail(path: Path, lines: int = 5) -> str:
    try:
        text = path.read_text(errors="replace").strip().splitlines()
    except OSError:
        return ""
    return " | ".join(text[-lines:])


def spawn_workers(config: TrainConfig, host: str = "127.0.0.1", poll: float = 0.05) -> None:
    """Start ``config.world`` worker subprocesses and wait for all of them.

    The first worker seen exiting with a nonzero code aborts the group and
    is reported by rank.
    """
    world = config.world
    address = f"{host}:{free_port(host)}"
    with tempfile.TemporaryDirectory(prefix="cfdsurrogate-") as tmp:
        cfg_path = Path(tmp) / "worker.cfg"
        cfg_path.write_text(config.to_text(), encoding="utf-8")
        procs, errs = [], []
        env = dict(os.environ)
        for rank in range(world):
            err = Path(tmp) / f"rank{rank}.err"
            errs.append(err)
            cmd = [sys.executable, "-m", "cfdsurrogate", "worker", "--config", str(cfg_path),
                   "--rank", str(rank), "--world", str(world), "--address", address]
            with open(err, "wb") as fh:
                procs.append(subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=fh, env=env))
        try:
            pending = set(range(world))
            while pending:
                for rank in sorted(pending):
                    code = procs[rank].poll()
                    if code is None:
                        continue
                    pending.discard(rank)
                    if code != 0:
                        raise WorkerFailure(rank, code, _tail(errs[rank]))
                time.sleep(poll)
        finally:
            for p in procs:
                if p.poll() is None:
                    p.kill()
                    p.wait()


def launch(config: TrainConfig) -> tuple[bytes, TrainingLog]:
    """Train per ``config.layout``; returns the rank-0 checkpoint bytes and its log."""
    if config.world == 1:
        ds = prepare_dataset(config)
        dims, params, state, history = run_training(config, ds)
        write_outputs(config, dims, params, state, history)
        return Path(config.checkpoint).read_bytes(), history

    with tempfile.TemporaryDirectory(prefix="cfdsurrogate-log-") as tmp:
        cfg = config if config.log else replace(config, log=str(Path(tmp) / "train.json"))
        spawn_workers(cfg)
        history = TrainingLog.from_json(Path(cfg.log).read_text())
    return Path(config.checkpoint).read_bytes(), history
