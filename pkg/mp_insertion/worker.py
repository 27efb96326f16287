from __future__ import annotations

import argparse
import faulthandler
import json
import signal
import sys
from typing import Any, Callable, Optional

from .baselines import FixSeqParams
from .config import ConfigError, RunConfig, load_run_config
from .harness import check_compatible, make_env, run_episode, run_fix_seq_trials
from .ppo import collect, segment_rng
from .workers import PROTOCOL_VERSION, encode_arrays, policy_from_payload


class _Session:
    """Per-process state: the run config and a lazily built environment."""

    def __init__(self, cfg: RunConfig, index: int, log: Callable[[str], None]) -> None:
        self.cfg = cfg
        self.index = index
        self.log = log
        self._env = None

    @property
    def env(self):
        if self._env is None:
            self._env = make_env(self.cfg)
            self.log(f"environment built for method {self.cfg.method}")
        return self._env

    def reset(self) -> dict:
        self._env = None
        return {"type": "reset", "status": "ok"}

    def collect(self, message: dict) -> dict:
        policy = policy_from_payload(message["policy"])
        env = self.env
        check_compatible(policy, env)
        rng = segment_rng(int(message["seed"]), int(message["update"]), self.index)
        batch = collect(policy, env, int(message["n"]), rng)
        self.log(f"collected {len(batch)} transitions, {batch.total_sim_steps} sim steps")
        return {"type": "collect", "status": "ok", "batch": encode_arrays(batch.arrays())}

    def evaluate(self, message: dict) -> dict:
        seeds = [int(s) for s in message["seeds"]]
        kind = message.get("kind")
        if kind == "policy":
            policy = policy_from_payload(message["policy"])
            check_compatible(policy, self.env)
            records = [run_episode(policy, self.env, s) for s in seeds]
        elif kind == "fix_seq":
            records = run_fix_seq_trials(FixSeqParams(message["params"]), self.cfg, seeds)
        else:
            raise ValueError(f"unknown evaluation kind {kind!r}")
        return {"type": "evaluate", "status": "ok", "records": [r.to_dict() for r in records]}

    def handle(self, message: dict) -> Optional[dict]:
        kind = message.get("type")
        if kind == "collect":
            return self.collect(message)
        if kind == "evaluate":
            return self.evaluate(message)
        if kind == "reset":
            self.log("reset requested")
            return self.reset()
        raise ValueError(f"unknown request type {kind!r}")


def _error(kind: Optional[str], exc: BaseException) -> dict:
    return {"type": kind, "status": "error", "error": {"type": exc.__class__.__name__, "message": str(exc)}}


def _run(config_path: str, index: int, debug: bool) -> int:
    # on-demand stack dump while debugging a stuck worker
    try:
        faulthandler.register(signal.SIGUSR1, chain=True)
    except Exception:
        pass

    def _log(message: str) -> None:
        if debug:
            print(f"[mp-insertion worker {index}] {message}", file=sys.stderr, flush=True)

    _log(f"loading config {config_path}")
    try:
        cfg = load_run_config(config_path)
    except ConfigError as exc:
        _log(f"config rejected: {exc}")
        print(json.dumps(_error("handshake", exc)), flush=True)
        return 1
    session = _Session(cfg, index, _log)
    _log("handshake ready")
    print(json.dumps({"type": "handshake", "status": "ok", "protocol": PROTOCOL_VERSION, "worker": index}), flush=True)

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        kind: Optional[str] = None
        try:
            message = json.loads(line)
            kind = message.get("type")
            if kind == "shutdown":
                _log("shutdown requested")
                return 0
            result: Any = session.handle(message)
        except Exception as exc:
            _log(f"handler error: {exc.__class__.__name__}: {exc}")
            result = _error(kind, exc)
        sys.stdout.write(json.dumps(result, separators=(",", ":")) + "\n")
        sys.stdout.flush()
    return 0


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", required=True, help="Run configuration JSON shared with the trainer")
    parser.add_argument("--index", type=int, default=0, help="Worker index; selects the worker's random stream")
    parser.add_argument("--debug", action="store_true", help="Enable verbose worker logging to stderr")
    args = parser.parse_args(argv)
    sys.exit(_run(args.config, args.index, args.debug))


if __name__ == "__main__":
    main()
