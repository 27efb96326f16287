from __future__ import annotations

import base64
import contextlib
import io
import json
import subprocess
import sys
import threading
import time
from collections import deque
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .policy import Policy
from .ppo import RolloutBatch

PROTOCOL_VERSION = 1
DEFAULT_STARTUP_TIMEOUT = 30.0
DIAGNOSTIC_LINES = 50
SHUTDOWN_GRACE = 1.0
LOG_READER_JOIN = 0.2


def encode_array(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr), allow_pickle=False)
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_array(data: str) -> np.ndarray:
    return np.load(io.BytesIO(base64.b64decode(data.encode("ascii"))), allow_pickle=False)


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> dict[str, str]:
    return {name: encode_array(arr) for name, arr in arrays.items()}


def decode_arrays(data: Mapping[str, str]) -> dict[str, np.ndarray]:
    return {name: decode_array(blob) for name, blob in data.items()}


def policy_to_payload(policy: Policy) -> dict[str, Any]:
    return {"header": policy.header(), "arrays": encode_arrays(policy.state_arrays())}


def policy_from_payload(payload: Mapping[str, Any]) -> Policy:
    return Policy.from_arrays(payload["header"], decode_arrays(payload["arrays"]))


def split_evenly(n: int, parts: int) -> list[int]:
    return [n // parts + (1 if i < n % parts else 0) for i in range(parts)]


class RolloutWorker:
    """One ``python -m mp_insertion.worker`` subprocess speaking line-delimited JSON over stdio.

    The worker's stderr is kept as a short diagnostic tail that is attached to every error raised
    for it.
    """

    def __init__(
        self,
        config_path: str | Path,
        index: int = 0,
        *,
        startup_timeout: float = DEFAULT_STARTUP_TIMEOUT,
        debug: bool = False,
        extra_args: Sequence[str] = (),
    ) -> None:
        self.config_path = str(config_path)
        self.index = index
        self.startup_timeout = startup_timeout
        self.debug = debug
        self.extra_args = list(extra_args)
        self._diagnostics: deque[str] = deque(maxlen=DIAGNOSTIC_LINES)
        self._log_reader: Optional[threading.Thread] = None
        self._log_source: Optional[subprocess.Popen] = None
        self._restart_attempted = False
        self._lock = threading.Lock()
        self._pending: Optional[dict] = None
        self._proc = self._launch()

    def _log(self, message: str) -> None:
        if not self.debug:
            return
        sys.stderr.write(f"[mp-insertion] worker {self.index}: {message}\n")
        sys.stderr.flush()

    def _launch(self) -> subprocess.Popen:
        """Start the worker process, follow its stderr and wait until it reports ready."""
        cmd = [sys.executable, "-m", "mp_insertion.worker", "--config", self.config_path, "--index", str(self.index)]
        cmd.extend(self.extra_args)
        if self.debug:
            cmd.append("--debug")
            self._log(f"starting: cmd={' '.join(cmd)}")
        proc = subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        self._diagnostics.clear()
        self._log_source = proc
        self._log_reader = threading.Thread(
            target=self._follow_log, args=(proc,), name=f"rollout-worker-{self.index}-log", daemon=True
        )
        self._log_reader.start()
        try:
            self._await_ready(proc)
        except BaseException:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
            raise
        return proc

    def _follow_log(self, proc: subprocess.Popen) -> None:
        # runs until the process closes stderr; lines from a replaced process are dropped
        if proc.stderr is None:
            return
        for line in proc.stderr:
            if proc is self._log_source:
                self._diagnostics.append(line.rstrip("\n"))

    def _join_log_reader(self) -> None:
        reader, self._log_reader = self._log_reader, None
        if reader is not None and reader.is_alive():
            reader.join(timeout=LOG_READER_JOIN)

    def diagnostics(self) -> str:
        """The last lines the worker wrote to stderr."""
        return "\n".join(self._diagnostics)

    @property
    def pid(self) -> int:
        return self._proc.pid

    def _await_ready(self, proc: subprocess.Popen) -> None:
        if proc.stdout is None:
            raise RuntimeError(f"rollout worker {self.index} has no stdout pipe")
        started = time.monotonic()
        line = ""
        while not line:
            if time.monotonic() - started > self.startup_timeout:
                self._log("no handshake before the startup timeout")
                raise TimeoutError(f"rollout worker {self.index} did not report ready within {self.startup_timeout:g}s")
            line = proc.stdout.readline()
            if not line and proc.poll() is not None:
                self._log(f"exited before the handshake (code={proc.returncode})")
                raise RuntimeError(
                    f"rollout worker {self.index} exited with code {proc.returncode} before it was ready; "
                    f"stderr:\n{self.diagnostics()}"
                )
        try:
            hello = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RuntimeError(f"rollout worker {self.index} sent a malformed handshake: {line[:200]!r}") from exc
        if not isinstance(hello, dict) or hello.get("type") != "handshake":
            raise RuntimeError(f"rollout worker {self.index} sent {hello!r} instead of a handshake")
        if hello.get("status") != "ok":
            err = hello.get("error") or {}
            raise RuntimeError(f"rollout worker {self.index} rejected {self.config_path}: {err.get('message')}")
        if hello.get("protocol") != PROTOCOL_VERSION:
            raise RuntimeError(f"rollout worker speaks protocol {hello.get('protocol')!r}, expected {PROTOCOL_VERSION}")
        if hello.get("worker") != self.index:
            raise RuntimeError(f"handshake from worker {hello.get('worker')!r} on the pipe of worker {self.index}")
        self._log(f"ready (pid={proc.pid}, startup={time.monotonic() - started:.3f}s)")

    def close(self) -> None:
        """Ask the worker to shut down; terminate, then kill, if it does not exit in time."""
        proc = self._proc
        if proc.poll() is None:
            self._log("requesting shutdown")
            with contextlib.suppress(OSError, ValueError):
                if proc.stdin is not None:
                    proc.stdin.write(json.dumps({"type": "shutdown"}) + "\n")
                    proc.stdin.flush()
            for stop in (None, proc.terminate, proc.kill):
                if stop is not None:
                    self._log(f"still running, calling {stop.__name__}()")
                    stop()
                try:
                    proc.wait(timeout=SHUTDOWN_GRACE)
                    break
                except subprocess.TimeoutExpired:
                    continue
        self._join_log_reader()
        self._log(f"closed (exit code {proc.returncode})")

    def __enter__(self) -> "RolloutWorker":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:  # noqa: ANN001
        self.close()

    def submit(self, message: dict) -> None:
        """Write one request line; pair with :meth:`receive`."""
        if self._pending is not None:
            raise RuntimeError(f"worker {self.index} already has a request in flight")
        if self._proc.poll() is not None:
            self._ensure_running(reason="process exited before send")
        self._pending = message
        self._write(message)

    def _write(self, message: dict) -> None:
        if self._proc.stdin is None:
            raise RuntimeError("worker pipes unavailable")
        self._log(f"-> {message.get('type')}")
        with self._lock:
            try:
                self._proc.stdin.write(json.dumps(message, separators=(",", ":")) + "\n")
                self._proc.stdin.flush()
            except BrokenPipeError:
                pass

    def receive(self) -> dict:
        if self._pending is None:
            raise RuntimeError(f"worker {self.index} has no request in flight")
        message = self._pending
        if self._proc.stdout is None:
            raise RuntimeError("worker pipes unavailable")
        line = self._proc.stdout.readline()
        if not line:
            self._proc.wait(timeout=5.0)
            # requests are stateless, so a restarted worker can answer the same message
            self._ensure_running(reason="process exited during read")
            self._write(message)
            line = self._proc.stdout.readline()
            if not line:
                self._pending = None
                raise RuntimeError(f"rollout worker {self.index} exited mid-request; stderr:\n{self.diagnostics()}")
        self._pending = None
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RuntimeError(f"invalid response: {line[:200]!r}") from exc
        self._log(f"<- {data.get('type')} status={data.get('status')}")
        if data.get("status") == "error":
            err = data.get("error") or {}
            raise RuntimeError(f"worker {self.index} {message.get('type')} failed: {err.get('type')}: {err.get('message')}")
        return data

    def request(self, message: dict) -> dict:
        self.submit(message)
        return self.receive()

    def reset(self) -> None:
        data = self.request({"type": "reset"})
        if data.get("type") != "reset" or data.get("status") != "ok":
            raise RuntimeError(f"reset failed: {data}")

    def _ensure_running(self, *, reason: str | None = None) -> None:
        if self._proc.poll() is None:
            return
        tail = self.diagnostics()
        self._log(f"found dead ({reason or 'unknown'}, code={self._proc.returncode}); stderr tail:\n{tail}")
        if not self._restart_attempted:
            self._restart_attempted = True
            self._join_log_reader()
            self._proc = self._launch()
            self._log("relaunched")
            return
        raise RuntimeError(f"rollout worker {self.index} died again after its one relaunch; stderr:\n{tail}")


class WorkerPool:
    """Fan requests out to N workers and merge the answers in worker order."""

    def __init__(self, config_path: str | Path, workers: int, seed: int, *, debug: bool = False) -> None:
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.seed = seed
        self.workers: list[RolloutWorker] = []
        try:
            for i in range(workers):
                self.workers.append(RolloutWorker(config_path, i, debug=debug))
        except Exception:
            self.close()
            raise

    def close(self) -> None:
        for worker in self.workers:
            worker.close()

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:  # noqa: ANN001
        self.close()

    def _scatter(self, messages: Sequence[Optional[dict]]) -> list[Optional[dict]]:
        active = [(w, m) for w, m in zip(self.workers, messages) if m is not None]
        for worker, message in active:
            worker.submit(message)
        replies = {worker.index: worker.receive() for worker, _ in active}
        return [replies.get(w.index) for w in self.workers]

    def collect(self, policy: Policy, n: int, update_index: int) -> RolloutBatch:
        payload = policy_to_payload(policy)
        sizes = split_evenly(n, len(self.workers))
        messages = [
            {"type": "collect", "n": size, "seed": self.seed, "update": update_index, "policy": payload} if size else None
            for size in sizes
        ]
        batches = [RolloutBatch.from_arrays(decode_arrays(r["batch"])) for r in self._scatter(messages) if r is not None]
        return RolloutBatch.concatenate(batches)

    def evaluate(self, request: Mapping[str, Any], seeds: Sequence[int]) -> list[dict]:
        """Spread trial seeds over the workers; records come back in seed order."""
        chunks = split_evenly(len(seeds), len(self.workers))
        messages: list[Optional[dict]] = []
        start = 0
        for size in chunks:
            part = list(seeds[start : start + size])
            start += size
            messages.append({"type": "evaluate", **request, "seeds": part} if part else None)
        records: list[dict] = []
        for reply in self._scatter(messages):
            if reply is not None:
                records.extend(reply["records"])
        return records

    def reset(self) -> None:
        for worker in self.workers:
            worker.reset()
