"""Persistent FIFO job store with a bounded worker pool.

Every state transition is appended to a JSONL journal and the store is
rebuilt by replay at startup: jobs that were `running` when the process
died come back as `failed` (never half-done), `queued` jobs are re-queued.
"""

from __future__ import annotations

import json
import queue
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import InvalidArgumentError

QUEUED, RUNNING, DONE, FAILED = "queued", "running", "done", "failed"
_TRANSITIONS = {QUEUED: {RUNNING, FAILED}, RUNNING: {DONE, FAILED}, DONE: set(), FAILED: set()}
JOB_KINDS = ("generate", "segment", "export")


@dataclass
class Job:
    id: str
    kind: str
    payload: dict
    status: str = QUEUED
    created: float = 0.0
    started: float | None = None
    finished: float | None = None
    result: dict | None = None
    error: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)


class JobStore:
    """Journal-backed job table; single-writer via an internal lock."""

    def __init__(self, journal_path):
        self.journal_path = Path(journal_path)
        self._lock = threading.Lock()
        self.jobs: dict[str, Job] = {}
        self._replay()

    def _replay(self) -> None:
        if not self.journal_path.is_file():
            return
        with open(self.journal_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                self.jobs[row["id"]] = Job(**row)
        # a job that was mid-flight when the process died is failed, not half-done
        for job in self.jobs.values():
            if job.status == RUNNING:
                job.status = FAILED
                job.error = "interrupted by restart"
                job.finished = time.time()
                self._append(job)

    def _append(self, job: Job) -> None:
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(job.as_dict(), ensure_ascii=False) + "\n")
            fh.flush()

    def create(self, kind: str, payload: dict) -> Job:
        if kind not in JOB_KINDS:
            raise InvalidArgumentError(f"unknown job kind {kind!r}")
        job = Job(id=uuid.uuid4().hex[:16], kind=kind, payload=payload, created=time.time())
        with self._lock:
            self.jobs[job.id] = job
            self._append(job)
        return job

    def transition(self, job_id: str, status: str, result: dict | None = None, error: str | None = None) -> Job:
        with self._lock:
            job = self.jobs[job_id]
            if status not in _TRANSITIONS[job.status]:
                raise InvalidArgumentError(f"illegal transition {job.status} -> {status}")
            job.status = status
            if status == RUNNING:
                job.started = time.time()
            else:
                job.finished = time.time()
            if result is not None:
                job.result = result
            if error is not None:
                job.error = error
            self._append(job)
            return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self.jobs.get(job_id)

    def pending(self) -> list[Job]:
        with self._lock:
            return sorted((j for j in self.jobs.values() if j.status == QUEUED), key=lambda j: j.created)


@dataclass
class JobRunner:
    """FIFO queue drained by a bounded pool of worker threads."""

    store: JobStore
    handlers: dict
    workers: int = 2
    _queue: queue.Queue = field(default_factory=queue.Queue)
    _threads: list = field(default_factory=list)
    _stop: threading.Event = field(default_factory=threading.Event)

    def start(self) -> None:
        for job in self.store.pending():  # re-queue survivors of a restart
            self._queue.put(job.id)
        for i in range(self.workers):
            t = threading.Thread(target=self._worker, name=f"job-worker-{i}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2.0)

    def submit(self, kind: str, payload: dict) -> Job:
        job = self.store.create(kind, payload)
        self._queue.put(job.id)
        return job

    def _worker(self) -> None:
        while not self._stop.is_set():
            try:
                job_id = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            job = self.store.get(job_id)
            if job is None or job.status != QUEUED:
                continue
            self.store.transition(job_id, RUNNING)
            try:
                result = self.handlers[job.kind](job.payload)
            except Exception as exc:  # job isolation: one failure never kills the pool
                self.store.transition(job_id, FAILED, error=f"{type(exc).__name__}: {exc}")
            else:
                self.store.transition(job_id, DONE, result=result)
