from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, BinaryIO, Callable, Dict, Iterable, Iterator, List, Optional, Tuple

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

RECORD_HEADER = struct.Struct("<IQI")  # key length, seq, value length
RUN_SUFFIX = ".run"
PART_PREFIX = "part-"
MANIFEST_NAME = "manifest.json"
DEFAULT_SPILL_BYTES = 256 * 1024 * 1024

MapFn = Callable[[Any], Iterable[Tuple[bytes, bytes]]]
ReduceFn = Callable[[bytes, Iterator[bytes]], Iterable[Tuple[bytes, bytes]]]

_MAP_FUNCTIONS: Dict[str, MapFn] = {}
_REDUCE_FUNCTIONS: Dict[str, ReduceFn] = {}
_TASK_CONTEXT = threading.local()


class JobError(RuntimeError):
    def __init__(self, task: str, message: str):
        self.task = task
        super().__init__(f"{task}: {message}")


class BroadcastMissingError(RuntimeError):
    pass


@dataclass(frozen=True)
class KvRecord:
    key: bytes
    value: bytes
    seq: int


@dataclass
class JobSpec:
    name: str
    inputs: List[Any]
    map_fn: str
    reduce_fn: str
    partitions: int = 1
    broadcast: Optional[bytes] = None
    scratch: Path = Path("scratch")
    max_retries: int = 2
    spill_bytes: int = DEFAULT_SPILL_BYTES

    def fingerprint(self) -> str:
        payload = {
            "name": self.name,
            "inputs": [str(x) for x in self.inputs],
            "map_fn": self.map_fn,
            "reduce_fn": self.reduce_fn,
            "partitions": self.partitions,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class JobResult:
    outputs: List[Path]
    manifest: Path
    emitted: int
    reduced: int
    logs: List[Dict[str, str]] = field(default_factory=list)


def register_map(name: str) -> Callable[[MapFn], MapFn]:
    def _wrap(fn: MapFn) -> MapFn:
        _MAP_FUNCTIONS[name] = fn
        return fn

    return _wrap


def register_reduce(name: str) -> Callable[[ReduceFn], ReduceFn]:
    def _wrap(fn: ReduceFn) -> ReduceFn:
        _REDUCE_FUNCTIONS[name] = fn
        return fn

    return _wrap


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def partition_of(key: bytes, r: int) -> int:
    if r < 1:
        raise ValueError("Partition count must be >= 1.")
    if r == 1:
        return 0
    return fnv1a64(key) % r


def broadcast_read() -> bytes:
    payload = getattr(_TASK_CONTEXT, "broadcast", None)
    if payload is None:
        raise BroadcastMissingError("This job was configured without a broadcast payload.")
    return payload


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_record(stream: BinaryIO, key: bytes, seq: int, value: bytes) -> int:
    stream.write(RECORD_HEADER.pack(len(key), seq, len(value)))
    stream.write(key)
    stream.write(value)
    return RECORD_HEADER.size + len(key) + len(value)


def read_records(path: Path) -> Iterator[KvRecord]:
    with open(path, "rb") as fh:
        while True:
            head = fh.read(RECORD_HEADER.size)
            if not head:
                return
            if len(head) < RECORD_HEADER.size:
                raise IOError(f"Truncated record header in {path}")
            klen, seq, vlen = RECORD_HEADER.unpack(head)
            key = fh.read(klen)
            value = fh.read(vlen)
            if len(key) < klen or len(value) < vlen:
                raise IOError(f"Truncated record payload in {path}")
            yield KvRecord(key, value, seq)


def read_output(paths: Iterable[Path]) -> Iterator[KvRecord]:
    for p in paths:
        yield from read_records(p)


def _commit(records: Iterable[Tuple[bytes, int, bytes]], path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for key, seq, value in records:
            write_record(fh, key, seq, value)
    os.replace(tmp, path)


class MapReduceEngine:
    """Local thread-pool engine with a file-system shuffle. Output bytes do not depend on `workers`."""

    def __init__(self, spec: JobSpec, workers: int = 1, log_fn: Optional[Callable[[str], None]] = None):
        if spec.partitions < 1:
            raise ValueError("JobSpec.partitions must be >= 1.")
        if spec.map_fn not in _MAP_FUNCTIONS:
            raise ValueError(f"Unknown map function '{spec.map_fn}'.")
        if spec.reduce_fn not in _REDUCE_FUNCTIONS:
            raise ValueError(f"Unknown reduce function '{spec.reduce_fn}'.")
        self.spec = spec
        self.workers = max(1, int(workers))
        self.log_fn = log_fn
        self.logs: List[Dict[str, str]] = []
        self.job_dir = Path(spec.scratch) / spec.name
        self.map_dir = self.job_dir / "map"
        self.out_dir = self.job_dir / "out"

    def _log(self, level: str, message: str, stage: str) -> None:
        self.logs.append(
            {
                "timestamp_utc": datetime.now(timezone.utc).isoformat(),
                "level": level,
                "stage": stage,
                "message": message,
            }
        )
        if len(self.logs) > 2000:
            self.logs = self.logs[-1000:]
        if self.log_fn is not None:
            self.log_fn(f"[{self.spec.name}:{stage}] {message}")

    def _retry(self, task: str, fn: Callable[[], Any]) -> Any:
        attempts = max(0, int(self.spec.max_retries)) + 1
        last: Optional[BaseException] = None
        for attempt in range(1, attempts + 1):
            try:
                return fn()
            except Exception as exc:  # noqa: BLE001
                last = exc
                self._log("WARN", f"{task} attempt {attempt}/{attempts} failed: {exc}", "retry")
        raise JobError(task, f"failed after {attempts} attempts: {last}") from last

    def _run_map(self, split_id: int) -> int:
        for stale in self.map_dir.glob(f"m{split_id:06d}-*"):
            stale.unlink()
        map_fn = _MAP_FUNCTIONS[self.spec.map_fn]
        r = self.spec.partitions
        buffers: List[List[Tuple[bytes, int, bytes]]] = [[] for _ in range(r)]
        buffered = 0
        runs = 0
        emitted = 0

        def _spill() -> None:
            nonlocal buffered, runs
            for p, buf in enumerate(buffers):
                if not buf:
                    continue
                buf.sort(key=lambda rec: (rec[0], rec[1]))
                _commit(buf, self.map_dir / f"m{split_id:06d}-p{p:05d}-r{runs:04d}{RUN_SUFFIX}")
                buffers[p] = []
            buffered = 0
            runs += 1

        _TASK_CONTEXT.broadcast = self.spec.broadcast
        try:
            for key, value in map_fn(self.spec.inputs[split_id]):
                key = bytes(key)
                value = bytes(value)
                seq = (split_id << 32) | emitted
                emitted += 1
                buffers[partition_of(key, r)].append((key, seq, value))
                buffered += RECORD_HEADER.size + len(key) + len(value)
                if buffered >= self.spec.spill_bytes:
                    _spill()
        finally:
            _TASK_CONTEXT.broadcast = None
        _spill()
        return emitted

    def _run_reduce(self, partition: int) -> Tuple[Optional[Path], int]:
        runs = sorted(self.map_dir.glob(f"m*-p{partition:05d}-r*{RUN_SUFFIX}"))
        if not runs:
            return None, 0
        reduce_fn = _REDUCE_FUNCTIONS[self.spec.reduce_fn]
        merged = heapq.merge(*(read_records(p) for p in runs), key=lambda rec: (rec.key, rec.seq))
        consumed = 0
        out_path = self.out_dir / f"{PART_PREFIX}{partition:05d}"

        def _stream(group: Iterator[KvRecord]) -> Iterator[bytes]:
            nonlocal consumed
            for rec in group:
                consumed += 1
                yield rec.value

        def _outputs() -> Iterator[Tuple[bytes, int, bytes]]:
            counter = itertools.count()
            for key, group in itertools.groupby(merged, key=lambda rec: rec.key):
                values = _stream(group)
                for out_key, out_value in reduce_fn(key, values):
                    yield bytes(out_key), next(counter), bytes(out_value)
                # values the reducer left unread still count as consumed
                for _ in values:
                    pass

        _TASK_CONTEXT.broadcast = self.spec.broadcast
        try:
            _commit(_outputs(), out_path)
        finally:
            _TASK_CONTEXT.broadcast = None
        return out_path, consumed

    def run(self) -> JobResult:
        spec = self.spec
        self.map_dir.mkdir(parents=True, exist_ok=True)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for stale in itertools.chain(self.map_dir.glob(f"m*{RUN_SUFFIX}"), self.out_dir.glob(f"{PART_PREFIX}*")):
            stale.unlink()
        self._log("INFO", f"{len(spec.inputs)} splits, {spec.partitions} partitions, {self.workers} workers", "start")

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = [
                pool.submit(self._retry, f"map split {i} ({spec.inputs[i]})", lambda i=i: self._run_map(i))
                for i in range(len(spec.inputs))
            ]
            emitted = sum(f.result() for f in futures)
            self._log("INFO", f"map phase emitted {emitted} records", "map")
            futures = [
                pool.submit(self._retry, f"reduce partition {p}", lambda p=p: self._run_reduce(p))
                for p in range(spec.partitions)
            ]
            reduced_parts = [f.result() for f in futures]

        outputs = [path for path, _ in reduced_parts if path is not None]
        reduced = sum(n for _, n in reduced_parts)
        self._log("INFO", f"reduce phase consumed {reduced} records into {len(outputs)} files", "reduce")
        manifest = {
            "job": spec.name,
            "spec_sha256": spec.fingerprint(),
            "broadcast_sha256": sha256_bytes(spec.broadcast) if spec.broadcast is not None else None,
            "records_emitted": emitted,
            "records_reduced": reduced,
            "outputs": {p.name: sha256_file(p) for p in outputs},
        }
        manifest_path = self.job_dir / MANIFEST_NAME
        tmp = manifest_path.with_name(MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, manifest_path)
        return JobResult(outputs=outputs, manifest=manifest_path, emitted=emitted, reduced=reduced, logs=self.logs)


def run_job(spec: JobSpec, workers: int = 1, log_fn: Optional[Callable[[str], None]] = None) -> JobResult:
    return MapReduceEngine(spec, workers, log_fn).run()
