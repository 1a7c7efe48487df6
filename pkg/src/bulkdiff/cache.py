"""Content-addressed store of solved correctors.

Keys digest (field, box, n, h, direction, reduced exterior). Values live in an
in-memory LRU and, optionally, one file per entry under a cache directory with
a JSON manifest holding each blob's checksum.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .solver import DiscreteCorrector, exterior_digest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CacheKey:
    field_id: str
    side: float
    center: tuple
    n: int
    h: float
    direction: tuple
    exterior: str

    @classmethod
    def make(cls, field_, U, n, h, direction, exterior, quantum=1e-12) -> "CacheKey":
        ext = field_.reduce_exterior(np.asarray(exterior, dtype=float).reshape(-1, U.dim), U)
        qd = tuple(int(v) for v in np.round(np.asarray(direction, dtype=float) / quantum))
        return cls(field_.field_id, float(U.side), tuple(U.center), int(n), float(h), qd,
                   exterior_digest(ext, quantum))

    def digest(self) -> str:
        blob = json.dumps([self.field_id, repr(self.side), [repr(c) for c in self.center], self.n,
                           repr(self.h), list(self.direction), self.exterior])
        return hashlib.sha256(blob.encode()).hexdigest()[:32]


class CorrectorCache:
    def __init__(self, directory: Optional[str] = None, byte_budget: int = 2 << 30,
                 enabled: bool = True):
        self.enabled = enabled
        self.dir = Path(directory) if directory else None
        self.budget = byte_budget
        self._mem: OrderedDict = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self._inflight: dict = {}
        self.hits = 0
        self.misses = 0
        self.solves = 0
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
            self._manifest_path = self.dir / "manifest.json"
            self._manifest = (json.loads(self._manifest_path.read_text())
                              if self._manifest_path.exists() else {})

    def stats(self) -> dict:
        with self._lock:
            entries = len(self._manifest) if self.dir else len(self._mem)
            disk = sum(v["bytes"] for v in self._manifest.values()) if self.dir else 0
            return {"hits": self.hits, "misses": self.misses,
                    "bytes": max(disk, self._bytes), "entries": entries}

    def _remember(self, digest: str, cor: DiscreteCorrector, size: int):
        self._mem[digest] = (cor, size)
        self._mem.move_to_end(digest)
        self._bytes += size
        while self._bytes > self.budget and len(self._mem) > 1:
            _, (_, s) = self._mem.popitem(last=False)
            self._bytes -= s

    def _load(self, digest: str, field_) -> Optional[DiscreteCorrector]:
        if not self.dir or digest not in self._manifest:
            return None
        path = self.dir / f"{digest}.bin"
        try:
            blob = path.read_bytes()
        except OSError:
            blob = b""
        if hashlib.sha256(blob).hexdigest() != self._manifest[digest]["sha256"]:
            log.warning("cache entry %s corrupt; evicting and re-solving", digest)
            self._manifest.pop(digest, None)
            path.unlink(missing_ok=True)
            return None
        return DiscreteCorrector.from_bytes(blob, field_)

    def _store(self, digest: str, cor: DiscreteCorrector):
        blob = cor.to_bytes()
        if self.dir:
            tmp = self.dir / f"{digest}.bin.tmp{threading.get_ident()}"
            tmp.write_bytes(blob)
            os.replace(tmp, self.dir / f"{digest}.bin")
            self._manifest[digest] = {"sha256": hashlib.sha256(blob).hexdigest(), "bytes": len(blob)}
            tmp_m = self._manifest_path.with_suffix(f".tmp{threading.get_ident()}")
            tmp_m.write_text(json.dumps(self._manifest, sort_keys=True, indent=0))
            os.replace(tmp_m, self._manifest_path)
        return len(blob)

    def get_or_solve(self, key: CacheKey, solve: Callable[[], DiscreteCorrector], field_=None):
        if not self.enabled:
            self.misses += 1
            self.solves += 1
            return solve()
        digest = key.digest()
        while True:
            with self._lock:
                if digest in self._mem:
                    self._mem.move_to_end(digest)
                    self.hits += 1
                    return self._mem[digest][0]
                event = self._inflight.get(digest)
                if event is None:
                    cor = self._load(digest, field_) if field_ is not None else None
                    if cor is not None:
                        self.hits += 1
                        self._remember(digest, cor, cor.values.nbytes)
                        return cor
                    event = threading.Event()
                    self._inflight[digest] = event
                    self.misses += 1
                    leader = True
                else:
                    leader = False
            if not leader:
                event.wait()
                continue
            try:
                cor = solve()
                self.solves += 1
                with self._lock:
                    size = self._store(digest, cor)
                    self._remember(digest, cor, size)
                return cor
            finally:
                with self._lock:
                    self._inflight.pop(digest, None)
                event.set()
