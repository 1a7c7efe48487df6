import threading
import time

import numpy as np
import pytest

from bulkdiff.cache import CacheKey, CorrectorCache
from bulkdiff.pointproc import Box
from bulkdiff.solver import GridSpec, solve_dual

U = Box(1.0, (0.0,))


def _solver(field_, ext, counter=None):
    def solve():
        if counter is not None:
            counter.append(1)
            time.sleep(0.05)
        return solve_dual(field_, GridSpec(U, 2, 1 / 8), [1.0], ext)
    return solve


def test_permuted_and_far_exteriors_share_a_key(crowding):
    a = CacheKey.make(crowding, U, 2, 1 / 8, [1.0], np.array([[0.6], [-0.7]]))
    b = CacheKey.make(crowding, U, 2, 1 / 8, [1.0], np.array([[-0.7], [0.6], [3.0]]))
    c = CacheKey.make(crowding, U, 2, 1 / 8, [1.0], np.array([[0.61], [-0.7]]))
    assert a.digest() == b.digest() != c.digest()


def test_single_flight_under_contention(crowding):
    cache, calls, out = CorrectorCache(), [], []
    ext = np.array([[0.6]])
    key = CacheKey.make(crowding, U, 2, 1 / 8, [1.0], ext)
    threads = [threading.Thread(target=lambda: out.append(cache.get_or_solve(key, _solver(crowding, ext, calls))))
               for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(calls) == 1 and len(out) == 16
    assert all(o is out[0] for o in out)
    assert cache.stats()["misses"] == 1 and cache.stats()["hits"] == 15


def test_disk_cache_is_transparent_and_evicts_corruption(crowding, tmp_path):
    ext = np.array([[0.6]])
    key = CacheKey.make(crowding, U, 2, 1 / 8, [1.0], ext)
    fresh = _solver(crowding, ext)()
    first = CorrectorCache(tmp_path).get_or_solve(key, _solver(crowding, ext), crowding)
    reopened = CorrectorCache(tmp_path)
    again = reopened.get_or_solve(key, _solver(crowding, ext), crowding)
    assert reopened.stats()["hits"] == 1
    assert np.array_equal(again.values, fresh.values) and np.array_equal(first.values, fresh.values)
    blob = next(tmp_path.glob("*.bin"))
    blob.write_bytes(blob.read_bytes()[:-8] + b"garbage!")
    damaged = CorrectorCache(tmp_path)
    calls = []
    value = damaged.get_or_solve(key, _solver(crowding, ext, calls), crowding)
    assert calls and np.array_equal(value.values, fresh.values)
