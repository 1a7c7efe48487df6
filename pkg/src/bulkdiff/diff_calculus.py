"""Set-indexed families f^E and the difference operators D_E.

Subsets of the index set are represented as frozensets of positive ints.
Values may be scalars, vectors or matrices; products go through a single
pairing hook so mixed integrands compose without special cases.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

MAX_INDEX = 6


def _key(E) -> frozenset:
    return frozenset(int(i) for i in E)


def subsets(E) -> list:
    """All subsets of E in colex order (by bitmask over the sorted elements)."""
    elems = sorted(_key(E))
    return [frozenset(elems[i] for i in range(len(elems)) if mask >> i & 1)
            for mask in range(1 << len(elems))]


def default_pairing(x, y):
    """Product of two values: scalar*anything, matrix@vector, or elementwise."""
    x, y = np.asarray(x), np.asarray(y)
    if x.ndim == 2 and y.ndim == 1:
        return x @ y
    if x.ndim == 1 and y.ndim == 2:
        return x @ y
    return x * y


class IndexedFamily:
    """f^E = f(mu + sum_{i in E} delta_{x_i}), evaluated lazily and memoized."""

    def __init__(self, base_config, positions: Mapping[int, object], rule: Callable,
                 pairing: Callable = default_pairing):
        self.base_config = base_config
        self.positions = {int(i): p for i, p in positions.items()}
        if len(self.positions) > MAX_INDEX:
            raise ValueError(f"at most {MAX_INDEX} indices supported")
        if any(i <= 0 for i in self.positions):
            raise ValueError("indices must be positive")
        self.index = frozenset(self.positions)
        self._rule = rule
        self.pairing = pairing
        self._memo: dict = {}
        self._lock = threading.Lock()

    def __call__(self, E=()):
        E = _key(E)
        if not E <= self.index:
            raise KeyError(f"{sorted(E)} is not a subset of {sorted(self.index)}")
        val = self._memo.get(E)
        if val is None:
            val = self._rule(E)
            with self._lock:
                val = self._memo.setdefault(E, val)
        return val

    eval = __call__

    def with_rule(self, rule: Callable) -> "IndexedFamily":
        return IndexedFamily(self.base_config, self.positions, rule, self.pairing)

    def times(self, other: "IndexedFamily") -> "IndexedFamily":
        """Pointwise product family E -> f^E g^E."""
        if other.index != self.index:
            raise ValueError("index sets differ")
        return self.with_rule(lambda E: self.pairing(self(E), other(E)))


def difference(family: IndexedFamily, E) -> object:
    """D_E f by inclusion-exclusion over the subsets of E."""
    E = _key(E)
    if not E <= family.index:
        raise KeyError(f"{sorted(E)} is not a subset of {sorted(family.index)}")
    total = None
    for F in subsets(E):
        term = family(F) if (len(E) - len(F)) % 2 == 0 else -np.asarray(family(F))
        total = term if total is None else total + term
    return total


def nested_difference(family: IndexedFamily, order: Iterable[int]) -> object:
    """D_{i_1}(D_{i_2}(... f)) composed one index at a time."""
    order = list(order)

    def apply(fn, i):
        return lambda S: np.asarray(fn(S | {i})) - np.asarray(fn(S))

    fn = lambda S: np.asarray(family(S))
    for i in reversed(order):
        fn = apply(fn, i)
    return fn(frozenset())


def telescope(differences: Mapping, E) -> object:
    """f^E = sum_{F subset E} D_F f, summed in colex order."""
    E = _key(E)
    diffs = {_key(k): v for k, v in differences.items()}
    total = None
    for F in subsets(E):
        if F not in diffs:
            raise KeyError(f"missing difference for subset {sorted(F)}")
        total = diffs[F] if total is None else total + diffs[F]
    return total


def leibniz_check(f: IndexedFamily, g: IndexedFamily, E) -> tuple:
    """D_E(fg) directly and by the two product expansions."""
    if f.index != g.index:
        raise ValueError("families must share their index set")
    E = _key(E)
    pair = f.pairing
    lhs = difference(f.times(g), E)
    rhs1 = None
    for F in subsets(E):
        shifted = g.with_rule(lambda S, F=F: g(S | F))
        term = pair(difference(f, F), difference(shifted, E - F))
        rhs1 = term if rhs1 is None else rhs1 + term
    rhs2 = None
    for F in subsets(E):
        for G in subsets(E):
            if F | G != E:
                continue
            term = pair(difference(f, F), difference(g, G))
            rhs2 = term if rhs2 is None else rhs2 + term
    return lhs, rhs1, rhs2


def frozen_difference(factors: list, E, frozen_mask: list, pairing: Callable = default_pairing):
    """D_E of a product where only the factors marked in `frozen_mask` move.

    Unmarked factors are evaluated on the unperturbed configuration. Factors
    are IndexedFamily objects or plain callables E -> value.
    """
    E = _key(E)
    if len(factors) != len(frozen_mask):
        raise ValueError("one mask entry per factor")
    total = None
    for F in subsets(E):
        prod = None
        for fac, moves in zip(factors, frozen_mask):
            val = fac(F if moves else frozenset())
            prod = val if prod is None else pairing(prod, val)
        term = prod if (len(E) - len(F)) % 2 == 0 else -np.asarray(prod)
        total = term if total is None else total + term
    return total


def upsilon(positions: Mapping[int, object], E, z, side: float = 1.0) -> int:
    """Indicator that x_i lies in the cube z + (-side/2, side/2)^d for every i in E."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    for i in _key(E):
        x = np.atleast_1d(np.asarray(positions[i], dtype=float))
        if not np.all(np.abs(x - z) < side / 2):
            return 0
    return 1
