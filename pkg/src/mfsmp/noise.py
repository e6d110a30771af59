"""Counter-based Brownian increments with common random numbers.

Every increment row is addressed by (seed, role, j, i): a Philox generator
keyed on (seed, role, j) and started at counter i produces the K normals of
that row. Rows never share state, so the plan is the same whatever order or
thread layout is used to fill it.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import TimeGrid
from .errors import ConfigurationError

ROLE_B1 = 1
ROLE_Y = 2
_MASK64 = (1 << 64) - 1


def _row(seed: int, role: int, j: int, i: int, K: int) -> np.ndarray:
    key = np.array([seed & _MASK64, ((role << 40) | j) & _MASK64], dtype=np.uint64)
    bitgen = np.random.Philox(key=key, counter=np.array([0, i, 0, 0], dtype=np.uint64))
    return np.random.Generator(bitgen).standard_normal(K)


def default_threads() -> int:
    env = os.environ.get("MFSMP_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigurationError(f"MFSMP_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigurationError("MFSMP_THREADS must be >= 1")
        return n
    return 1


@dataclass(frozen=True, eq=False)
class NoisePlan:
    seed: int
    M_outer: int
    N_inner: int
    grid: TimeGrid
    dB1: np.ndarray  # (M, N, K)
    dY: np.ndarray  # (M, K)
    antithetic_level: int = 0

    @property
    def Y(self) -> np.ndarray:
        """Observation paths on the nodes, Y[:, 0] = 0."""
        out = np.zeros((self.M_outer, self.grid.steps + 1))
        np.cumsum(self.dY, axis=1, out=out[:, 1:])
        return out

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        meta = f"{self.seed}:{self.M_outer}:{self.N_inner}:{self.grid.horizon!r}:{self.grid.steps}:{self.antithetic_level}"
        h.update(meta.encode())
        h.update(np.ascontiguousarray(self.dB1).tobytes())
        h.update(np.ascontiguousarray(self.dY).tobytes())
        return h.hexdigest()

    def same_as(self, other: "NoisePlan") -> bool:
        return self.content_hash == other.content_hash


def make_plan(seed: int, M_outer: int, N_inner: int, grid: TimeGrid, threads: int | None = None) -> NoisePlan:
    for name, v in (("M_outer", M_outer), ("N_inner", N_inner)):
        if int(v) != v or v < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {v}", module="mfnoise")
    if not isinstance(grid, TimeGrid):
        raise ConfigurationError("grid must be a TimeGrid", module="mfnoise")
    seed = int(seed)
    if not (-(1 << 63) <= seed < (1 << 64)):
        raise ConfigurationError(f"seed must fit in 64 bits, got {seed}", module="mfnoise")
    M, N, K = int(M_outer), int(N_inner), grid.steps
    sdt = np.sqrt(grid.dt)
    dB1 = np.empty((M, N, K))
    dY = np.empty((M, K))

    def fill(j):
        for i in range(N):
            dB1[j, i] = _row(seed, ROLE_B1, j, i, K) * sdt
        dY[j] = _row(seed, ROLE_Y, j, 0, K) * sdt

    threads = threads or default_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, range(M)))
    else:
        for j in range(M):
            fill(j)
    dB1.setflags(write=False)
    dY.setflags(write=False)
    return NoisePlan(seed, M, N, grid, dB1, dY)


def antithetic_extend(plan: NoisePlan) -> NoisePlan:
    """Append the sign-flipped B1 particles; particle N + i mirrors particle i."""
    dB1 = np.concatenate([plan.dB1, -plan.dB1], axis=1)
    dB1.setflags(write=False)
    return NoisePlan(
        plan.seed, plan.M_outer, 2 * plan.N_inner, plan.grid, dB1, plan.dY, plan.antithetic_level + 1
    )
