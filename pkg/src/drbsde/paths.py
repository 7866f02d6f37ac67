"""Brownian ensembles on uniform grids and Girsanov weights.

Increments are drawn block by block from Philox streams keyed by
``(seed, block_index)``. The block size is fixed (:data:`kernels.BLOCK`), so
an ensemble is bit-reproducible for a given ``(seed, grid, dim, n_paths)``
whatever the number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .errors import InvalidArgument, NumericFailure, first_nonfinite


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.T / self.n_steps
        t[-1] = self.T
        return t

    def index_of(self, t: float) -> int:
        """Nearest grid index to time ``t``."""
        return int(np.clip(round(t / self.dt), 0, self.n_steps))


def make_grid(T: float, n_steps: int) -> TimeGrid:
    """Uniform grid on ``[0, T]`` with ``n_steps`` steps."""
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgument(f"horizon must be positive, got T={T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgument(f"n_steps must be a positive integer, got {n_steps}")
    return TimeGrid(float(T), int(n_steps))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Discrete Brownian paths ``X[p, i]`` with ``X[p, 0] = 0``.

    ``increments`` has shape ``(n_paths, n_steps, dim)`` and ``values`` has
    shape ``(n_paths, n_steps + 1, dim)``. Both arrays are read-only.
    """

    grid: TimeGrid
    dim: int
    n_paths: int
    increments: np.ndarray
    values: np.ndarray
    seed: int

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def at(self, i: int) -> np.ndarray:
        """State ``X[:, i, :]`` at grid node ``i``."""
        return self.values[:, i, :]

    @cached_property
    def values_tm(self) -> np.ndarray:
        """Time-major contiguous copy of ``values``: shape ``(n_steps + 1, n_paths, dim)``."""
        out = np.ascontiguousarray(self.values.transpose(1, 0, 2))
        out.flags.writeable = False
        return out

    @cached_property
    def increments_tm(self) -> np.ndarray:
        """Time-major contiguous copy of ``increments``: shape ``(n_steps, n_paths, dim)``."""
        out = np.ascontiguousarray(self.increments.transpose(1, 0, 2))
        out.flags.writeable = False
        return out

    @cached_property
    def running_integral(self) -> np.ndarray:
        """Left-point Riemann sums ``int_0^{t_i} X ds``, shape ``(n_paths, n+1, dim)``."""
        out = np.zeros_like(self.values)
        out[:, 1:, :] = np.cumsum(self.values[:, :-1, :] * self.dt, axis=1)
        out.flags.writeable = False
        return out


def _draw_block(seed: int, block: int, shape: tuple[int, int, int], scale: float) -> np.ndarray:
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    rng = np.random.Generator(np.random.Philox(ss))
    return rng.standard_normal(shape) * scale


def simulate_brownian(grid: TimeGrid, dim: int, n_paths: int, seed: int, workers: int = 1) -> PathEnsemble:
    """Sample ``n_paths`` Brownian paths of dimension ``dim`` on ``grid``."""
    if dim < 1:
        raise InvalidArgument(f"dim must be >= 1, got {dim}")
    if n_paths < 1:
        raise InvalidArgument(f"n_paths must be >= 1, got {n_paths}")
    if int(seed) != seed or seed < 0 or seed >= 2**64:
        raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {seed}")
    seed = int(seed)
    n = grid.n_steps
    scale = np.sqrt(grid.dt)
    spans = kernels._blocks(n_paths)

    def job(k):
        s, e = spans[k]
        return _draw_block(seed, k, (e - s, n, dim), scale)

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(spans))))
    else:
        parts = [job(k) for k in range(len(spans))]
    dX = np.concatenate(parts, axis=0)
    X = np.zeros((n_paths, n + 1, dim))
    np.cumsum(dX, axis=1, out=X[:, 1:, :])
    dX.flags.writeable = False
    X.flags.writeable = False
    return PathEnsemble(grid, int(dim), int(n_paths), dX, X, seed)


def broadcast_drift(beta, ens: PathEnsemble) -> np.ndarray:
    """Expand a drift spec to shape ``(n_paths, n_steps, dim)``.

    Accepts a scalar, a ``(dim,)`` vector, a ``(n_paths, n_steps)`` array
    (for ``dim == 1``) or a full ``(n_paths, n_steps, dim)`` array.
    """
    b = np.asarray(beta, dtype=np.float64)
    shape = (ens.n_paths, ens.n_steps, ens.dim)
    if b.ndim == 2 and b.shape == shape[:2]:
        b = b[:, :, None]
    try:
        return np.broadcast_to(b, shape)
    except ValueError as exc:
        raise InvalidArgument(f"drift of shape {b.shape} does not fit ensemble {shape}") from exc


def stochastic_exponential(beta, ens: PathEnsemble, span: tuple[int, int] | None = None,
                           cap: bool = False) -> np.ndarray:
    """Per-path ``exp(sum beta.dX - 0.5 sum |beta|^2 dt)`` over ``[t_i, t_j]``.

    Left-point (Ito) sums. With ``cap=True`` weights above the ``1 - 1e-6``
    sample quantile are clipped to it; off by default.
    """
    i, j = (0, ens.n_steps) if span is None else span
    if not (0 <= i <= j <= ens.n_steps):
        raise InvalidArgument(f"span {span} outside grid [0, {ens.n_steps}]")
    b = broadcast_drift(beta, ens)
    w = np.exp(kernels.log_stoch_exp(b, ens.increments, ens.dt, i, j))
    if cap:
        w = np.minimum(w, np.quantile(w, 1.0 - 1e-6))
    return w


def mean_and_se(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    est = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return est, se


def expectation_under(beta, ens: PathEnsemble, payoff) -> tuple[float, float]:
    """Estimate ``E^beta[payoff]`` as ``E^0[E(-int beta dX) payoff]`` with its standard error."""
    payoff = np.asarray(payoff, dtype=np.float64)
    if payoff.shape != (ens.n_paths,):
        raise InvalidArgument(f"payoff must have shape ({ens.n_paths},), got {payoff.shape}")
    bad = first_nonfinite(payoff)
    if bad is not None:
        raise NumericFailure(f"non-finite payoff on path {bad}", path_index=bad)
    w = stochastic_exponential(-broadcast_drift(beta, ens), ens)
    return mean_and_se(w * payoff)
