"""BSDE drivers.

Every driver callable is vectorised over paths and has the signature
``fn(i, ens, y, z)`` where ``i`` is the grid index, ``ens`` the
:class:`~drbsde.paths.PathEnsemble` (so coefficients may read the whole path
prefix ``ens.values[:, :i + 1]``), ``y`` has shape ``(n_paths,)`` and ``z``
has shape ``(n_paths, dim)``. Drivers must be pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import InvalidArgument, InvalidState

DriverFn = Callable[[int, object, np.ndarray, np.ndarray], np.ndarray]
CoefFn = Callable[[int, object, np.ndarray], np.ndarray]

#: below this norm |z| is treated as zero (subgradient 0)
Z_KINK = 1e-12


@dataclass(frozen=True)
class GeneratorSpec:
    evaluate: DriverFn
    d_y: DriverFn
    d_z: DriverFn
    lipschitz: float | None = None
    kinked: bool = False
    name: str = "generator"
    # analytic or enumerated argmin for Hamiltonians, (i, ens, y, z) -> (n_paths, dim)
    minimizer: DriverFn | None = None

    def __call__(self, i, ens, y, z):
        return self.evaluate(i, ens, y, z)


def _zeros_like_y(i, ens, y, z):
    return np.zeros_like(y)


def _zeros_like_z(i, ens, y, z):
    return np.zeros_like(z)


def zero_generator() -> GeneratorSpec:
    return GeneratorSpec(_zeros_like_y, _zeros_like_y, _zeros_like_z, lipschitz=0.0, name="zero")


def linear_generator(a: float = 0.0, b=0.0, c: float = 0.0) -> GeneratorSpec:
    """``f(y, z) = c - a*y - b.z`` with constant ``a``, ``b`` and ``c``."""
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))

    def ev(i, ens, y, z):
        return c - a * y - z @ np.broadcast_to(b, (z.shape[1],))

    def dy(i, ens, y, z):
        return np.full_like(y, -a)

    def dz(i, ens, y, z):
        return np.broadcast_to(-b, z.shape).copy()

    return GeneratorSpec(ev, dy, dz, lipschitz=abs(a) + float(np.linalg.norm(b)),
                         name=f"linear(a={a}, b={b.tolist()}, c={c})")


def negated(f: GeneratorSpec) -> GeneratorSpec:
    """``(y, z) -> -f(-y, -z)``, the driver of the mirrored problem."""

    def ev(i, ens, y, z):
        return -f.evaluate(i, ens, -y, -z)

    def dy(i, ens, y, z):
        return f.d_y(i, ens, -y, -z)

    def dz(i, ens, y, z):
        return f.d_z(i, ens, -y, -z)

    return replace(f, evaluate=ev, d_y=dy, d_z=dz, minimizer=None, name=f"negated({f.name})")


def robustify(f: GeneratorSpec, r: float) -> GeneratorSpec:
    """``F^r = f + r|z|``, the worst case over drifts bounded by ``r``."""
    if not r >= 0:
        raise InvalidArgument(f"radius must be >= 0, got {r}")
    if r == 0:
        return f

    def ev(i, ens, y, z):
        return f.evaluate(i, ens, y, z) + r * np.linalg.norm(z, axis=1)

    def dz(i, ens, y, z):
        nz = np.linalg.norm(z, axis=1)
        safe = np.where(nz > Z_KINK, nz, 1.0)
        unit = np.where((nz > Z_KINK)[:, None], z / safe[:, None], 0.0)
        return f.d_z(i, ens, y, z) + r * unit

    L = None if f.lipschitz is None else f.lipschitz + r
    return replace(f, evaluate=ev, d_z=dz, lipschitz=L, kinked=True,
                   minimizer=f.minimizer, name=f"robust({f.name}, r={r})")


def quadratic_robustify(f: GeneratorSpec, gamma: float) -> GeneratorSpec:
    """``f + gamma |z|^2``: the penalised worst case used by the L2 dual curve."""
    if not gamma >= 0:
        raise InvalidArgument(f"gamma must be >= 0, got {gamma}")
    if gamma == 0:
        return f

    def ev(i, ens, y, z):
        return f.evaluate(i, ens, y, z) + gamma * np.einsum("pd,pd->p", z, z)

    def dz(i, ens, y, z):
        return f.d_z(i, ens, y, z) + 2.0 * gamma * z

    return replace(f, evaluate=ev, d_z=dz, lipschitz=None,
                   name=f"quad({f.name}, gamma={gamma})")


# --------------------------------------------------------------------------
# controlled coefficients


@dataclass(frozen=True)
class ActionSet:
    """Finite set of points, or a box searched on a grid."""

    kind: str
    points: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    resolution: int = 101

    @property
    def dim(self) -> int:
        return (self.points if self.kind == "finite" else self.lo).shape[-1]

    def candidates(self) -> np.ndarray:
        if self.kind == "finite":
            return self.points
        axes = [np.linspace(l, h, self.resolution) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def finite_actions(points) -> ActionSet:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.size == 0:
        raise InvalidArgument("action set is empty")
    return ActionSet("finite", points=pts)


def box_actions(lo, hi, resolution: int = 101) -> ActionSet:
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    if lo.shape != hi.shape or np.any(hi < lo):
        raise InvalidArgument(f"invalid box [{lo}, {hi}]")
    if resolution < 2:
        raise InvalidArgument("box resolution must be >= 2")
    return ActionSet("box", lo=lo, hi=hi, resolution=int(resolution))


@dataclass(frozen=True)
class ControlledCoefficients:
    """Discount ``k``, running reward ``l`` and drift ``lam`` of a controlled problem.

    ``k(i, ens, a)`` and ``l(i, ens, a)`` return ``(n_paths,)`` arrays and
    ``lam(i, ens, a)`` an ``(n_paths, dim)`` array, where ``a`` holds one
    action per path, shape ``(n_paths, action_dim)``.

    ``alpha_star`` optionally gives the minimiser in closed form, with
    ``d_alpha_y`` of shape ``(n_paths, action_dim)`` and ``d_alpha_z`` of
    shape ``(n_paths, action_dim, dim)``. ``generator`` overrides the
    Hamiltonian (used for entropy-smoothed problems).
    """

    actions: ActionSet
    k: CoefFn
    l: CoefFn
    lam: CoefFn
    alpha_star: DriverFn | None = None
    d_alpha_y: DriverFn | None = None
    d_alpha_z: DriverFn | None = None
    k_bound: float | None = None
    lambda_bound: float | None = None
    generator: GeneratorSpec | None = None
    name: str = "coefficients"
    params: dict = field(default_factory=dict)


def _const_scalar(value: float) -> CoefFn:
    def fn(i, ens, a):
        return np.full(a.shape[0], float(value))
    return fn


def _const_vector(value) -> CoefFn:
    v = np.atleast_1d(np.asarray(value, dtype=np.float64))

    def fn(i, ens, a):
        return np.broadcast_to(v, (a.shape[0], v.shape[0])).copy()
    return fn


def constant_coefficients(k: float = 0.0, l: float = 0.0, lam=0.0, dim: int = 1) -> ControlledCoefficients:
    """Singleton action set with constant ``k``, ``l`` and ``lam``.

    The Hamiltonian is the linear driver ``l - k*y - lam.z``.
    """
    lam_v = np.broadcast_to(np.atleast_1d(np.asarray(lam, dtype=np.float64)), (dim,)).copy()
    return ControlledCoefficients(
        actions=finite_actions(np.zeros((1, 1))),
        k=_const_scalar(k), l=_const_scalar(l), lam=_const_vector(lam_v),
        alpha_star=lambda i, ens, y, z: np.zeros((y.shape[0], 1)),
        d_alpha_y=lambda i, ens, y, z: np.zeros((y.shape[0], 1)),
        d_alpha_z=lambda i, ens, y, z: np.zeros((y.shape[0], 1, z.shape[1])),
        k_bound=abs(k), lambda_bound=float(np.linalg.norm(lam_v)),
        name=f"constant(k={k}, l={l}, lam={lam_v.tolist()})",
        params={"k": k, "l": l, "lam": lam_v.tolist()},
    )


def trivial_coefficients(dim: int = 1) -> ControlledCoefficients:
    """No control: ``k = l = 0``, ``lam = 0``, so the Hamiltonian is zero."""
    return constant_coefficients(0.0, 0.0, 0.0, dim=dim)


def box_drift_coefficients(scale: float = 1.0, resolution: int = 101,
                           analytic: bool = False) -> ControlledCoefficients:
    """``A = [-1, 1]``, ``lam(a) = scale*a``, ``k = l = 0``: Hamiltonian ``-scale|z|`` (1-D).

    With ``analytic=True`` the minimiser ``sign(z)`` is supplied instead of
    the grid search.
    """

    def lam(i, ens, a):
        return scale * a

    alpha = None
    if analytic:
        def alpha(i, ens, y, z):
            # ties at z = 0 resolve to the lowest action, like the grid search
            s = np.where(z[:, :1] > 0, 1.0, -1.0)
            return s if scale >= 0 else -s

    return ControlledCoefficients(
        actions=box_actions([-1.0], [1.0], resolution),
        k=_const_scalar(0.0), l=_const_scalar(0.0), lam=lam,
        alpha_star=alpha, k_bound=0.0, lambda_bound=abs(scale),
        name=f"box_drift(scale={scale})", params={"scale": scale},
    )


def _log_sinhc(u):
    au = np.abs(u)
    small = au < 1e-4
    safe = np.where(small, 1.0, au)
    big = safe + np.log1p(-np.exp(-2.0 * safe)) - np.log(2.0) - np.log(safe)
    return np.where(small, au**2 / 6.0 - au**4 / 180.0, big)


def _langevin(u):
    small = np.abs(u) < 1e-4
    safe = np.where(small, 1.0, u)
    return np.where(small, u / 3.0 - u**3 / 45.0, 1.0 / np.tanh(safe) - 1.0 / safe)


def _langevin_prime(u):
    small = np.abs(u) < 1e-3
    safe = np.where(small, 1.0, u)
    with np.errstate(over="ignore"):
        big = 1.0 / safe**2 - 1.0 / np.sinh(safe) ** 2
    return np.where(small, 1.0 / 3.0 - u**2 / 15.0, big)


def softmin_drift_coefficients(temperature: float = 0.05) -> ControlledCoefficients:
    """Entropy-smoothed version of :func:`box_drift_coefficients` (1-D).

    The minimum of ``-a z`` over ``a in [-1, 1]`` is replaced by the softmin
    ``-tau log mean_a exp(a z / tau)`` under the uniform law, whose mean
    minimiser is the Langevin function ``coth(z/tau) - tau/z``.
    """
    tau = float(temperature)
    if tau <= 0:
        raise InvalidArgument("temperature must be positive")

    def alpha(i, ens, y, z):
        return _langevin(z[:, :1] / tau)

    def d_alpha_z(i, ens, y, z):
        return (_langevin_prime(z[:, :1] / tau) / tau)[:, :, None]

    def d_alpha_y(i, ens, y, z):
        return np.zeros((y.shape[0], 1))

    def ev(i, ens, y, z):
        return -tau * _log_sinhc(z[:, 0] / tau)

    def dz(i, ens, y, z):
        return -_langevin(z[:, :1] / tau)

    gen = GeneratorSpec(ev, _zeros_like_y, dz, lipschitz=1.0, name=f"softmin(tau={tau})",
                        minimizer=alpha)
    return ControlledCoefficients(
        actions=box_actions([-1.0], [1.0]),
        k=_const_scalar(0.0), l=_const_scalar(0.0), lam=lambda i, ens, a: a,
        alpha_star=alpha, d_alpha_y=d_alpha_y, d_alpha_z=d_alpha_z,
        k_bound=0.0, lambda_bound=1.0, generator=gen,
        name=f"softmin_drift(tau={tau})", params={"temperature": tau},
    )


def _action_values(coeffs: ControlledCoefficients, i, ens, a, y, z):
    return coeffs.l(i, ens, a) - coeffs.k(i, ens, a) * y - np.einsum("pd,pd->p", coeffs.lam(i, ens, a), z)


def hamiltonian(coeffs: ControlledCoefficients) -> GeneratorSpec:
    """``f(y, z) = min_a {l(a) - k(a) y - lam(a).z}`` with envelope derivatives."""
    if coeffs.generator is not None:
        return coeffs.generator
    cand = coeffs.actions.candidates()
    if cand.shape[0] == 0:
        raise InvalidArgument("action set is empty")

    if coeffs.alpha_star is not None:
        argmin = coeffs.alpha_star
    else:
        def argmin(i, ens, y, z):
            n = y.shape[0]
            best = np.full(n, np.inf)
            idx = np.zeros(n, dtype=np.int64)
            for j, a in enumerate(cand):
                v = _action_values(coeffs, i, ens, np.broadcast_to(a, (n, a.shape[0])), y, z)
                better = v < best  # strict: lowest index wins ties
                best = np.where(better, v, best)
                idx = np.where(better, j, idx)
            return cand[idx]

    def ev(i, ens, y, z):
        return _action_values(coeffs, i, ens, argmin(i, ens, y, z), y, z)

    def dy(i, ens, y, z):
        return -coeffs.k(i, ens, argmin(i, ens, y, z))

    def dz(i, ens, y, z):
        return -coeffs.lam(i, ens, argmin(i, ens, y, z))

    kinked = cand.shape[0] > 1 and coeffs.generator is None
    L = None
    if coeffs.k_bound is not None and coeffs.lambda_bound is not None:
        L = coeffs.k_bound + coeffs.lambda_bound
    return GeneratorSpec(ev, dy, dz, lipschitz=L, kinked=kinked,
                         name=f"hamiltonian({coeffs.name})", minimizer=argmin)


@dataclass(frozen=True)
class OptimalCoefficientTrack:
    """``lam* = -d_z f``, ``k* = -d_y f`` along a solution, and the discount factor.

    ``lam`` has shape ``(n_paths, n_steps, dim)``, ``k`` shape
    ``(n_paths, n_steps)``, ``discount`` shape ``(n_paths, n_steps + 1)``.
    """

    lam: np.ndarray
    k: np.ndarray
    discount: np.ndarray


def optimal_coefficients(f: GeneratorSpec, sol) -> OptimalCoefficientTrack:
    """Read the optimally controlled coefficients off a (reflected) BSDE solution."""
    ens = sol.ens
    n = ens.n_steps
    if sol.Z.shape[1] < n or not np.all(np.isfinite(sol.Z[:, :n])):
        raise InvalidState("solution has missing or non-finite Z values")
    lam = np.empty((ens.n_paths, n, ens.dim))
    k = np.empty((ens.n_paths, n))
    for i in range(n):
        y, z = sol.Y[:, i], sol.Z[:, i]
        lam[:, i] = -f.d_z(i, ens, y, z)
        k[:, i] = -f.d_y(i, ens, y, z)
    disc = np.ones((ens.n_paths, n + 1))
    disc[:, 1:] = np.exp(-np.cumsum(k * ens.dt, axis=1))
    return OptimalCoefficientTrack(lam, k, disc)
