"""Fast bimolecular reaction A + B -> C under anisotropic dispersion.

The two invariants ``c_F = c_A + (n_A/n_C) c_C`` and
``c_G = c_B + (n_B/n_C) c_C`` obey pure (anisotropic) diffusion. Each
backward-Euler step is solved as a bound-constrained quadratic program, so
the discrete invariants never leave ``[0, c_max]`` even where the stencil of
the mixed derivative violates the discrete maximum principle. Species are
recovered afterwards with the max-transforms of the fast-reaction limit.

Grid: ``nodes x nodes`` vertices on ``[0, L]^2`` with spacing
``h = L / (nodes - 1)``; node ``(j, l)`` sits at ``x = j h, y = l h`` and has
flat index ``j * nodes + l``. Zero-flux boundaries are natural in the
discretisation. Discrete mass is ``sum(mass_i * c_i)`` with the lumped nodal
areas (``h^2`` inside, halved on edges, quartered at corners).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from . import kernels

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


class ConfigError(ValueError):
    """Invalid simulation configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class StepSolverError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class SimulationConfig:
    length: float = 1.0
    nodes: int = 41
    dt: float = 5e-3
    horizon: float = 1.0
    n_a: float = 1.0
    n_b: float = 1.0
    n_c: float = 1.0
    d_m: float = 1e-3
    alpha_l: float = 1.0
    alpha_t: float = 1e-4
    v0: float = 1e-1
    kappa_fl: float = 3.0
    period: float = 1e-4
    conserve_mass: bool = True
    qp_tol: float = 1e-10
    k_ab: str = "infinite (fast-reaction limit)"

    @property
    def steps(self):
        return int(round(self.horizon / self.dt))

    @property
    def h(self):
        return self.length / (self.nodes - 1)

    @property
    def kappa_f(self):
        return self.kappa_fl / self.length

    def validate(self):
        if not isinstance(self.nodes, int) or self.nodes < 3:
            raise ConfigError("nodes", f"need at least 3 grid nodes per side, got {self.nodes}")
        for name in ("length", "dt", "horizon", "d_m", "n_a", "n_b", "n_c", "period", "qp_tol"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(name, f"must be a finite number > 0, got {value!r}")
        if not self.alpha_t >= 0:
            raise ConfigError("alpha_t", "must be >= 0")
        if not self.alpha_l >= self.alpha_t:
            raise ConfigError("alpha_l", "must be >= alpha_t")
        if self.kappa_fl <= 0:
            raise ConfigError("kappa_fl", "must be > 0")
        if self.v0 < 0:
            raise ConfigError("v0", "must be >= 0")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(steps, 1):
            raise ConfigError("dt", "horizon must be an integer multiple of dt")
        return self

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            ftype = known[key].type
            try:
                if ftype in ("int", int):
                    if isinstance(value, float) and not value.is_integer():
                        raise ValueError
                    value = int(value)
                elif ftype in ("float", float):
                    value = float(value)
                elif ftype in ("bool", bool):
                    if not isinstance(value, bool):
                        raise ValueError
            except (TypeError, ValueError):
                raise ConfigError(key, f"bad value {value!r}") from None
            kwargs[key] = value
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a flat JSON object")
        return cls.from_dict(data)

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- velocity and dispersion -------------------------------------------------

def _first_half(t, period):
    q = np.asarray(t, dtype=float) / period
    q2 = np.round(2.0 * q)
    q = np.where(np.abs(2.0 * q - q2) < 1e-9, q2 / 2.0, q)
    return (q - np.floor(q)) < 0.5


def stream_function(x, y, t, cfg):
    kf = cfg.kappa_f
    w = 2.0 * np.pi * kf
    base = np.sin(w * np.asarray(x)) - np.sin(w * np.asarray(y))
    pert = np.where(_first_half(t, cfg.period),
                    cfg.v0 * np.cos(w * np.asarray(y)),
                    -cfg.v0 * np.cos(w * np.asarray(x)))
    return (base + pert) / w


def velocity(x, y, t, cfg):
    """``(v_x, v_y) = (-d psi/dy, d psi/dx)``."""
    w = 2.0 * np.pi * cfg.kappa_f
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    first = _first_half(t, cfg.period)
    vx = np.cos(w * y) + np.where(first, cfg.v0 * np.sin(w * y), 0.0)
    vy = np.cos(w * x) + np.where(first, 0.0, cfg.v0 * np.sin(w * x))
    return vx, vy


def dispersion_tensor(v, cfg):
    """``D = (D_m + a_T |v|) I + (a_L - a_T)/|v| v v^T`` for ``v`` of shape (..., 2).

    Evaluated in the equivalent form
    ``D_m I + a_L |v| e e^T + a_T |v| (I - e e^T)`` with ``e = v/|v|``, which
    is exact for axis-aligned flow. Returns an array of shape (..., 2, 2).
    Where ``|v| <= 1e-12`` the velocity terms are dropped, leaving ``D_m I``.
    """
    v = np.asarray(v, dtype=float)
    speed = np.linalg.norm(v, axis=-1)
    moving = speed > NORM_EPS
    safe = np.where(moving, speed, 1.0)
    e = v / safe[..., None]
    P = e[..., :, None] * e[..., None, :]
    Q = np.eye(2) - P
    along = np.where(moving, cfg.alpha_l * speed, 0.0)[..., None, None]
    across = np.where(moving, cfg.alpha_t * speed, 0.0)[..., None, None]
    D = along * P + across * Q
    D[..., 0, 0] += cfg.d_m
    D[..., 1, 1] += cfg.d_m
    return D


# -- discretisation ------------------------------------------------------------

def lumped_mass(cfg):
    n = cfg.nodes
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return (np.outer(w, w) * cfg.h ** 2).ravel()


def _quad_local():
    # local node order: (0,0), (1,0), (0,1), (1,1) as (dx, dy) offsets
    ex_b = np.array([-1.0, 1.0, 0.0, 0.0])
    ex_t = np.array([0.0, 0.0, -1.0, 1.0])
    ey_l = np.array([-1.0, 0.0, 1.0, 0.0])
    ey_r = np.array([0.0, -1.0, 0.0, 1.0])
    K11 = 0.5 * (np.outer(ex_b, ex_b) + np.outer(ex_t, ex_t))
    K22 = 0.5 * (np.outer(ey_l, ey_l) + np.outer(ey_r, ey_r))
    sx, sy = ex_b + ex_t, ey_l + ey_r
    K12 = 0.25 * (np.outer(sx, sy) + np.outer(sy, sx))
    return K11, K22, K12


def quad_dispersion(cfg, t):
    """Dispersion tensor at the quad centres, shape (nodes-1, nodes-1, 2, 2)."""
    h = cfg.h
    c = (np.arange(cfg.nodes - 1) + 0.5) * h
    xc, yc = np.meshgrid(c, c, indexing="ij")
    vx, vy = velocity(xc, yc, t, cfg)
    return dispersion_tensor(np.stack([vx, vy], axis=-1), cfg)


def assemble_operator(cfg, t):
    """Stiffness matrix of ``-div(D grad .)`` and the load vector.

    Each grid quad contributes the energy
    ``D11/2 (dx_b^2 + dx_t^2) + D22/2 (dy_l^2 + dy_r^2) + D12/2 s_x s_y``
    with ``s_x, s_y`` the summed edge differences, all coefficients taken
    at the quad centre. The matrix is symmetric positive semidefinite with
    zero row sums. There are no sources, so the load is zero.
    """
    n = cfg.nodes
    D = quad_dispersion(cfg, t)
    K11, K22, K12 = _quad_local()
    j, l = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
    base = (j * n + l).ravel()
    local = np.stack([base, base + n, base + 1, base + n + 1], axis=1)
    d11 = D[..., 0, 0].ravel()
    d22 = D[..., 1, 1].ravel()
    d12 = D[..., 0, 1].ravel()
    vals = (d11[:, None, None] * K11 + d22[:, None, None] * K22
            + d12[:, None, None] * K12)
    rows = np.repeat(local, 4, axis=1).ravel()
    cols = np.tile(local, (1, 4)).ravel()
    K = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(n * n, n * n)).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    return K, np.zeros(n * n)


def greedy_coloring(A):
    """Partition rows into groups with no coupling inside a group."""
    A = sp.csr_matrix(A)
    n = A.shape[0]
    color = np.full(n, -1)
    for i in range(n):
        nbrs = A.indices[A.indptr[i]:A.indptr[i + 1]]
        used = set(color[nbrs[nbrs != i]].tolist())
        c = 0
        while c in used:
            c += 1
        color[i] = c
    order = np.argsort(color, kind="stable").astype(np.int32)
    ptr = np.searchsorted(color[order], np.arange(color.max() + 2)).astype(np.int32)
    return order, ptr


class BoxQP:
    """``min 0.5 x^T A x - b^T x`` subject to ``lo <= x <= hi``.

    Solved by projected Gauss-Seidel. Convergence is tested on the scaled
    KKT residual ``max |x - clip(x - (A x - b) / diag(A), lo, hi)|``.
    """

    def __init__(self, A, tol=1e-10, max_sweeps=None):
        A = sp.csr_matrix(A, dtype=np.float64)
        A.sum_duplicates()
        A.sort_indices()
        self.A = A
        self.diag = np.ascontiguousarray(A.diagonal())
        if np.any(self.diag <= 0):
            raise ValueError("matrix needs a positive diagonal")
        self.indptr = A.indptr.astype(np.int32)
        self.indices = A.indices.astype(np.int32)
        self.data = np.ascontiguousarray(A.data)
        self.order, self.color_ptr = greedy_coloring(A)
        self.tol = tol
        self.max_sweeps = max_sweeps if max_sweeps is not None else 10 * A.shape[0]
        self.last_sweeps = 0

    def residual(self, x, rhs, lo, hi):
        g = self.A @ x - rhs
        return float(np.max(np.abs(x - np.clip(x - g / self.diag, lo, hi)), initial=0.0))

    def solve(self, rhs, lo, hi, x0=None):
        n = self.A.shape[0]
        rhs = np.ascontiguousarray(rhs, dtype=np.float64)
        lo = np.ascontiguousarray(np.broadcast_to(lo, (n,)), dtype=np.float64)
        hi = np.ascontiguousarray(np.broadcast_to(hi, (n,)), dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        x = np.clip(np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64), lo, hi)
        x = np.ascontiguousarray(x)
        used = 0
        while True:
            sweeps, _ = kernels.pgs_solve(self.indptr, self.indices, self.data, self.diag,
                                          self.order, self.color_ptr, rhs, lo, hi, x,
                                          self.tol, self.max_sweeps - used)
            used += sweeps
            res = self.residual(x, rhs, lo, hi)
            if res <= self.tol:
                break
            if used >= self.max_sweeps:
                self.last_sweeps = used
                raise StepSolverError(
                    f"projected Gauss-Seidel stalled at KKT residual {res:.3e} after {used} sweeps")
        self.last_sweeps = used
        return x


def constrained_step(A, c_prev, bounds, dt, mass=None, load=None, tol=1e-10, max_sweeps=None):
    """One backward-Euler step posed as a box-constrained QP.

    Minimises ``0.5 <c, A c> - <c, load> - (1/dt) <c, mass * c_prev>`` over
    ``bounds[0] <= c <= bounds[1]``; `A` must already contain the
    ``mass / dt`` term.
    """
    c_prev = np.asarray(c_prev, dtype=float)
    mass = np.ones_like(c_prev) if mass is None else np.asarray(mass, dtype=float)
    rhs = mass * c_prev / dt
    if load is not None:
        rhs = rhs + load
    qp = A if isinstance(A, BoxQP) else BoxQP(A, tol=tol, max_sweeps=max_sweeps)
    return qp.solve(rhs, bounds[0], bounds[1], x0=c_prev)


def _mass_shift(c, lo, hi, mass, target):
    # smallest uniform shift (then clipped to the box) that hits the target mass
    def g(tau):
        return float(mass @ np.clip(c + tau, lo, hi)) - target

    if g(0.0) == 0.0:
        return c
    span = float(np.max(hi - lo)) + 1.0
    tau = brentq(g, -span, span, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return np.clip(c + tau, lo, hi)


def mass_conserving_step(qp, rhs, lo, hi, mass, target, x0, dt, rtol=1e-9, max_iter=60):
    """Box-constrained step that also holds ``mass . c == target``.

    The equality multiplier enters as a uniform load ``mu * mass``; the
    box-QP solution mass is nondecreasing in ``mu``, so a safeguarded
    secant search on ``mu`` converges. The search stops at `rtol` (the QP
    tolerance limits it) and a final clipped uniform shift of the order of
    the QP tolerance removes the remaining excess. Returns ``(c, mu)``.
    """
    lo = np.broadcast_to(lo, rhs.shape)
    hi = np.broadcast_to(hi, rhs.shape)

    def excess(mu, start):
        c = qp.solve(rhs + mu * mass, lo, hi, x0=start)
        return c, float(mass @ c) - target

    tol = rtol * abs(target)
    mu = 0.0
    c, g = excess(mu, x0)
    mus, gs = [mu], [g]
    lo_b = hi_b = None
    it = 0
    while abs(g) > tol:
        it += 1
        if it > max_iter:
            raise StepSolverError(f"mass constraint not met (excess {g:.3e})")
        if g < 0:
            lo_b = mu
        else:
            hi_b = mu
        free = (c > lo + 1e-14) & (c < hi - 1e-14)
        slope = dt * float(mass[free].sum()) if free.any() else dt * float(mass.sum())
        if len(mus) >= 2 and gs[-1] != gs[-2] and mus[-1] != mus[-2]:
            sec = (gs[-1] - gs[-2]) / (mus[-1] - mus[-2])
            if sec > 0:
                slope = sec
        mu_new = mu - g / slope
        if lo_b is not None and hi_b is not None and not min(lo_b, hi_b) < mu_new < max(lo_b, hi_b):
            mu_new = 0.5 * (lo_b + hi_b)
        mu = mu_new
        c, g = excess(mu, c)
        mus.append(mu)
        gs.append(g)
    return _mass_shift(c, lo, hi, mass, target), mu


def initial_invariants(cfg):
    """``c_F`` is 1 on the left half and ``c_G`` 1 on the right half; both 0.5 on the midline."""
    n = cfg.nodes
    x = np.arange(n) * cfg.h
    colF = np.where(x < cfg.length / 2, 1.0, 0.0)
    colG = np.where(x > cfg.length / 2, 1.0, 0.0)
    mid = np.isclose(x, cfg.length / 2, rtol=0, atol=1e-12 * cfg.length)
    colF[mid] = colG[mid] = 0.5
    # away from the midline c_C is zero, so each invariant equals its reactant
    return np.repeat(colF[:, None], n, axis=1), np.repeat(colG[:, None], n, axis=1)


@dataclass
class SimulationResult:
    c_f: np.ndarray
    c_g: np.ndarray
    times: np.ndarray
    initial_f: np.ndarray
    initial_g: np.ndarray
    mass_drift: float
    qp_sweeps: list


def simulate_invariants(cfg, start=None, t0=0.0, steps=None):
    """Integrate both invariants; returns a :class:`SimulationResult`.

    Output tensors have shape ``(steps, nodes, nodes)`` holding the states
    at ``t0 + dt, ..., t0 + steps*dt`` (the initial state is kept apart).
    """
    cfg.validate()
    n = cfg.nodes
    steps = cfg.steps if steps is None else steps
    mass = lumped_mass(cfg)
    if start is None:
        F0, G0 = initial_invariants(cfg)
    else:
        F0, G0 = start
    states = [np.asarray(F0, float).ravel().copy(), np.asarray(G0, float).ravel().copy()]
    bounds = [(0.0, float(s.max())) for s in states]
    targets = [float(mass @ s) for s in states]
    solvers = {}
    out = np.empty((2, steps, n, n))
    times = t0 + cfg.dt * np.arange(1, steps + 1)
    sweeps = []
    for i, t in enumerate(times):
        branch = bool(_first_half(t, cfg.period))
        if branch not in solvers:
            K, load = assemble_operator(cfg, t)
            A = sp.diags(mass / cfg.dt) + K
            solvers[branch] = (BoxQP(A, tol=cfg.qp_tol), load)
        qp, load = solvers[branch]
        for s in range(2):
            rhs = mass * states[s] / cfg.dt + load
            lo, hi = bounds[s]
            try:
                if cfg.conserve_mass:
                    c, _ = mass_conserving_step(qp, rhs, lo, hi, mass, targets[s], states[s], cfg.dt)
                else:
                    c = qp.solve(rhs, lo, hi, x0=states[s])
            except StepSolverError as exc:
                raise StepSolverError(str(exc), step=i + 1) from exc
            sweeps.append(qp.last_sweeps)
            states[s] = c
            out[s, i] = c.reshape(n, n)
    drift = max(abs(float(mass @ out[s, i].ravel()) - targets[s]) / targets[s]
                for s in range(2) for i in range(steps))
    return SimulationResult(out[0], out[1], times, np.asarray(F0, float), np.asarray(G0, float),
                            drift, sweeps)


def discrete_mass(field, cfg):
    return float(lumped_mass(cfg) @ np.asarray(field).reshape(-1))


def recover_species(c_f, c_g, n_a=1.0, n_b=1.0, n_c=1.0):
    """Species from the invariants in the fast-reaction limit."""
    c_f = np.asarray(c_f, dtype=float)
    c_g = np.asarray(c_g, dtype=float)
    c_a = np.maximum(c_f - (n_a / n_b) * c_g, 0.0)
    c_b = (n_b / n_a) * np.maximum(-c_f + (n_a / n_b) * c_g, 0.0)
    c_c = (n_c / n_a) * (c_f - c_a)
    return c_a, c_b, c_c
