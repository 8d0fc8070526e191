"""Junction and boundary closures for the linear acoustic flux.

Every pipe end meeting a junction keeps the characteristic invariant that
arrives from inside the pipe: ``w = q + a*rho`` for a pipe ending at the
junction (orientation ``in``) and ``w = q - a*rho`` for a pipe starting there
(``out``). All pipes share the junction density ``rho*`` (equal pressure
``a^2 rho*``) and the mass flows satisfy

    sum_in A_k q*_k - sum_out A_k q*_k = d

with ``d`` the withdrawal in kg/s (0 at internal junctions). Supply junctions
instead impose ``rho*`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class JunctionError(RuntimeError):
    pass


ORIENT_SIGN = {"in": 1.0, "out": -1.0}


def closure(u, orient, areas, a, demand=None, rho_fixed=None):
    """Vectorised junction solve.

    ``u`` has shape (..., K, 2) with the trace state of each of the K pipes,
    ``orient`` is +1 (in) / -1 (out) per pipe. Returns ``(rho_star, q_star)``
    with shapes (...) and (..., K).
    """
    u = np.asarray(u, dtype=float)
    orient = np.asarray(orient, dtype=float)
    areas = np.asarray(areas, dtype=float)
    if u.shape[-2] < 1:
        raise JunctionError("junction needs at least one incident pipe")
    if np.any(u[..., 0] <= 0):
        raise JunctionError("nonpositive trace density at junction")
    rho_k, q_k = u[..., 0], u[..., 1]
    if rho_fixed is not None:
        rho = np.broadcast_to(np.asarray(rho_fixed, dtype=float), rho_k.shape[:-1])
        if np.any(rho <= 0):
            raise JunctionError("nonpositive imposed density")
        q = q_k + orient * a * (rho_k - rho[..., None])
    else:
        total = areas.sum()
        alpha = areas / total
        share = 0.0 if demand is None else np.asarray(demand, dtype=float) / total
        rho = (np.sum(alpha * (a * rho_k + orient * q_k), axis=-1) - share) / a
        if np.any(rho <= 0):
            raise JunctionError(f"junction density became nonpositive (min {np.min(rho):.6g})")
        # q*_k = w_k - o_k a rho*, written with pairwise differences so that
        # the large a*rho parts cancel exactly
        dq = q_k[..., :, None] - (orient[:, None] * orient[None, :]) * q_k[..., None, :]
        drho = rho_k[..., :, None] - rho_k[..., None, :]
        pair = dq + orient[:, None] * a * drho
        q = np.sum(alpha * pair, axis=-1) + orient * np.asarray(share)[..., None]
    return rho, q


@dataclass(frozen=True)
class JunctionClosure:
    junction: str
    orientations: tuple[str, ...]
    areas: np.ndarray
    traces: np.ndarray
    rho_star: float
    q_star: np.ndarray
    a: float

    @property
    def fluxes(self) -> np.ndarray:
        """Interface flux (q*_k, a^2 rho*) for every incident pipe."""
        return np.stack([self.q_star, np.full_like(self.q_star, self.a**2 * self.rho_star)], axis=1)

    def mass_balance_residual(self, demand: float = 0.0) -> float:
        sign = np.array([ORIENT_SIGN[o] for o in self.orientations])
        flows = sign * self.areas * self.q_star
        scale = np.sum(np.abs(flows)) + abs(demand)
        return float(abs(np.sum(flows) - demand) / (scale if scale > 0 else 1.0))

    def invariants(self) -> tuple[np.ndarray, np.ndarray]:
        """(before, after) outgoing invariants of every pipe."""
        sign = np.array([ORIENT_SIGN[o] for o in self.orientations])
        before = self.traces[:, 1] + sign * self.a * self.traces[:, 0]
        after = self.q_star + sign * self.a * self.rho_star
        return before, after


def solve_junction(traces, orientations, areas, demand: float, a: float, junction: str = "") -> JunctionClosure:
    """Solve one junction Riemann problem for pipe traces of shape (K, 2)."""
    traces = np.asarray(traces, dtype=float).reshape(-1, 2)
    orient = np.array([ORIENT_SIGN[o] for o in orientations])
    areas = np.asarray(areas, dtype=float)
    if not a > 0:
        raise JunctionError("sound speed must be positive")
    rho, q = closure(traces, orient, areas, a, demand=demand)
    return JunctionClosure(junction, tuple(orientations), areas, traces, float(rho), q, float(a))


def boundary_ghost(kind: str, value: float, trace, a: float, area: float = 1.0, end: str = "right") -> np.ndarray:
    """Ghost state outside a pipe end.

    ``supply``: ``value`` is the imposed density. ``withdrawal``: ``value`` is
    the withdrawn mass flow (kg/s) so the ghost mass flux is ``value/area``.
    The invariant leaving the pipe is copied into the ghost, so the upwind
    flux between trace and ghost equals the junction closure.
    """
    rho, q = (float(v) for v in np.asarray(trace, dtype=float))
    if rho <= 0:
        raise JunctionError("nonpositive trace density")
    sign = 1.0 if end == "right" else -1.0
    w = q + sign * a * rho
    if kind == "supply":
        if not value > 0:
            raise JunctionError("nonpositive imposed density")
        return np.array([value, w - sign * a * value])
    if kind == "withdrawal":
        qg = sign * value / area
        return np.array([(w - qg) / (sign * a), qg])
    raise ValueError(f"unknown boundary kind {kind!r}")
