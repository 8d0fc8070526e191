"""Random parameter domain: marginal distributions, box probabilities, quadrature."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .network import ConfigError

DEFAULT_TRUNCATION_SIGMAS = 6.0


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class RandomDimension:
    """One independent random parameter on the bounded interval [lo, hi].

    Gaussian dimensions are truncated to [lo, hi] and renormalised.
    """

    name: str
    dist: str
    lo: float
    hi: float
    mean: float = float("nan")
    stddev: float = float("nan")

    def __post_init__(self):
        if self.dist not in ("uniform", "gaussian"):
            raise ValueError(f"unknown distribution {self.dist!r}")
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError(f"{self.name}: need finite lo < hi, got [{self.lo}, {self.hi}]")
        if self.dist == "gaussian" and not self.stddev > 0:
            raise ValueError(f"{self.name}: stddev must be positive")

    @classmethod
    def uniform(cls, name: str, lo: float, hi: float) -> RandomDimension:
        return cls(name, "uniform", float(lo), float(hi))

    @classmethod
    def gaussian(
        cls, name: str, mean: float, stddev: float, truncation_sigmas: float = DEFAULT_TRUNCATION_SIGMAS
    ) -> RandomDimension:
        k = float(truncation_sigmas)
        return cls(name, "gaussian", mean - k * stddev, mean + k * stddev, float(mean), float(stddev))

    def _z(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.stddev

    @property
    def _mass(self) -> float:
        return float(special.ndtr(self._z(self.hi)) - special.ndtr(self._z(self.lo)))

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        if self.dist == "uniform":
            return np.full(y.shape, 1.0 / (self.hi - self.lo))
        z = self._z(y)
        return np.exp(-0.5 * z * z) / (np.sqrt(2.0 * np.pi) * self.stddev * self._mass)

    def prob(self, a, b):
        """P(a <= y <= b), vectorised over interval arrays."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.dist == "uniform":
            return (b - a) / (self.hi - self.lo)
        za, zb = self._z(a), self._z(b)
        # difference on the side away from the mean keeps tail precision
        upper = special.ndtr(-za) - special.ndtr(-zb)
        lower = special.ndtr(zb) - special.ndtr(za)
        return np.where(za > 0, upper, lower) / self._mass

    def centroid(self, a, b):
        """Conditional mean of y on [a, b]."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        mid = 0.5 * (a + b)
        if self.dist == "uniform":
            return mid
        za, zb = self._z(a), self._z(b)
        pa = np.exp(-0.5 * za * za)
        pb = np.exp(-0.5 * zb * zb)
        p = self.prob(a, b) * self._mass * np.sqrt(2.0 * np.pi)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = self.mean + self.stddev * (pa - pb) / p
        ok = np.isfinite(c) & (c >= a) & (c <= b) & ((b - a) > 1e-9 * self.stddev)
        return np.where(ok, c, mid)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        if self.dist == "uniform":
            return self.lo + u * (self.hi - self.lo)
        fa = special.ndtr(self._z(self.lo))
        y = self.mean + self.stddev * special.ndtri(fa + u * self._mass)
        return np.clip(y, self.lo, self.hi)


class StochasticSpace:
    """Product of independent random dimensions."""

    def __init__(self, dims: Sequence[RandomDimension]):
        if len(dims) < 1:
            raise ValueError("at least one random dimension is required")
        self.dims = tuple(dims)
        self.lo = np.array([d.lo for d in self.dims])
        self.hi = np.array([d.hi for d in self.dims])

    def __repr__(self) -> str:
        return f"StochasticSpace({[d.name for d in self.dims]})"

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def domain(self) -> np.ndarray:
        return np.stack([self.lo, self.hi], axis=1)

    def _check_box(self, box) -> np.ndarray:
        box = np.asarray(box, dtype=float).reshape(self.ndim, 2)
        if np.any(box[:, 1] <= box[:, 0]):
            raise DomainError(f"degenerate stochastic box {box.tolist()}")
        return box

    def density(self, y) -> float:
        y = np.asarray(y, dtype=float).reshape(self.ndim)
        if np.any(y < self.lo) or np.any(y > self.hi):
            raise DomainError(f"point {y.tolist()} outside the stochastic domain")
        return float(np.prod([d.pdf(v) for d, v in zip(self.dims, y)]))

    def densities(self, ys: np.ndarray) -> np.ndarray:
        """Joint density at an (m, ndim) array of points (no bounds check)."""
        out = np.ones(ys.shape[0])
        for k, d in enumerate(self.dims):
            out = out * d.pdf(ys[:, k])
        return out

    def cell_probability(self, box) -> float:
        box = self._check_box(box)
        if np.any(box[:, 0] < self.lo - 1e-12 * (self.hi - self.lo)) or np.any(
            box[:, 1] > self.hi + 1e-12 * (self.hi - self.lo)
        ):
            raise DomainError("box extends outside the stochastic domain")
        return float(self.probabilities(box[None, :, 0], box[None, :, 1])[0])

    def probabilities(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Box probabilities for (m, ndim) corner arrays."""
        out = np.ones(lo.shape[0])
        for k, d in enumerate(self.dims):
            out = out * d.prob(lo[:, k], hi[:, k])
        return out

    def centroids(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        return np.stack([d.centroid(lo[:, k], hi[:, k]) for k, d in enumerate(self.dims)], axis=1)

    def quadrature_nodes(self, box, order: int, normalize: bool = False):
        """Tensor Gauss-Legendre nodes in ``box`` with density-weighted weights.

        Returns ``(nodes, weights)`` with shapes (order**ndim, ndim) and
        (order**ndim,). With ``normalize`` the weights are rescaled to sum to
        the exact box probability.
        """
        box = self._check_box(box)
        nodes, weights = self.batch_quadrature(box[None, :, 0], box[None, :, 1], order, normalize)
        return nodes[0], weights[0]

    def batch_quadrature(self, lo: np.ndarray, hi: np.ndarray, order, normalize: bool = False):
        """Quadrature for many boxes at once: (m, n, ndim) nodes, (m, n) weights.

        ``order`` is one Gauss-Legendre order for every dimension or a
        sequence with one order per dimension.
        """
        orders = [order] * self.ndim if np.isscalar(order) else list(order)
        if len(orders) != self.ndim or min(orders) < 1:
            raise ValueError("quadrature order must be >= 1 in every dimension")
        rules = [gauss_legendre(int(k)) for k in orders]
        grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
        ref = np.stack([g.ravel() for g in grids], axis=1)  # in [-1, 1]
        wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
        refw = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        nodes = mid[:, None, :] + half[:, None, :] * ref[None, :, :]
        m, n = nodes.shape[0], nodes.shape[1]
        dens = self.densities(nodes.reshape(m * n, self.ndim)).reshape(m, n)
        weights = dens * refw[None, :] * np.prod(half, axis=1)[:, None]
        if normalize:
            p = self.probabilities(lo, hi)
            if n == 1:
                weights = p[:, None].copy()
            else:
                weights = weights * (p / weights.sum(axis=1))[:, None]
        return nodes, weights

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One draw by per-dimension inverse CDF."""
        u = rng.random(self.ndim)
        return np.array([d.ppf(u[k]) for k, d in enumerate(self.dims)])


class PointMeasure:
    """Dirac measure at a fixed realisation ``y``.

    Stands in for a :class:`StochasticSpace` when the solver runs a single
    deterministic realisation: the whole domain is one cell of probability 1
    whose only quadrature node is ``y``.
    """

    def __init__(self, space: StochasticSpace, y):
        self.space = space
        self.y = np.asarray(y, dtype=float).reshape(space.ndim)
        if np.any(self.y < space.lo) or np.any(self.y > space.hi):
            raise DomainError(f"realisation {self.y.tolist()} outside the stochastic domain")
        self.dims = space.dims
        self.lo = space.lo
        self.hi = space.hi

    ndim = property(lambda self: self.space.ndim)
    names = property(lambda self: self.space.names)
    domain = property(lambda self: self.space.domain)

    def index(self, name: str) -> int:
        return self.space.index(name)

    def probabilities(self, lo, hi):
        inside = np.all((lo <= self.y) & (self.y <= hi), axis=1)
        return np.where(inside, 1.0, 0.0)

    def centroids(self, lo, hi):
        return np.broadcast_to(self.y, lo.shape).copy()

    def batch_quadrature(self, lo, hi, order, normalize=False):
        m = lo.shape[0]
        nodes = np.broadcast_to(self.y, (m, 1, self.ndim)).copy()
        return nodes, self.probabilities(lo, hi)[:, None]


@functools.lru_cache(maxsize=None)
def gauss_legendre(order: int):
    return np.polynomial.legendre.leggauss(order)


def parse_stochastic(section: Mapping) -> StochasticSpace:
    """Build a space from the ``[stochastic.<name>]`` config tables."""
    dims = []
    for name, raw in section.items():
        loc = f"stochastic.{name}"
        dist = raw.get("dist")
        try:
            if dist == "uniform":
                dims.append(RandomDimension.uniform(name, float(raw["lo"]), float(raw["hi"])))
            elif dist == "gaussian":
                dims.append(
                    RandomDimension.gaussian(
                        name,
                        float(raw["mean"]),
                        float(raw["stddev"]),
                        float(raw.get("truncation_sigmas", DEFAULT_TRUNCATION_SIGMAS)),
                    )
                )
            else:
                raise ConfigError(f"unknown dist {dist!r}", loc)
        except KeyError as exc:
            raise ConfigError(f"missing key {exc.args[0]!r}", loc) from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), loc) from None
    if not dims:
        raise ConfigError("at least one random dimension is required", "stochastic")
    return StochasticSpace(dims)


def stochastic_to_dict(space: StochasticSpace) -> dict:
    out = {}
    for d in space.dims:
        if d.dist == "uniform":
            out[d.name] = {"dist": "uniform", "lo": d.lo, "hi": d.hi}
        else:
            out[d.name] = {
                "dist": "gaussian",
                "mean": d.mean,
                "stddev": d.stddev,
                "truncation_sigmas": (d.hi - d.mean) / d.stddev,
            }
    return out
