"""Ground-truth simulation of paired response/response-time batteries.

Latent pairs live on the unit square with uniform marginals; items see
them through the normal quantile transform. Response times follow a
linear-normal model in transformed slowness, responses a two-parameter
logistic in transformed ability. Optional per-item shocks inject local
dependence between one response-time/response pair beyond what the
factors explain, for diagnostics testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .data import ColumnInfo, Dataset
from .exceptions import ConfigurationError
from .latent import CopulaModel
from .likelihood import FACTOR_ABILITY, FACTOR_SPEED
from .measurement import CONTINUOUS, DISCRETE

CLIP_SDS = 4.0


@dataclass(frozen=True)
class TimeItemTruth:
    """Linear-normal log10 response time in transformed slowness."""

    name: str
    intercept: float = 0.6
    slope: float = 0.25
    sigma: float = 0.2

    def __post_init__(self):
        if self.slope < 0 or self.sigma <= 0:
            raise ConfigurationError(f"time item {self.name!r}: bad slope/sigma")


@dataclass(frozen=True)
class ResponseItemTruth:
    """Two-parameter logistic response in transformed ability."""

    name: str
    discrimination: float = 1.5
    difficulty: float = 0.0

    def __post_init__(self):
        if self.discrimination <= 0:
            raise ConfigurationError(f"response item {self.name!r}: bad discrimination")

    def irf(self, x_star) -> np.ndarray:
        """Probability of a correct response at transformed ability values."""
        return expit(self.discrimination * (np.asarray(x_star, dtype=float) - self.difficulty))


@dataclass(frozen=True)
class ShockTruth:
    """Shared normal shock tying one item's time and response together."""

    item: str
    sd: float = 1.0
    on_time: float = 0.3
    on_response: float = 1.5


@dataclass(frozen=True)
class GaussianCopulaTruth:
    """Bivariate normal dependence between the transformed factors."""

    rho: float = 0.5

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ConfigurationError(f"rho {self.rho} outside (-1, 1)")

    def draw(self, n: int, rng) -> tuple:
        z1 = rng.standard_normal(n)
        z2 = self.rho * z1 + np.sqrt(1.0 - self.rho**2) * rng.standard_normal(n)
        return z1, z2

    @property
    def eta_squared(self) -> float:
        return self.rho**2


@dataclass(frozen=True)
class MixtureCopulaTruth:
    """Two-component normal mixture with opposite-signed dependence.

    Slowness is a balanced mixture of unit normals at +-separation whose
    components carry correlations +rho and -rho with ability. The exact
    mixture CDF maps slowness back to a uniform, so the pair is a genuine
    copula sample with a nonmonotone conditional mean: dependence is
    informative mostly for interior slowness values.
    """

    separation: float = 1.0
    rho: float = 0.6
    weight: float = 0.5

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0 or not 0.0 < self.weight < 1.0:
            raise ConfigurationError("bad mixture copula parameters")

    def slowness_cdf(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return self.weight * ndtr(v + self.separation) + (1.0 - self.weight) * ndtr(
            v - self.separation
        )

    def draw(self, n: int, rng) -> tuple:
        comp = rng.random(n) < self.weight
        e1 = rng.standard_normal(n)
        e2 = rng.standard_normal(n)
        mean = np.where(comp, -self.separation, self.separation)
        sign = np.where(comp, 1.0, -1.0)
        v1 = mean + e1
        v2 = sign * self.rho * e1 + np.sqrt(1.0 - self.rho**2) * e2
        return ndtri(self.slowness_cdf(v1)), v2


@dataclass(frozen=True)
class SplineCopulaTruth:
    """Sample from an explicit spline copula by conditional inversion."""

    copula: CopulaModel
    grid_size: int = 2049

    def draw(self, n: int, rng) -> tuple:
        u1 = rng.random(n)
        grid = np.linspace(0.0, 1.0, self.grid_size)
        f_grid = self.copula.basis.design_matrix(grid)
        cond = f_grid @ (self.copula.xi @ self.copula.basis.design_matrix(u1).T)
        cdf = np.cumsum((cond[1:] + cond[:-1]) * 0.5 * np.diff(grid)[:, None], axis=0)
        cdf = np.vstack([np.zeros(n), cdf])
        cdf /= cdf[-1]
        t = rng.random(n)
        u2 = np.empty(n)
        for i in range(n):
            u2[i] = np.interp(t[i], cdf[:, i], grid)
        return ndtri(u1), ndtri(np.clip(u2, 1e-12, 1.0 - 1e-12))


@dataclass(frozen=True)
class SimulationTruth:
    """Complete generator: item parameters, copula, optional shocks."""

    time_items: tuple
    response_items: tuple
    copula: object
    shocks: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "time_items", tuple(self.time_items))
        object.__setattr__(self, "response_items", tuple(self.response_items))
        object.__setattr__(self, "shocks", tuple(self.shocks))
        for block in (self.time_items, self.response_items):
            names = [t.name for t in block]
            if len(set(names)) != len(names):
                raise ConfigurationError("duplicate item names in simulation truth")
        paired = {t.name for t in self.time_items} & {r.name for r in self.response_items}
        for s in self.shocks:
            if s.item not in paired:
                raise ConfigurationError(
                    f"shock on {s.item!r} needs both a time and a response item of that name"
                )

    def time_bounds(self, item: TimeItemTruth) -> tuple:
        var = item.slope**2 + item.sigma**2
        for s in self.shocks:
            if s.item == item.name:
                var += (s.on_time * s.sd) ** 2
        half = CLIP_SDS * np.sqrt(var)
        return (item.intercept - half, item.intercept + half)


@dataclass
class SimulationDraws:
    """Latent material behind one simulated sample."""

    slowness_star: np.ndarray
    ability_star: np.ndarray
    shocks: dict = field(default_factory=dict)

    @property
    def slowness_unit(self) -> np.ndarray:
        return ndtr(self.slowness_star)

    @property
    def ability_unit(self) -> np.ndarray:
        return ndtr(self.ability_star)


def default_truth(
    n_pairs: int = 3,
    rho: float = 0.5,
    copula=None,
    shock: ShockTruth = None,
) -> SimulationTruth:
    """A battery of paired time/response items with staggered parameters."""
    if n_pairs < 1:
        raise ConfigurationError("need at least one item pair")
    times = []
    resps = []
    for j in range(n_pairs):
        name = f"item{j + 1}"
        times.append(
            TimeItemTruth(
                name=name,
                intercept=0.6 + 0.05 * j,
                slope=0.2 + 0.04 * (j % 3),
                sigma=0.18 + 0.02 * (j % 2),
            )
        )
        resps.append(
            ResponseItemTruth(
                name=name,
                discrimination=1.2 + 0.3 * (j % 3),
                difficulty=-0.75 + 1.5 * j / max(n_pairs - 1, 1),
            )
        )
    return SimulationTruth(
        time_items=times,
        response_items=resps,
        copula=copula if copula is not None else GaussianCopulaTruth(rho=rho),
        shocks=(shock,) if shock is not None else (),
    )


def simulate(truth: SimulationTruth, n: int, seed: int = 0):
    """Draw a complete Dataset plus the latent draws behind it.

    Column order is all response-time variables then all responses. Times
    are clipped to fixed truth-implied bounds (intercept +- 4 marginal SDs)
    before rescaling, so the bounds do not depend on the sample.
    """
    if n < 1:
        raise ConfigurationError(f"sample size {n} must be positive")
    rng = np.random.default_rng(seed)
    z1, z2 = truth.copula.draw(n, rng)
    shocks = {s.item: rng.standard_normal(n) * s.sd for s in truth.shocks}
    shock_by_item = {s.item: s for s in truth.shocks}

    resp_names = {r.name for r in truth.response_items}
    columns = []
    matrix = []
    for item in truth.time_items:
        logt = item.intercept + item.slope * z1 + item.sigma * rng.standard_normal(n)
        s = shock_by_item.get(item.name)
        if s is not None:
            logt = logt + s.on_time * shocks[item.name]
        lo, hi = truth.time_bounds(item)
        scaled = (np.clip(logt, lo, hi) - lo) / (hi - lo)
        columns.append(
            ColumnInfo(
                name=item.name + "_rt",
                kind=CONTINUOUS,
                factor=FACTOR_SPEED,
                monotone=True,
                bounds=(lo, hi),
                partner=item.name if item.name in resp_names else None,
            )
        )
        matrix.append(scaled)

    time_names = {t.name for t in truth.time_items}
    for item in truth.response_items:
        logit = item.discrimination * (z2 - item.difficulty)
        s = shock_by_item.get(item.name)
        if s is not None:
            logit = logit + s.on_response * shocks[item.name]
        y = (rng.random(n) < expit(logit)).astype(float)
        columns.append(
            ColumnInfo(
                name=item.name,
                kind=DISCRETE,
                factor=FACTOR_ABILITY,
                n_categories=2,
                monotone=True,
                partner=item.name + "_rt" if item.name in time_names else None,
            )
        )
        matrix.append(y)

    data = Dataset(np.column_stack(matrix), columns)
    data.validate()
    return data, SimulationDraws(slowness_star=z1, ability_star=z2, shocks=shocks)
