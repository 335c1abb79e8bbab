"""
Optimizers: Adam for the gradient paradigm, CMA-ES and GP-UCB for black-box tuning
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.stats import qmc

from app.core.errors import NumericFault, OptimizerError
from app.core.numcore import GradientMap, Parameter


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class ParamGroup:
    """Parameters sharing one learning rate"""

    name: str
    params: List[Parameter]
    lr: float


@dataclass
class AdamState:
    groups: List[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, groups: Dict[str, Tuple[Sequence[Parameter], float]]) -> "AdamState":
        return cls(groups=[ParamGroup(name, list(ps), lr) for name, (ps, lr) in groups.items()])

    def parameters(self) -> List[Parameter]:
        return [p for g in self.groups for p in g.params]


def adam_step(state: AdamState, grads: GradientMap) -> List[Parameter]:
    """
    Apply one bias-corrected Adam update

    Parameters without an entry in ``grads`` are left untouched.

    Returns:
        The parameters that were updated
    """
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericFault("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    updated = []
    for group in state.groups:
        for p in group.params:
            if p not in grads:
                continue
            g = np.asarray(grads[p], dtype=np.float64)
            key = id(p)
            m = state.m.get(key, np.zeros_like(g))
            v = state.v.get(key, np.zeros_like(g))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.m[key], state.v[key] = m, v
            if group.lr == 0.0:
                continue
            delta = -group.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            p.assign(p.data + delta)
            updated.append(p)
    return updated


# ---------------------------------------------------------------------------
# CMA-ES
# ---------------------------------------------------------------------------

EIGEN_FLOOR = 1e-12


@dataclass
class CmaState:
    """Mean, step size, covariance and evolution paths of one CMA-ES run"""

    n: int
    mean: np.ndarray
    sigma: float
    lam: int
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    C: np.ndarray
    pc: np.ndarray
    ps: np.ndarray
    B: np.ndarray
    D: np.ndarray
    generation: int = 0
    counteval: int = 0

    @classmethod
    def create(cls, x0: Sequence[float], sigma: float, popsize: Optional[int] = None) -> "CmaState":
        mean = np.asarray(x0, dtype=np.float64).copy()
        n = mean.size
        if n < 1:
            raise OptimizerError("CMA-ES needs at least one dimension")
        if sigma <= 0:
            raise OptimizerError("CMA-ES sigma must be positive")
        lam = popsize or 4 + int(3 * math.log(n))
        mu = lam // 2
        raw = math.log(lam / 2 + 0.5) - np.log(np.arange(1, mu + 1))
        weights = raw / raw.sum()
        mueff = weights.sum() ** 2 / (weights ** 2).sum()
        cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        cs = (mueff + 2) / (n + mueff + 5)
        c1 = 2 / ((n + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        damps = 2 * mueff / lam + 0.3 + cs
        return cls(
            n=n, mean=mean, sigma=float(sigma), lam=lam, mu=mu, weights=weights,
            mueff=mueff, cc=cc, cs=cs, c1=c1, cmu=cmu, damps=damps,
            C=np.eye(n), pc=np.zeros(n), ps=np.zeros(n), B=np.eye(n), D=np.ones(n),
        )


def _update_eigensystem(state: CmaState) -> None:
    C = (state.C + state.C.T) / 2
    eigvals, eigvecs = np.linalg.eigh(C)
    if eigvals.min() < EIGEN_FLOOR:
        eigvals = np.maximum(eigvals, EIGEN_FLOOR)
        C = (eigvecs * eigvals) @ eigvecs.T
    state.C = C
    state.B = eigvecs
    state.D = np.sqrt(eigvals)


def cmaes_ask(state: CmaState, rng: np.random.Generator) -> np.ndarray:
    """Sample lambda candidates from m + sigma * Normal(0, C), one per row"""
    _update_eigensystem(state)
    z = rng.standard_normal((state.lam, state.n))
    y = (z * state.D) @ state.B.T
    return state.mean + state.sigma * y


def cmaes_tell(
    state: CmaState,
    candidates: np.ndarray,
    fitness: Sequence[float],
    minimize: bool = True,
) -> CmaState:
    """Update mean, evolution paths, covariance and step size from one generation"""
    candidates = np.asarray(candidates, dtype=np.float64)
    values = np.asarray(fitness, dtype=np.float64)
    if values.shape[0] != candidates.shape[0]:
        raise OptimizerError(f"{values.shape[0]} fitness values for {candidates.shape[0]} candidates")
    if candidates.shape[0] < state.mu:
        raise OptimizerError(f"need at least {state.mu} candidates, got {candidates.shape[0]}")
    if not np.all(np.isfinite(values)):
        raise OptimizerError("non-finite fitness value")
    if not minimize:
        values = -values

    n = state.n
    state.counteval += len(values)
    state.generation += 1
    order = np.argsort(values, kind="stable")
    arx = candidates[order]
    xold = state.mean

    state.mean = state.weights @ arx[: state.mu]

    # cumulation: evolution paths
    y = state.mean - xold
    invsqrt = (state.B / state.D) @ state.B.T
    z = invsqrt @ y
    csn = math.sqrt(state.cs * (2 - state.cs) * state.mueff) / state.sigma
    state.ps = (1 - state.cs) * state.ps + csn * z
    ccn = math.sqrt(state.cc * (2 - state.cc) * state.mueff) / state.sigma
    ps_sq = float(state.ps @ state.ps)
    hsig = (
        ps_sq / n / (1 - (1 - state.cs) ** (2 * state.counteval / state.lam))
        < 2 + 4.0 / (n + 1)
    )
    state.pc = (1 - state.cc) * state.pc + ccn * hsig * y

    # covariance: rank-one plus rank-mu
    c1a = state.c1 * (1 - (1 - hsig ** 2) * state.cc * (2 - state.cc))
    dx = (arx[: state.mu] - xold) / state.sigma
    state.C = (
        (1 - c1a - state.cmu * state.weights.sum()) * state.C
        + state.c1 * np.outer(state.pc, state.pc)
        + state.cmu * (dx.T * state.weights) @ dx
    )

    # step size
    cn = state.cs / state.damps
    state.sigma *= math.exp(min(1.0, cn * (ps_sq / n - 1) / 2))
    if not (state.sigma > 0 and math.isfinite(state.sigma)):
        raise NumericFault(f"CMA-ES step size degenerated to {state.sigma}")
    _update_eigensystem(state)
    return state


class CmaesOptimizer:
    """Ask/tell wrapper tracking the best candidate seen"""

    def __init__(self, x0: Sequence[float], sigma: float, seed: int = 0, popsize: Optional[int] = None):
        self.state = CmaState.create(x0, sigma, popsize)
        self.rng = np.random.default_rng(seed)
        self.best_x: Optional[np.ndarray] = None
        self.best_f = math.inf

    def ask(self) -> np.ndarray:
        return cmaes_ask(self.state, self.rng)

    def tell(self, candidates: np.ndarray, fitness: Sequence[float]) -> None:
        i = int(np.argmin(fitness))
        if fitness[i] < self.best_f:
            self.best_f = float(fitness[i])
            self.best_x = np.array(candidates[i])
        cmaes_tell(self.state, candidates, fitness, minimize=True)

    def minimize(self, fn: Callable[[np.ndarray], float], max_evals: int, ftarget: float = -math.inf):
        """Run until the evaluation budget or target is reached; returns (x, f)"""
        while self.state.counteval + self.state.lam <= max_evals:
            xs = self.ask()
            self.tell(xs, [fn(x) for x in xs])
            if self.best_f <= ftarget:
                break
        return self.best_x, self.best_f


# ---------------------------------------------------------------------------
# Gaussian-process UCB
# ---------------------------------------------------------------------------

GRID_LOG2 = 12  # 4096 quasi-random candidates


@dataclass
class GpState:
    """Observations and fixed RBF kernel hyper-parameters over a box"""

    lower: np.ndarray
    upper: np.ndarray
    length_scale: float = 1.0
    signal_var: float = 1.0
    noise_var: float = 1e-4
    kappa: float = 2.0
    X: List[np.ndarray] = field(default_factory=list)
    y: List[float] = field(default_factory=list)

    @classmethod
    def create(cls, lower: Sequence[float], upper: Sequence[float], **kwargs) -> "GpState":
        lo = np.asarray(lower, dtype=np.float64)
        hi = np.asarray(upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1 or np.any(hi <= lo):
            raise OptimizerError(f"malformed bounds {lower} / {upper}")
        return cls(lower=lo, upper=hi, **kwargs)

    @property
    def dim(self) -> int:
        return self.lower.size

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.lower) / (self.upper - self.lower)

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(u) * (self.upper - self.lower)


def bo_observe(state: GpState, x: Sequence[float], value: float) -> None:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != state.lower.shape:
        raise OptimizerError(f"observation of shape {x.shape} in a {state.dim}-dim box")
    if np.any(x < state.lower - 1e-9) or np.any(x > state.upper + 1e-9):
        raise OptimizerError("observation outside the search box")
    if not math.isfinite(value):
        raise OptimizerError("non-finite observation value")
    state.X.append(np.clip(x, state.lower, state.upper))
    state.y.append(float(value))


def _rbf(state: GpState, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1)
    return state.signal_var * np.exp(-0.5 * sq / state.length_scale ** 2)


def gp_posterior(state: GpState, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posterior mean and standard deviation at points given in box coordinates

    Observation values are standardized before fitting.
    """
    Xq = state.to_unit(np.atleast_2d(points))
    if not state.X:
        return np.zeros(len(Xq)), np.full(len(Xq), math.sqrt(state.signal_var))
    X = state.to_unit(np.stack(state.X))
    y = np.asarray(state.y)
    std = y.std()
    y_std = (y - y.mean()) / (std if std > 1e-12 else 1.0)

    K = _rbf(state, X, X) + state.noise_var * np.eye(len(X))
    try:
        factor = cho_factor(K, lower=True)
    except LinAlgError as e:
        raise NumericFault("GP kernel matrix is singular after jitter") from e
    Ks = _rbf(state, X, Xq)
    mu = Ks.T @ cho_solve(factor, y_std)
    v = solve_triangular(factor[0], Ks, lower=True)
    var = np.clip(state.signal_var - (v * v).sum(axis=0), 0.0, None)
    return mu, np.sqrt(var)


def bo_suggest(state: GpState, rng: np.random.Generator) -> np.ndarray:
    """Next query point: argmax of mean + kappa * std over a Sobol grid"""
    if not state.X:
        return rng.uniform(state.lower, state.upper)
    sobol = qmc.Sobol(d=state.dim, scramble=True, seed=rng)
    grid = state.from_unit(sobol.random_base2(m=GRID_LOG2))
    mu, sd = gp_posterior(state, grid)
    ucb = mu + state.kappa * sd
    return np.clip(grid[int(np.argmax(ucb))], state.lower, state.upper)
