from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

MAX_RESAMPLES = 100
TRACE_COLUMNS = ("generation", "best_f", "mean_f", "sigma")


@dataclass(eq=False)
class CmaEsState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0
    popsize: int = 0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        n = self.mean.shape[0]
        if n < 1:
            raise ValueError("dimension must be >= 1")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.popsize == 0:
            self.popsize = default_popsize(n)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def initial(cls, x0: Sequence[float], sigma0: float, popsize: Optional[int] = None) -> "CmaEsState":
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        n = x0.shape[0]
        return cls(
            mean=x0.copy(),
            sigma=float(sigma0),
            cov=np.eye(n),
            p_sigma=np.zeros(n),
            p_c=np.zeros(n),
            popsize=popsize or default_popsize(n),
        )


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_f: float
    mean_f: float
    sigma: float


@dataclass(eq=False)
class CmaEsResult:
    best_x: np.ndarray
    best_f: float
    state: CmaEsState
    history: list[GenerationRecord] = field(default_factory=list)
    evaluations: int = 0


def default_popsize(n: int) -> int:
    return 4 + int(math.floor(3.0 * math.log(n)))


class _Strategy:
    """Step-size and covariance learning rates of the (μ/μ_w, λ) strategy."""

    def __init__(self, n: int, popsize: int) -> None:
        self.n = n
        self.lam = popsize
        self.mu = popsize // 2
        w = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mu_eff = 1.0 / float(np.sum(self.weights**2))
        self.c_sigma = (self.mu_eff + 2.0) / (n + self.mu_eff + 5.0)
        self.d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((self.mu_eff - 1.0) / (n + 1.0)) - 1.0) + self.c_sigma
        self.c_c = (4.0 + self.mu_eff / n) / (n + 4.0 + 2.0 * self.mu_eff / n)
        self.c_1 = 2.0 / ((n + 1.3) ** 2 + self.mu_eff)
        self.c_mu = min(1.0 - self.c_1, 2.0 * (self.mu_eff - 2.0 + 1.0 / self.mu_eff) / ((n + 2.0) ** 2 + self.mu_eff))
        self.chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))


def _in_bounds(x: np.ndarray, lower: Optional[np.ndarray], upper: Optional[np.ndarray]) -> bool:
    if lower is not None and np.any(x < lower):
        return False
    if upper is not None and np.any(x > upper):
        return False
    return True


def ask(
    state: CmaEsState,
    rng: np.random.Generator,
    lower: Optional[np.ndarray] = None,
    upper: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a population; candidates outside the box are resampled, then clipped as a last resort.

    Returns (candidates, steps) with ``candidates = mean + sigma * steps``.
    """
    eigvals, basis = np.linalg.eigh(state.cov)
    scale = np.sqrt(np.maximum(eigvals, 1e-300))
    xs = np.zeros((state.popsize, state.dim))
    ys = np.zeros_like(xs)
    for k in range(state.popsize):
        for _ in range(MAX_RESAMPLES):
            y = basis @ (scale * rng.standard_normal(state.dim))
            x = state.mean + state.sigma * y
            if _in_bounds(x, lower, upper):
                break
        else:
            x = np.clip(x, lower if lower is not None else -np.inf, upper if upper is not None else np.inf)
            y = (x - state.mean) / state.sigma
        xs[k], ys[k] = x, y
    return xs, ys


def tell(state: CmaEsState, steps: np.ndarray, values: np.ndarray) -> CmaEsState:
    """Rank the population and return the adapted state. Non-finite values rank last."""
    n = state.dim
    strat = _Strategy(n, state.popsize)
    values = np.where(np.isfinite(values), values, np.inf)
    order = np.argsort(values, kind="stable")
    elite = steps[order[: strat.mu]]
    y_w = strat.weights @ elite
    mean = state.mean + state.sigma * y_w

    eigvals, basis = np.linalg.eigh(state.cov)
    inv_sqrt = basis @ np.diag(1.0 / np.sqrt(np.maximum(eigvals, 1e-300))) @ basis.T
    p_sigma = (1.0 - strat.c_sigma) * state.p_sigma + math.sqrt(strat.c_sigma * (2.0 - strat.c_sigma) * strat.mu_eff) * (inv_sqrt @ y_w)
    gen = state.generation + 1
    norm_ps = float(np.linalg.norm(p_sigma))
    h_sigma = norm_ps / math.sqrt(1.0 - (1.0 - strat.c_sigma) ** (2 * gen)) < (1.4 + 2.0 / (n + 1.0)) * strat.chi_n
    p_c = (1.0 - strat.c_c) * state.p_c + (math.sqrt(strat.c_c * (2.0 - strat.c_c) * strat.mu_eff) * y_w if h_sigma else 0.0)
    rank_mu = (strat.weights[:, None] * elite).T @ elite
    decay = 1.0 - strat.c_1 - strat.c_mu + (0.0 if h_sigma else strat.c_1 * strat.c_c * (2.0 - strat.c_c))
    cov = decay * state.cov + strat.c_1 * np.outer(p_c, p_c) + strat.c_mu * rank_mu
    cov = 0.5 * (cov + cov.T)
    sigma = state.sigma * math.exp((strat.c_sigma / strat.d_sigma) * (norm_ps / strat.chi_n - 1.0))
    return CmaEsState(mean=mean, sigma=sigma, cov=cov, p_sigma=p_sigma, p_c=np.asarray(p_c, dtype=float), generation=gen, popsize=state.popsize)


def cma_es_minimize(
    objective: Callable[[np.ndarray], float],
    x0: Sequence[float],
    sigma0: float,
    *,
    bounds: Optional[tuple[Sequence[float], Sequence[float]]] = None,
    budget: int = 100,
    popsize: Optional[int] = None,
    seed: int = 0,
    evaluate: Optional[Callable[[np.ndarray], Sequence[float]]] = None,
    target: Optional[float] = None,
    on_generation: Optional[Callable[[GenerationRecord], None]] = None,
) -> CmaEsResult:
    """Minimize ``objective`` for ``budget`` generations and return the best point ever evaluated.

    ``evaluate`` maps a whole population to its values (for parallel evaluation); by default the
    objective is called on each candidate in order.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1 generation, got {budget}")
    state = CmaEsState.initial(x0, sigma0, popsize)
    lower = upper = None
    if bounds is not None:
        lower = np.asarray(bounds[0], dtype=float).reshape(-1)
        upper = np.asarray(bounds[1], dtype=float).reshape(-1)
        if lower.shape != state.mean.shape or upper.shape != state.mean.shape or np.any(lower >= upper):
            raise ValueError("bounds must match x0 and satisfy lower < upper")
        if not _in_bounds(state.mean, lower, upper):
            raise ValueError(f"x0 {state.mean.tolist()} lies outside the bounds")
    rng = np.random.default_rng(seed)
    best_x = state.mean.copy()
    best_f = math.inf
    history: list[GenerationRecord] = []
    evaluations = 0
    for _ in range(budget):
        xs, ys = ask(state, rng, lower, upper)
        raw = evaluate(xs) if evaluate is not None else [objective(x) for x in xs]
        values = np.array([float(v) for v in raw])
        values = np.where(np.isfinite(values), values, np.inf)
        evaluations += len(xs)
        k = int(np.argmin(values))
        if values[k] < best_f:
            best_f = float(values[k])
            best_x = xs[k].copy()
        finite = values[np.isfinite(values)]
        record = GenerationRecord(
            generation=state.generation + 1,
            best_f=best_f,
            mean_f=float(finite.mean()) if finite.size else math.inf,
            sigma=state.sigma,
        )
        history.append(record)
        if on_generation is not None:
            on_generation(record)
        state = tell(state, ys, values)
        if target is not None and best_f <= target:
            break
        if state.sigma < 1e-20 or not np.all(np.isfinite(state.cov)):
            break
    return CmaEsResult(best_x=best_x, best_f=best_f, state=state, history=history, evaluations=evaluations)


def write_trace(path: Path, history: Sequence[GenerationRecord], config_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in history:
            writer.writerow([rec.generation, repr(rec.best_f), repr(rec.mean_f), repr(rec.sigma)])
