"""No-U-Turn sampler with windowed warmup adaptation and a multi-chain driver."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .config import (
    CHAINS,
    INIT_RADIUS,
    MAX_DELTA_H,
    MAX_TREEDEPTH,
    SAMPLES,
    SEED,
    TARGET_ACCEPT,
    THREADS,
    WARMUP,
)
from .errors import AdaptationFailed, EmptyDraws
from .inference import (
    ModelSpec,
    constrained_labels,
    constrained_vector,
    log_posterior_and_grad,
)
from .panel import DesignMatrix

logger = logging.getLogger(__name__)

LogpGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]

STAT_NAMES = ("accept_stat", "divergent", "energy", "n_leapfrog", "step_size", "treedepth")
_INIT_ATTEMPTS = 100
_WARM_WARMUP_MIN = 150


class SamplerConfig(BaseModel):
    n_chains: int = Field(CHAINS, ge=1)
    n_warmup: int = Field(WARMUP, ge=1)
    n_samples: int = Field(SAMPLES, ge=1)
    target_accept: float = Field(TARGET_ACCEPT, gt=0, lt=1)
    max_treedepth: int = Field(MAX_TREEDEPTH, ge=1)
    seed: int = SEED
    init_radius: float = Field(INIT_RADIUS, gt=0)
    threads: int = Field(THREADS, ge=1)


@dataclass
class PosteriorDraws:
    """Post-warmup draws in constrained space, shape (chain, iteration, parameter)."""

    draws: np.ndarray
    sampler_stats: Dict[str, np.ndarray]
    column_labels: List[str]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.column_labels):
            raise ValueError(
                f"draws of shape {self.draws.shape} do not match {len(self.column_labels)} labels"
            )

    @property
    def n_chains(self) -> int:
        return int(self.draws.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.draws.shape[1])

    def column(self, label: str) -> np.ndarray:
        """(chain, iteration) draws of one parameter."""
        try:
            return self.draws[:, :, self.column_labels.index(label)]
        except ValueError:
            raise KeyError(f"no parameter {label!r} in draws") from None

    def matrix(self) -> np.ndarray:
        """Draws pooled over chains, shape (chain * iteration, parameter)."""
        if self.draws.size == 0:
            raise EmptyDraws("no draws")
        return self.draws.reshape(-1, self.draws.shape[2])

    @property
    def divergences(self) -> int:
        div = self.sampler_stats.get("divergent")
        return int(np.sum(div)) if div is not None else 0

    def chains_permuted(self, order) -> "PosteriorDraws":
        order = list(order)
        return PosteriorDraws(
            self.draws[order], {k: v[order] for k, v in self.sampler_stats.items()},
            list(self.column_labels), dict(self.metadata),
        )


# -------------------- NUTS transition --------------------
class Point(NamedTuple):
    q: np.ndarray
    p: np.ndarray
    lp: float
    grad: np.ndarray


@dataclass
class _Span:
    """Momentum summary of a trajectory segment, in time order (left = earlier)."""

    rho: np.ndarray
    p_left: np.ndarray
    p_right: np.ndarray
    ps_left: np.ndarray  # inv_mass * p at the left end
    ps_right: np.ndarray


@dataclass
class _TreeStats:
    n_leapfrog: int = 0
    sum_metro_prob: float = 0.0
    divergent: bool = False


def _no_u_turn(ps_left: np.ndarray, ps_right: np.ndarray, rho: np.ndarray) -> bool:
    return float(ps_right @ rho) > 0 and float(ps_left @ rho) > 0


def _merged_ok(left: _Span, right: _Span) -> bool:
    """Generalized U-turn test on a merged segment and across its seam."""
    rho = left.rho + right.rho
    ok = _no_u_turn(left.ps_left, right.ps_right, rho)
    ok = ok and _no_u_turn(left.ps_left, right.ps_left, left.rho + right.p_left)
    ok = ok and _no_u_turn(left.ps_right, right.ps_right, right.rho + left.p_right)
    return ok


def _merge(left: _Span, right: _Span) -> _Span:
    return _Span(left.rho + right.rho, left.p_left, right.p_right, left.ps_left, right.ps_right)


def _leapfrog(point: Point, eps: float, inv_mass: np.ndarray, logp_grad: LogpGrad) -> Point:
    p = point.p + 0.5 * eps * point.grad
    q = point.q + eps * inv_mass * p
    lp, grad = logp_grad(q)
    if not math.isfinite(lp) or not np.all(np.isfinite(grad)):
        return Point(q, p, -math.inf, np.zeros_like(q))
    p = p + 0.5 * eps * grad
    return Point(q, p, lp, grad)


def _hamiltonian(point: Point, inv_mass: np.ndarray) -> float:
    if not math.isfinite(point.lp):
        return math.inf
    return -point.lp + 0.5 * float(np.sum(inv_mass * point.p ** 2))


def _build_tree(
    depth: int,
    start: Point,
    direction: int,
    eps: float,
    inv_mass: np.ndarray,
    logp_grad: LogpGrad,
    H0: float,
    rng: np.random.Generator,
    stats: _TreeStats,
    max_delta_h: float,
):
    """Returns (valid, far_end, proposal, log_sum_weight, span)."""
    if depth == 0:
        nxt = _leapfrog(start, direction * eps, inv_mass, logp_grad)
        stats.n_leapfrog += 1
        H = _hamiltonian(nxt, inv_mass)
        if math.isnan(H):
            H = math.inf
        if H - H0 > max_delta_h:
            stats.divergent = True
        stats.sum_metro_prob += 1.0 if H0 - H > 0 else math.exp(H0 - H)
        ps = inv_mass * nxt.p
        span = _Span(nxt.p.copy(), nxt.p, nxt.p, ps, ps)
        return not stats.divergent, nxt, nxt, H0 - H, span

    ok, mid, prop_init, lsw_init, span_init = _build_tree(
        depth - 1, start, direction, eps, inv_mass, logp_grad, H0, rng, stats, max_delta_h
    )
    if not ok:
        return False, mid, prop_init, lsw_init, span_init
    ok, end, prop_final, lsw_final, span_final = _build_tree(
        depth - 1, mid, direction, eps, inv_mass, logp_grad, H0, rng, stats, max_delta_h
    )
    if not ok:
        return False, end, prop_final, lsw_final, span_final

    lsw = np.logaddexp(lsw_init, lsw_final)
    proposal = prop_init
    if rng.uniform() < math.exp(lsw_final - lsw):
        proposal = prop_final
    left, right = (span_init, span_final) if direction > 0 else (span_final, span_init)
    return _merged_ok(left, right), end, proposal, float(lsw), _merge(left, right)


def nuts_step(
    state: Point,
    logp_grad: LogpGrad,
    step_size: float,
    inv_mass: np.ndarray,
    rng: np.random.Generator,
    max_treedepth: int = MAX_TREEDEPTH,
    max_delta_h: float = MAX_DELTA_H,
) -> Tuple[Point, Dict[str, float]]:
    """One multinomial NUTS transition; divergences are recorded, not raised."""
    p0 = rng.normal(size=state.q.shape) / np.sqrt(inv_mass)
    current = Point(state.q, p0, state.lp, state.grad)
    H0 = _hamiltonian(current, inv_mass)
    ps0 = inv_mass * p0
    trajectory = _Span(p0.copy(), p0, p0, ps0, ps0)
    left_end = right_end = current
    sample = current
    log_sum_weight = 0.0
    stats = _TreeStats()
    depth = 0

    while depth < max_treedepth:
        direction = 1 if rng.uniform() > 0.5 else -1
        start = right_end if direction > 0 else left_end
        ok, end, proposal, lsw_sub, span = _build_tree(
            depth, start, direction, step_size, inv_mass, logp_grad, H0, rng, stats, max_delta_h
        )
        if direction > 0:
            right_end = end
        else:
            left_end = end
        if not ok:
            break
        depth += 1
        if lsw_sub > log_sum_weight or rng.uniform() < math.exp(lsw_sub - log_sum_weight):
            sample = proposal
        log_sum_weight = float(np.logaddexp(log_sum_weight, lsw_sub))
        left, right = (trajectory, span) if direction > 0 else (span, trajectory)
        persist = _merged_ok(left, right)
        trajectory = _merge(left, right)
        if not persist:
            break

    accept = stats.sum_metro_prob / max(stats.n_leapfrog, 1)
    info = {
        "accept_stat": accept,
        "divergent": float(stats.divergent),
        "energy": _hamiltonian(Point(sample.q, sample.p, sample.lp, sample.grad), inv_mass),
        "n_leapfrog": float(stats.n_leapfrog),
        "step_size": float(step_size),
        "treedepth": float(depth),
    }
    return Point(sample.q, sample.p, sample.lp, sample.grad), info


# -------------------- warmup adaptation --------------------
class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, step_size: float, target: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept = min(1.0, accept_stat) if math.isfinite(accept_stat) else 0.0
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.x_bar)


class WelfordVariance:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def sample_variance(self) -> np.ndarray:
        return self.m2 / (self.n - 1)


def warmup_schedule(n_warmup: int) -> Tuple[int, int, List[int]]:
    """(init_buffer, term_buffer, window end iterations) of the windowed warmup."""
    init_buffer, term_buffer, base_window = 75, 50, 25
    if n_warmup < init_buffer + term_buffer + base_window:
        logger.warning(
            "Warmup of %d iterations is too short for the default windows; using 15%%/75%%/10%% buffers",
            n_warmup,
        )
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - (init_buffer + term_buffer)
    ends: List[int] = []
    adapt_end = n_warmup - term_buffer
    start, size = init_buffer, base_window
    while start < adapt_end and size > 0:
        end = start + size
        next_end = end + 2 * size
        if next_end > adapt_end:
            end = adapt_end
        ends.append(end)
        start, size = end, 2 * size
    return init_buffer, term_buffer, ends


class WindowedAdapter:
    """Step size by dual averaging, diagonal metric from windowed draw variances."""

    def __init__(self, dim: int, n_warmup: int, target_accept: float, step_size: float):
        self.dim = dim
        self.init_buffer, self.term_buffer, self.window_ends = warmup_schedule(n_warmup)
        self.dual = DualAveraging(step_size, target_accept)
        self.variance = WelfordVariance(dim)
        self.iteration = 0
        self.inv_mass = np.ones(dim)

    def learn(self, q: np.ndarray, accept_stat: float) -> Tuple[float, bool]:
        """Feed one warmup iteration; returns (step size, metric updated)."""
        step = self.dual.update(accept_stat)
        if not math.isfinite(step) or step <= 0:
            raise AdaptationFailed(f"step size became {step} at warmup iteration {self.iteration}")
        in_window = bool(self.window_ends) and self.init_buffer <= self.iteration < self.window_ends[-1]
        updated = False
        if in_window:
            self.variance.add(q)
            if self.iteration + 1 in self.window_ends:
                self._update_metric()
                updated = True
        self.iteration += 1
        return step, updated

    def _update_metric(self) -> None:
        n = self.variance.n
        if n < 3:
            logger.debug("Metric window of %d draws is too short; keeping the current metric", n)
            self.variance = WelfordVariance(self.dim)
            return
        var = self.variance.sample_variance()
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            bad = np.flatnonzero(~(var > 0))
            raise AdaptationFailed(f"zero or non-finite warmup variance in coordinates {bad[:5].tolist()}")
        self.inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
        logger.debug("Metric window of %d draws closed at iteration %d", n, self.iteration + 1)
        self.variance = WelfordVariance(self.dim)

    @property
    def final_step_size(self) -> float:
        step = self.dual.final_step_size
        if not math.isfinite(step) or step <= 0:
            raise AdaptationFailed(f"final step size is {step}")
        return step


@dataclass
class WarmupTrace:
    draws: np.ndarray  # (n_warmup, dim), unconstrained
    accept_stats: np.ndarray  # (n_warmup,)
    initial_step_size: float = 1.0


def adapt(trace: WarmupTrace, target_accept: float = TARGET_ACCEPT) -> Tuple[float, np.ndarray]:
    """Replay a recorded warmup through the adaptation schedule."""
    draws = np.asarray(trace.draws, dtype=float)
    adapter = WindowedAdapter(draws.shape[1], draws.shape[0], target_accept, trace.initial_step_size)
    for q, a in zip(draws, trace.accept_stats):
        step, updated = adapter.learn(q, float(a))
        if updated:
            adapter.dual.restart(step)
    return adapter.final_step_size, adapter.inv_mass


def find_reasonable_step_size(
    state: Point, logp_grad: LogpGrad, step_size: float, inv_mass: np.ndarray, rng: np.random.Generator,
) -> float:
    """Double or halve the step until one leapfrog step crosses acceptance 0.8."""
    log_target = math.log(0.8)

    def delta_h(eps: float) -> float:
        p = rng.normal(size=state.q.shape) / np.sqrt(inv_mass)
        here = Point(state.q, p, state.lp, state.grad)
        there = _leapfrog(here, eps, inv_mass, logp_grad)
        h = _hamiltonian(there, inv_mass)
        return _hamiltonian(here, inv_mass) - h if math.isfinite(h) else -math.inf

    eps = step_size
    direction = 1 if delta_h(eps) > log_target else -1
    while True:
        dh = delta_h(eps)
        if direction == 1 and not dh > log_target:
            break
        if direction == -1 and not dh < log_target:
            break
        eps = eps * 2.0 if direction == 1 else eps / 2.0
        if eps > 1e7:
            raise AdaptationFailed("posterior is improper: step size search diverged upward")
        if eps == 0:
            raise AdaptationFailed("no acceptable step size: search reached zero")
    return eps


# -------------------- chains --------------------
def chain_rng(seed: int, chain: int, iteration: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream for one (seed, chain, iteration) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chain, iteration, stream])))


@dataclass
class WarmStart:
    step_size: List[float]
    inv_mass: List[List[float]]

    @classmethod
    def from_draws(cls, draws: PosteriorDraws) -> Optional["WarmStart"]:
        meta = draws.metadata
        if "step_size" not in meta or "inv_mass" not in meta:
            return None
        return cls(list(meta["step_size"]), [list(m) for m in meta["inv_mass"]])

    def fits(self, dim: int) -> bool:
        return bool(self.inv_mass) and all(len(m) == dim for m in self.inv_mass)


def warm_warmup(n_warmup: int) -> int:
    """Warmup length for a chain that starts from an earlier fit's step size and metric."""
    return min(n_warmup, max(_WARM_WARMUP_MIN, n_warmup // 4))


def _initial_point(logp_grad: LogpGrad, dim: int, config: SamplerConfig, chain: int) -> Point:
    rng = chain_rng(config.seed, chain, 0)
    for _ in range(_INIT_ATTEMPTS):
        q = rng.uniform(-config.init_radius, config.init_radius, size=dim)
        lp, grad = logp_grad(q)
        if math.isfinite(lp) and np.all(np.isfinite(grad)):
            return Point(q, np.zeros(dim), lp, grad)
    raise AdaptationFailed(f"chain {chain}: no finite initial point after {_INIT_ATTEMPTS} attempts")


def run_chain(
    logp_grad: LogpGrad,
    dim: int,
    config: SamplerConfig,
    chain: int,
    warm: Optional[Tuple[float, np.ndarray]] = None,
    init: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Dict[str, np.ndarray], float, np.ndarray]:
    """Warmup plus sampling for one chain; returns unconstrained draws and stats."""
    if init is not None:
        lp, grad = logp_grad(np.asarray(init, dtype=float))
        state = Point(np.asarray(init, dtype=float), np.zeros(dim), lp, grad)
    else:
        state = _initial_point(logp_grad, dim, config, chain)
    inv_mass = np.ones(dim)
    step = 1.0
    if warm is not None:
        step, warm_mass = warm
        if warm_mass.shape == (dim,):
            inv_mass = warm_mass.copy()
    step = find_reasonable_step_size(state, logp_grad, step, inv_mass, chain_rng(config.seed, chain, 0, stream=1))
    adapter = WindowedAdapter(dim, config.n_warmup, config.target_accept, step)
    adapter.inv_mass = inv_mass

    for it in range(config.n_warmup):
        rng = chain_rng(config.seed, chain, it + 1)
        state, info = nuts_step(state, logp_grad, step, adapter.inv_mass, rng, config.max_treedepth)
        step, updated = adapter.learn(state.q, info["accept_stat"])
        if updated:
            step = find_reasonable_step_size(state, logp_grad, step, adapter.inv_mass, rng)
            adapter.dual.restart(step)
    step = adapter.final_step_size
    inv_mass = adapter.inv_mass
    logger.info("Chain %d adapted: step size %.4g", chain, step)

    draws = np.empty((config.n_samples, dim))
    stats = {name: np.empty(config.n_samples) for name in STAT_NAMES}
    for it in range(config.n_samples):
        rng = chain_rng(config.seed, chain, config.n_warmup + it + 1)
        state, info = nuts_step(state, logp_grad, step, inv_mass, rng, config.max_treedepth)
        draws[it] = state.q
        for name in STAT_NAMES:
            stats[name][it] = info[name]
    n_div = int(stats["divergent"].sum())
    if n_div:
        logger.warning("Chain %d: %d divergent transitions after warmup", chain, n_div)
    return draws, stats, step, inv_mass


def run_chains(
    design: DesignMatrix,
    spec: ModelSpec,
    config: Optional[SamplerConfig] = None,
    warm_start: Optional[WarmStart] = None,
) -> PosteriorDraws:
    """Sample the model posterior; chains are independent given (seed, chain id)."""
    config = config or SamplerConfig()

    def logp_grad(q: np.ndarray) -> Tuple[float, np.ndarray]:
        return log_posterior_and_grad(q, design, spec)

    def one(chain: int):
        warm = None
        if warm_start is not None and chain < len(warm_start.step_size):
            warm = (warm_start.step_size[chain], np.asarray(warm_start.inv_mass[chain], dtype=float))
        return run_chain(logp_grad, spec.dim, config, chain, warm=warm)

    workers = min(config.threads, config.n_chains)
    logger.info("Sampling %s: %d chains x (%d warmup + %d draws), %d parameters",
                spec.variant.value, config.n_chains, config.n_warmup, config.n_samples, spec.dim)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(config.n_chains)))
    else:
        results = [one(c) for c in range(config.n_chains)]

    labels = constrained_labels(spec, design)
    constrained = np.stack([
        np.vstack([constrained_vector(q, spec) for q in draws]) for draws, _, _, _ in results
    ])
    stats = {name: np.stack([r[1][name] for r in results]) for name in STAT_NAMES}
    metadata = {
        "variant": spec.variant.value,
        "spec": spec.model_dump(mode="json"),
        "sampler": config.model_dump(mode="json"),
        "step_size": [float(r[2]) for r in results],
        "inv_mass": [r[3].tolist() for r in results],
        "countries": list(design.countries),
        "exposure_labels": list(design.exposure_labels),
        "covariate_labels": list(design.covariate_labels),
        "centers": dict(design.centers),
        "retained_bins": list(design.retained_bins),
        "reference_bins": list(design.reference_bins),
    }
    out = PosteriorDraws(constrained, stats, labels, metadata)
    logger.info("Sampling done: %d divergences in %d draws", out.divergences, out.n_chains * out.n_samples)
    return out


def run_sampler(
    logp_grad: LogpGrad,
    dim: int,
    config: Optional[SamplerConfig] = None,
    labels: Optional[List[str]] = None,
) -> PosteriorDraws:
    """Sample an arbitrary differentiable log density; draws stay unconstrained."""
    config = config or SamplerConfig()
    results = [run_chain(logp_grad, dim, config, c) for c in range(config.n_chains)]
    labels = labels or [f"x[{i}]" for i in range(dim)]
    stats = {name: np.stack([r[1][name] for r in results]) for name in STAT_NAMES}
    return PosteriorDraws(
        np.stack([r[0] for r in results]), stats, labels,
        {"step_size": [float(r[2]) for r in results], "inv_mass": [r[3].tolist() for r in results]},
    )
