"""
Renyi-DP accounting for user-level DP in cross-silo FL.

All quantities are in nats. Curves are tabulated over a shared order grid;
the grid-free closed forms (Gaussian mechanism composed T times) are refined
with a bounded scalar search around the best grid order.
"""
import math
import logging
from functools import lru_cache
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize, special

from .errors import (
    ConvergenceError,
    DomainError,
    EmptyConvertibleGridError,
    GridMismatchError,
)
from .grid_parser import default_order_grid

log = logging.getLogger('Accountant')

DEFAULT_ORDERS: Tuple[float, ...] = tuple(default_order_grid())
# log(float max); beyond this exp() overflows
LOG_FLOAT_MAX = math.log(np.finfo(float).max)
SEARCH_TOLERANCE = 1e-8
SEARCH_MAX_ITER = 2000
# group conversion keeps converted orders up to this value
GROUP_ORDER_SPAN = 64.0


@dataclass(frozen=True)
class RdpCurve:
    orders: Tuple[float, ...]
    rhos: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'orders', tuple(float(a) for a in self.orders))
        object.__setattr__(self, 'rhos', tuple(float(r) for r in self.rhos))
        if not self.orders:
            raise DomainError('orders', self.orders, 'a non-empty order grid')
        if len(self.orders) != len(self.rhos):
            raise DomainError('rhos', len(self.rhos), f'{len(self.orders)} values (one per order)')
        if min(self.orders) <= 1:
            raise DomainError('alpha', min(self.orders), 'every order > 1')
        if any(np.isnan(r) or r < 0 for r in self.rhos):
            raise DomainError('rho', min(self.rhos), 'every rho >= 0')

    def __len__(self):
        return len(self.orders)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.orders), np.asarray(self.rhos)

    def is_monotone(self) -> bool:
        """rho non-decreasing in alpha on the grid."""
        order = np.argsort(self.orders)
        rhos = np.asarray(self.rhos)[order]
        return bool(np.all(np.diff(rhos) >= -1e-12 * np.maximum(1.0, np.abs(rhos[1:]))))


@dataclass(frozen=True)
class DpBudget:
    epsilon: float
    delta: float
    order: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise DomainError('delta', self.delta, 'a value in (0, 1)')
        if math.isnan(self.epsilon):
            raise DomainError('epsilon', self.epsilon, 'a number')


@dataclass(frozen=True)
class GroupDpBudget:
    k: int
    epsilon: float
    delta: float
    order: Optional[float] = None
    # group size asked for when k was rounded down to a power of two
    requested_k: Optional[int] = None
    lower_bound: bool = False
    overflow: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise DomainError('k', self.k, 'k >= 1')


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float
    q: float = 1.0
    steps: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError('sigma', self.sigma, 'sigma > 0')
        if not 0 <= self.q <= 1:
            raise DomainError('q', self.q, 'a sampling rate in [0, 1]')
        if self.steps < 0:
            raise DomainError('steps', self.steps, 'a non-negative step count')


def _check_alpha_sigma(alpha: float, sigma: float):
    if not alpha > 1:
        raise DomainError('alpha', alpha, 'alpha > 1')
    if not sigma > 0:
        raise DomainError('sigma', sigma, 'sigma > 0')


def _check_delta(delta: float):
    if not 0 < delta < 1:
        raise DomainError('delta', delta, 'a value in (0, 1)')


def _grid(orders: Optional[Iterable[float]]) -> Tuple[float, ...]:
    return DEFAULT_ORDERS if orders is None else tuple(float(a) for a in orders)


# Mechanisms
############################################

def gaussian_rdp(alpha: float, sigma: float) -> float:
    _check_alpha_sigma(alpha, sigma)
    return alpha / (2 * sigma ** 2)


def subsampled_gaussian_rdp(alpha: int, sigma: float, q: float) -> float:
    """
    Integer-order RDP of the Poisson sub-sampled Gaussian mechanism:
        1/(alpha-1) * log sum_j C(alpha,j) (1-q)^(alpha-j) q^j exp(j(j-1)/(2 sigma^2))
    evaluated in log space.
    """
    if float(alpha) != int(alpha) or alpha < 2:
        raise DomainError('alpha', alpha, 'an integer order >= 2')
    if not 0 <= q <= 1:
        raise DomainError('q', q, 'a sampling rate in [0, 1]')
    _check_alpha_sigma(alpha, sigma)
    return _subsampled_gaussian_rdp(int(alpha), float(sigma), float(q))


@lru_cache(maxsize=65536)
def _subsampled_gaussian_rdp(alpha: int, sigma: float, q: float) -> float:
    if q == 0:
        return 0.0
    if q == 1:
        return alpha / (2 * sigma ** 2)

    j = np.arange(alpha + 1, dtype=float)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(j + 1) - special.gammaln(alpha - j + 1)
    log_terms = (
        log_binom
        + (alpha - j) * math.log1p(-q)
        + j * math.log(q)
        + j * (j - 1) / (2 * sigma ** 2)
    )
    rho = float(special.logsumexp(log_terms)) / (alpha - 1)
    return max(rho, 0.0)


def gaussian_curve(sigma: float, steps: int = 1, orders: Optional[Iterable[float]] = None) -> RdpCurve:
    grid = _grid(orders)
    return RdpCurve(grid, tuple(steps * gaussian_rdp(a, sigma) for a in grid))


def subsampled_gaussian_curve(
        sigma: float,
        q: float,
        steps: int = 1,
        orders: Optional[Iterable[float]] = None
    ) -> RdpCurve:
    """
    Non-integer orders take the value at ceil(alpha), an upper bound
    because rho is non-decreasing in alpha.
    """
    NoiseConfig(sigma=sigma, q=q, steps=steps)
    grid = _grid(orders)
    rhos = []
    for a in grid:
        order = max(2, int(math.ceil(a - 1e-12)))
        rhos.append(steps * _subsampled_gaussian_rdp(order, float(sigma), float(q)))
    return RdpCurve(grid, tuple(rhos))


def curve_for(noise: NoiseConfig, orders: Optional[Iterable[float]] = None) -> RdpCurve:
    if noise.q >= 1:
        return gaussian_curve(noise.sigma, noise.steps, orders)
    return subsampled_gaussian_curve(noise.sigma, noise.q, noise.steps, orders)


# Composition and conversion
############################################

def compose_rdp(curves: Sequence[RdpCurve]) -> RdpCurve:
    if not curves:
        raise DomainError('curves', curves, 'at least one curve')
    base = curves[0]
    total = np.asarray(base.rhos, dtype=float).copy()
    for curve in curves[1:]:
        if curve.orders != base.orders:
            raise GridMismatchError(base.orders, curve.orders)
        total += np.asarray(curve.rhos, dtype=float)
    return RdpCurve(base.orders, tuple(total))


def max_rdp(curves: Sequence[RdpCurve]) -> RdpCurve:
    """Parallel composition over disjoint datasets: pointwise maximum."""
    if not curves:
        raise DomainError('curves', curves, 'at least one curve')
    base = curves[0]
    for curve in curves[1:]:
        if curve.orders != base.orders:
            raise GridMismatchError(base.orders, curve.orders)
    stacked = np.vstack([np.asarray(c.rhos) for c in curves])
    return RdpCurve(base.orders, tuple(stacked.max(axis=0)))


def _epsilons(orders: np.ndarray, rhos: np.ndarray, log_delta: float) -> np.ndarray:
    with np.errstate(over='ignore', invalid='ignore'):
        return rhos + np.log((orders - 1) / orders) - (log_delta + np.log(orders)) / (orders - 1)


def _rdp_to_dp_log(curve: RdpCurve, log_delta: float) -> Tuple[float, float]:
    orders, rhos = curve.arrays()
    eps = _epsilons(orders, rhos, log_delta)
    eps = np.where(np.isnan(eps), np.inf, eps)
    idx = int(np.argmin(eps))
    return float(eps[idx]), float(orders[idx])


def rdp_to_dp(curve: RdpCurve, delta: float) -> Tuple[float, float]:
    """
    Smallest epsilon over the grid for the RDP -> (eps, delta) conversion
        eps(a) = rho(a) + log((a-1)/a) - (log delta + log a)/(a-1)
    Returns (epsilon, best order). The raw value is returned even when negative.
    """
    _check_delta(delta)
    return _rdp_to_dp_log(curve, math.log(delta))


def group_rdp_convert(curve: RdpCurve, exponent: int) -> RdpCurve:
    """
    Group privacy for groups of 2**exponent records: (alpha, rho) -> (alpha/2^c, 3^c rho),
    valid only where alpha >= 2^(c+1); other orders are dropped.
    exponent 0 is the identity (group of one record).
    """
    if int(exponent) != exponent or exponent < 0:
        raise DomainError('exponent', exponent, 'a non-negative integer')
    exponent = int(exponent)
    threshold = 2 ** (exponent + 1)
    scale = 2.0 ** exponent
    factor = 3.0 ** exponent
    kept = [(a, r) for a, r in zip(curve.orders, curve.rhos) if a >= threshold]
    if not kept:
        raise EmptyConvertibleGridError(exponent, max(curve.orders))

    with np.errstate(over='ignore'):
        rhos = tuple(float(np.float64(factor) * r) for _, r in kept)
    if any(math.isinf(r) for r in rhos):
        log.debug(f'group conversion with exponent {exponent} saturated to +inf')
    return RdpCurve(tuple(a / scale for a, _ in kept), rhos)


def _group_log_delta(log_delta: float, epsilon: float, k: int) -> float:
    return math.log(k) + (k - 1) * epsilon + log_delta


def dp_group_convert(budget: DpBudget, k: int) -> GroupDpBudget:
    """(eps, delta)-DP -> (k, k eps, k e^((k-1) eps) delta)-GDP; saturates to +inf."""
    if int(k) != k or k < 1:
        raise DomainError('k', k, 'an integer k >= 1')
    k = int(k)
    if k == 1:
        return GroupDpBudget(k=1, epsilon=budget.epsilon, delta=budget.delta, order=budget.order)

    log_delta = _group_log_delta(math.log(budget.delta), budget.epsilon, k)
    epsilon = k * budget.epsilon
    overflow = log_delta > LOG_FLOAT_MAX or math.isinf(epsilon)
    delta = math.inf if overflow else math.exp(log_delta)
    return GroupDpBudget(k=k, epsilon=epsilon, delta=delta, order=budget.order, overflow=overflow)


def normal_group_epsilon_search(
        curve: RdpCurve,
        target_delta: float,
        k: int,
        tolerance: float = SEARCH_TOLERANCE,
        max_iter: int = SEARCH_MAX_ITER
    ) -> GroupDpBudget:
    """
    Group epsilon through normal DP: bisect the intermediate delta' handed to
    rdp_to_dp until k e^((k-1) eps) delta' lands within `tolerance` of target_delta.
    delta' can be far below float range, so the search runs on log delta'.
    The returned budget's delta is the achieved final delta.
    """
    _check_delta(target_delta)
    if int(k) != k or k < 1:
        raise DomainError('k', k, 'an integer k >= 1')
    k = int(k)
    if k == 1:
        epsilon, order = rdp_to_dp(curve, target_delta)
        return GroupDpBudget(k=1, epsilon=epsilon, delta=target_delta, order=order)

    log_target = math.log(target_delta)

    def final_log_delta(inner: float) -> Tuple[float, float, float]:
        eps, order = _rdp_to_dp_log(curve, inner)
        return _group_log_delta(inner, eps, k), eps, order

    hi = log_target
    gap = 1.0
    lo = hi - gap
    for _ in range(64):
        if final_log_delta(lo)[0] <= log_target:
            break
        gap *= 2
        lo = hi - gap
    else:
        raise ConvergenceError(64, math.exp(min(final_log_delta(lo)[0], 0.0)), target_delta)

    achieved, eps, order = final_log_delta(hi)
    for iteration in range(1, max_iter + 1):
        mid = (lo + hi) / 2
        achieved, eps, order = final_log_delta(mid)
        achieved_delta = math.exp(min(achieved, LOG_FLOAT_MAX))
        if abs(achieved_delta - target_delta) <= tolerance and achieved <= log_target + 1e-12 * abs(log_target) \
                or abs(achieved_delta - target_delta) <= tolerance * 1e-3:
            log.debug(f'normal group search k={k} converged in {iteration} steps (log delta\'={mid:.3f})')
            return GroupDpBudget(k=k, epsilon=k * eps, delta=achieved_delta, order=order)
        if achieved > log_target:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-14 * max(1.0, abs(lo)):
            break

    achieved_delta = math.exp(min(achieved, LOG_FLOAT_MAX))
    if abs(achieved_delta - target_delta) <= tolerance:
        return GroupDpBudget(k=k, epsilon=k * eps, delta=achieved_delta, order=order)
    raise ConvergenceError(max_iter, achieved_delta, target_delta)


# ULDP budgets
############################################

def _refined_gaussian_epsilon(rho_per_order: float, delta: float, orders: Tuple[float, ...]) -> Tuple[float, float]:
    """
    Minimise rho_per_order * a + log((a-1)/a) - (log delta + log a)/(a-1) over a > 1,
    starting from the best grid order and refining inside its neighbouring cell.
    """
    log_delta = math.log(delta)
    grid = np.asarray(sorted(orders))

    def objective(a: float) -> float:
        return rho_per_order * a + math.log((a - 1) / a) - (log_delta + math.log(a)) / (a - 1)

    eps = _epsilons(grid, rho_per_order * grid, log_delta)
    idx = int(np.argmin(eps))
    best_eps, best_order = float(eps[idx]), float(grid[idx])

    lower = grid[idx - 1] if idx > 0 else 1 + 1e-9
    upper = grid[idx + 1] if idx + 1 < len(grid) else grid[idx]
    if upper > lower:
        res = optimize.minimize_scalar(objective, bounds=(lower, upper), method='bounded',
                                       options={'xatol': 1e-12})
        if res.success and res.fun < best_eps:
            best_eps, best_order = float(res.fun), float(res.x)
    return best_eps, best_order


def budget_uldp_naive_avg(
        sigma: float,
        rounds: int,
        delta: float,
        orders: Optional[Iterable[float]] = None
    ) -> float:
    return budget_uldp_naive_avg_order(sigma, rounds, delta, orders)[0]


def budget_uldp_naive_avg_order(
        sigma: float,
        rounds: int,
        delta: float,
        orders: Optional[Iterable[float]] = None
    ) -> Tuple[float, float]:
    """Same as budget_uldp_naive_avg, also returning the minimising order."""
    if not sigma > 0:
        raise DomainError('sigma', sigma, 'sigma > 0')
    if rounds < 1:
        raise DomainError('rounds', rounds, 'T >= 1')
    _check_delta(delta)
    return _refined_gaussian_epsilon(rounds / (2 * sigma ** 2), delta, _grid(orders))


def budget_uldp_avg_subsampled(
        sigma: float,
        q_user: float,
        rounds: int,
        delta: float,
        orders: Optional[Iterable[float]] = None
    ) -> Tuple[float, float]:
    """
    ULDP-AVG with user-level Poisson sub-sampling: the user-level Gaussian
    mechanism sampled at q_user and composed over T rounds.
    """
    _check_delta(delta)
    if not 0 < q_user <= 1:
        raise DomainError('q_user', q_user, 'a sampling rate in (0, 1]')
    if q_user == 1:
        return budget_uldp_naive_avg_order(sigma, rounds, delta, orders)
    return rdp_to_dp(subsampled_gaussian_curve(sigma, q_user, rounds, orders), delta)


def largest_power_of_two_at_most(k: int) -> int:
    if k < 1:
        raise DomainError('k', k, 'k >= 1')
    return 1 << (int(k).bit_length() - 1)


def group_order_grid(exponent: int) -> Tuple[float, ...]:
    """
    The default grid plus 2^c * a for every default order a in [2, GROUP_ORDER_SPAN],
    so that converted orders survive for any group size.
    """
    scale = 2.0 ** int(exponent)
    lifted = {scale * a for a in DEFAULT_ORDERS if 2 <= a <= GROUP_ORDER_SPAN}
    return tuple(sorted(set(DEFAULT_ORDERS) | lifted))


def uldp_group_record_curve(
        sigma: float,
        q: Union[float, Sequence[float]],
        steps: int,
        orders: Optional[Iterable[float]] = None
    ) -> RdpCurve:
    """
    Record-level RDP of the local DP-SGD runs: composed over Q*T steps per silo,
    then the maximum across silos (parallel composition on disjoint data).
    """
    rates = [q] if isinstance(q, (int, float)) else list(q)
    curves = [curve_for(NoiseConfig(sigma=sigma, q=rate, steps=steps), orders) for rate in rates]
    return max_rdp(curves)


def budget_uldp_group(
        sigma: float,
        q: Union[float, Sequence[float]],
        steps: int,
        k: int,
        delta: float,
        orders: Optional[Iterable[float]] = None
    ) -> GroupDpBudget:
    """
    ULDP-GROUP-k through RDP group privacy. A k that is not a power of two is
    reported for the largest power of two below it (flagged as a lower bound).
    """
    _check_delta(delta)
    if int(k) != k or k < 1:
        raise DomainError('k', k, 'an integer group size >= 1')
    rates = [q] if isinstance(q, (int, float)) else list(q)
    if any(not 0 < rate <= 1 for rate in rates):
        raise DomainError('q', q, 'sampling rates in (0, 1]')

    used = largest_power_of_two_at_most(int(k))
    exponent = used.bit_length() - 1
    if orders is None:
        orders = group_order_grid(exponent)
    record_curve = uldp_group_record_curve(sigma, rates, steps, orders)
    group_curve = group_rdp_convert(record_curve, exponent)
    epsilon, order = rdp_to_dp(group_curve, delta)
    overflow = math.isinf(epsilon)
    if used != k:
        log.debug(f'group size {k} is not a power of two; reporting k={used} as a lower bound')
    return GroupDpBudget(
        k=used,
        epsilon=epsilon,
        delta=delta,
        order=order,
        requested_k=int(k),
        lower_bound=used != k,
        overflow=overflow,
    )


def budget_dp_sgd(sigma: float, q: float, steps: int, delta: float,
                  orders: Optional[Iterable[float]] = None) -> Tuple[float, float]:
    """Record-level budget of one silo's DP-SGD (the k=1 group path)."""
    return rdp_to_dp(curve_for(NoiseConfig(sigma=sigma, q=q, steps=steps), orders), delta)
