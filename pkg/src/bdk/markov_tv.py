"""Total variation distance and mixing times for small finite Markov chains.

These are exact, enumerable checks of the machinery behind the mixing-step
idea: TV distance as half the L1 gap and as the largest event discrepancy,
the worst-start distance ``d(t) = max_x ||P^t(x, .) - pi||_TV``, the mixing
time ``t_mix(eps) = min{t : d(t) <= eps}``, and the time-reversal identity
for random walks on the cyclic group ``Z_n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bdk.errors import DimensionError, ValidationError

NORM_TOL = 1e-12
# d(t) within this of epsilon counts as reached: pi itself is only settled to
# 1e-12, and exact ties (common on small groups) must not hinge on round-off
MIX_TOL = 1e-12
MAX_BRUTEFORCE_SUPPORT = 20

MIXED = "mixed"
NOT_MIXED = "not_mixed"
NO_STATIONARY = "no_stationary"


@dataclass(frozen=True)
class DiscreteDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("a distribution is a non-empty 1-d array")
        if np.any(p < 0):
            raise ValidationError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > NORM_TOL:
            raise ValidationError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size


@dataclass(frozen=True)
class DiscreteChain:
    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise ValidationError("transition matrix must be square and non-empty")
        if np.any(P < 0):
            raise ValidationError("transition probabilities must be non-negative")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > NORM_TOL:
            raise ValidationError("every row of P must sum to 1")
        object.__setattr__(self, "P", P)

    @property
    def states(self) -> int:
        return self.P.shape[0]


def _probs(mu) -> np.ndarray:
    if isinstance(mu, DiscreteDistribution):
        return mu.probs
    return DiscreteDistribution(mu).probs


def tv_distance(mu, nu) -> float:
    """Half the L1 distance between two distributions on the same support."""
    p, q = _probs(mu), _probs(nu)
    if p.shape != q.shape:
        raise DimensionError(f"support sizes differ: {p.size} vs {q.size}")
    return 0.5 * float(np.abs(p - q).sum())


def tv_distance_bruteforce(mu, nu) -> float:
    """``max_A |mu(A) - nu(A)|`` over all ``2^n`` events ``A``."""
    p, q = _probs(mu), _probs(nu)
    if p.shape != q.shape:
        raise DimensionError(f"support sizes differ: {p.size} vs {q.size}")
    n = p.size
    if n > MAX_BRUTEFORCE_SUPPORT:
        raise ValidationError(f"support {n} too large to enumerate (max {MAX_BRUTEFORCE_SUPPORT})")
    events = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    return float(np.abs(events @ (p - q)).max())


def stationary_distribution(chain: DiscreteChain, tol: float = 1e-12, max_iter: int = 100_000):
    """Power iteration from the uniform distribution.

    Iterates with the lazy kernel ``(I + P) / 2``, which shares the stationary
    distribution of ``P`` but cannot oscillate. Returns ``None`` when the
    iteration has not settled within ``max_iter`` steps.
    """
    lazy = 0.5 * (np.eye(chain.states) + chain.P)
    pi = np.full(chain.states, 1.0 / chain.states)
    for _ in range(max_iter):
        nxt = pi @ lazy
        if np.abs(nxt - pi).sum() < tol:
            return nxt / nxt.sum()
        pi = nxt
    return None


def worst_case_tv(chain: DiscreteChain, pi, t: int) -> float:
    """``d(t) = max_x ||P^t(x, .) - pi||_TV``."""
    Pt = np.linalg.matrix_power(chain.P, t)
    return 0.5 * float(np.abs(Pt - np.asarray(pi)[None, :]).sum(axis=1).max())


def tv_curve(chain: DiscreteChain, pi, t_max: int, start=None) -> np.ndarray:
    """``d(0) .. d(t_max)``; with ``start`` the rows are restricted to that distribution's support."""
    pi = np.asarray(pi, dtype=np.float64)
    rows = np.eye(chain.states) if start is None else np.atleast_2d(_probs(start))
    out = np.empty(t_max + 1)
    for t in range(t_max + 1):
        out[t] = 0.5 * np.abs(rows - pi).sum(axis=1).max()
        rows = rows @ chain.P
    return out


@dataclass(frozen=True)
class MixingTime:
    status: str
    t_mix: int | None
    stationary: np.ndarray | None
    curve: np.ndarray | None = None

    @property
    def mixed(self) -> bool:
        return self.status == MIXED


def chain_mixing_time(chain: DiscreteChain, pi0=None, epsilon: float = 0.25, t_max: int = 10_000) -> MixingTime:
    """Smallest ``t >= 1`` with ``d(t) <= epsilon`` (up to ``MIX_TOL``).

    ``pi0`` restricts the worst case to the given starting distribution;
    by default every state is a candidate start. A chain whose power
    iteration does not settle reports ``no_stationary``; one that has not
    mixed after ``t_max`` steps reports ``not_mixed``.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValidationError("epsilon must lie in (0, 1)")
    pi = stationary_distribution(chain)
    if pi is None:
        return MixingTime(NO_STATIONARY, None, None)
    rows = np.eye(chain.states) if pi0 is None else np.atleast_2d(_probs(pi0))
    curve = [0.5 * float(np.abs(rows - pi).sum(axis=1).max())]
    for t in range(1, t_max + 1):
        rows = rows @ chain.P
        curve.append(0.5 * float(np.abs(rows - pi).sum(axis=1).max()))
        if curve[-1] <= epsilon + MIX_TOL:
            return MixingTime(MIXED, t, pi, np.array(curve))
    return MixingTime(NOT_MIXED, None, pi, np.array(curve))


def two_state_mixing_time(p: float, q: float, epsilon: float = 0.25) -> int:
    """Closed form for ``P = [[1-p, p], [q, 1-q]]``.

    From state 0 the distance is ``p/(p+q) |1-p-q|^t`` and from state 1 it is
    ``q/(p+q) |1-p-q|^t``, so ``d(t) = max(p, q)/(p+q) |1-p-q|^t``.
    """
    if not (0 < p < 1 and 0 < q < 1):
        raise ValidationError("p and q must lie in (0, 1)")
    lam = abs(1.0 - p - q)
    c = max(p, q) / (p + q)
    eps = epsilon + MIX_TOL
    if c <= eps:
        return 1
    if lam == 0.0:
        return 1
    # integer search keeps the answer exact at the boundary
    t = max(1, int(np.floor(np.log(epsilon / c) / np.log(lam))) - 1)
    while c * lam**t > eps:
        t += 1
    while t > 1 and c * lam ** (t - 1) <= eps:
        t -= 1
    return t


def cyclic_walk(n: int, increments: dict[int, float]) -> DiscreteChain:
    """Random walk on ``Z_n`` stepping by ``k`` with probability ``increments[k]``."""
    if n < 2:
        raise ValidationError("the group needs at least two elements")
    total = sum(increments.values())
    if abs(total - 1.0) > NORM_TOL or any(v < 0 for v in increments.values()):
        raise ValidationError("increments must form a probability distribution")
    P = np.zeros((n, n))
    for x in range(n):
        for k, w in increments.items():
            P[x, (x + k) % n] += w
    return DiscreteChain(P)


def is_group_walk(chain: DiscreteChain) -> bool:
    """Every row of a ``Z_n`` walk is a cyclic shift of the first."""
    P = chain.P
    return all(np.array_equal(np.roll(P[0], x), P[x]) for x in range(chain.states))


@dataclass(frozen=True)
class ReversalResult:
    forward: MixingTime
    reversed: MixingTime

    @property
    def equal(self) -> bool:
        return self.forward.status == self.reversed.status and self.forward.t_mix == self.reversed.t_mix


def time_reversal_check(chain: DiscreteChain, epsilon: float = 0.25, t_max: int = 10_000) -> ReversalResult:
    """Mixing times of a ``Z_n`` walk and of its time reversal.

    The uniform distribution is stationary for any group walk, so the
    reversal is simply ``P^T`` (increment ``k`` becomes ``-k``).
    """
    if not is_group_walk(chain):
        raise ValidationError("time reversal check needs a random walk on a cyclic group")
    back = DiscreteChain(chain.P.T.copy())
    return ReversalResult(
        chain_mixing_time(chain, epsilon=epsilon, t_max=t_max),
        chain_mixing_time(back, epsilon=epsilon, t_max=t_max),
    )


def submultiplicative_check(chain: DiscreteChain, levels: int = 4, epsilon: float = 0.25) -> list[tuple[int, float, float]]:
    """Rows ``(l, d(l * t_mix), 2^-l)`` for ``l = 1 .. levels``."""
    res = chain_mixing_time(chain, epsilon=epsilon)
    if not res.mixed:
        raise ValidationError(f"chain did not mix: {res.status}")
    return [(l, worst_case_tv(chain, res.stationary, l * res.t_mix), 2.0**-l) for l in range(1, levels + 1)]
