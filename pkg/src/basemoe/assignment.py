"""Token-to-expert assignment.

Training uses a balanced linear assignment (every expert receives exactly
``T / E`` tokens) solved with a forward auction; testing uses a plain
per-token argmax. ``solve_oracle`` gives the exact optimum for small
instances and is what the auction is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Assignment, ContractError, ExpertSet, ScoreMatrix, TokenBatch

ORACLE_MAX_TOKENS = 1024
EPSILON_FLOOR = 1e-9
ITERATIONS_PER_TOKEN = 200
# Divisor between successive epsilon-scaling phases.
EPSILON_SCALING = 5.0


@dataclass(frozen=True)
class AuctionConfig:
    """Auction parameters; ``None`` means "derive from the instance".

    The default epsilon is ``(max score - min score) / (2T)`` floored at 1e-9;
    the default iteration budget is ``200 * T`` bidding rounds.
    """

    epsilon: float | None = None
    max_iterations: int | None = None

    def __post_init__(self):
        if self.epsilon is not None and not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ContractError(f"epsilon must be positive and finite, got {self.epsilon}")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ContractError(f"max_iterations must be >= 1, got {self.max_iterations}")

    def resolve(self, scores: np.ndarray) -> tuple[float, int]:
        T = scores.shape[0]
        eps = self.epsilon
        if eps is None:
            eps = max(float(scores.max() - scores.min()) / (2 * T), EPSILON_FLOOR)
        iters = self.max_iterations if self.max_iterations is not None else ITERATIONS_PER_TOKEN * T
        return eps, iters


@dataclass(frozen=True)
class AssignmentResult:
    assignment: Assignment
    objective: float
    iterations_used: int
    fell_back_to_greedy: bool

    def to_json(self) -> dict:
        return {
            "assignment": [int(a) for a in self.assignment.expert_of],
            "objective": float(self.objective),
            "iterations_used": int(self.iterations_used),
            "fell_back_to_greedy": bool(self.fell_back_to_greedy),
        }


def compute_scores(tokens: TokenBatch, experts: ExpertSet) -> ScoreMatrix:
    if tokens.dim != experts.dim:
        raise ContractError(
            f"dimension mismatch: token features have D={tokens.dim}, "
            f"expert embeddings have D={experts.dim}")
    return ScoreMatrix(tokens.features @ experts.embeddings.T)


def objective_of(scores: ScoreMatrix, assignment: Assignment) -> float:
    a = assignment.expert_of
    if a.size != scores.num_tokens:
        raise ContractError(f"assignment has length {a.size}, scores have {scores.num_tokens} rows")
    if a.size and a.max() >= scores.num_experts:
        raise ContractError(f"expert index {int(a.max())} out of range for E={scores.num_experts}")
    return float(scores.values[np.arange(a.size), a].sum())


def assign_greedy(scores: ScoreMatrix) -> Assignment:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index.
    return Assignment(np.argmax(scores.values, axis=1), scores.num_experts, mode="greedy")


def _check_balanced_shape(scores: ScoreMatrix) -> tuple[int, int, int]:
    T, E = scores.values.shape
    if T % E:
        raise ContractError(f"number of experts E={E} must divide number of tokens T={T}")
    return T, E, T // E


def _epsilon_schedule(scores: np.ndarray, eps: float) -> list[float]:
    start = float(scores.max() - scores.min()) / 2
    phases = []
    cur = start
    while cur > eps:
        phases.append(cur)
        cur /= EPSILON_SCALING
    phases.append(eps)
    return phases


def _greedy_fill(S: np.ndarray, expert_of: np.ndarray, load: np.ndarray, cap: int) -> None:
    """Complete a partial assignment in place, highest scores first.

    Pairs are visited in descending score order, ties by (token, expert);
    a pair is taken when the token is still free and the expert has room.
    """
    T, E = S.shape
    free = np.flatnonzero(expert_of < 0)
    if free.size == 0:
        return
    sub = S[free]
    tok = np.repeat(free, E)
    exp = np.tile(np.arange(E), free.size)
    order = np.lexsort((exp, tok, -sub.ravel()))
    remaining = free.size
    for i in order:
        t, e = tok[i], exp[i]
        if expert_of[t] < 0 and load[e] < cap:
            expert_of[t] = e
            load[e] += 1
            remaining -= 1
            if remaining == 0:
                break


def solve_balanced(scores: ScoreMatrix, config: AuctionConfig | None = None) -> AssignmentResult:
    """Maximize the total score subject to exactly ``T / E`` tokens per expert.

    Forward auction over ``T`` slots (``T / E`` interchangeable slots per
    expert), run in epsilon-scaling phases that keep prices between phases.
    Within a bidding round every free token bids once, in token order. A bid
    targets the cheapest slot of the token's best expert and raises its price
    by ``best net value - second best net value + eps``; the displaced holder
    becomes free. On termination every token is within ``eps`` of its best
    net value, so the objective is within ``T * eps`` of the optimum.

    If the round budget runs out, the tokens still free are placed by
    ``_greedy_fill``, which keeps the result exactly balanced.
    """
    config = config or AuctionConfig()
    T, E, cap = _check_balanced_shape(scores)
    S = scores.values
    eps, max_iterations = config.resolve(S)

    if E == 1:
        a = Assignment(np.zeros(T, dtype=np.int64), 1)
        return AssignmentResult(a, objective_of(scores, a), 0, False)

    prices = np.zeros((E, cap))
    owner = np.full((E, cap), -1, dtype=np.int64)
    expert_of = np.full(T, -1, dtype=np.int64)
    slot_of = np.full(T, -1, dtype=np.int64)
    cheapest = np.zeros(E)                      # lowest slot price per expert
    cheapest_slot = np.zeros(E, dtype=np.int64)
    runner_up = np.zeros(E) if cap > 1 else np.full(E, np.inf)  # second lowest slot price

    iterations = 0
    fell_back = False
    for phase_eps in _epsilon_schedule(S, eps):
        owner.fill(-1)
        expert_of.fill(-1)
        slot_of.fill(-1)
        free = list(range(T))
        while free:
            if iterations >= max_iterations:
                fell_back = True
                break
            iterations += 1
            displaced = []
            for t in free:
                net = S[t] - cheapest
                best = int(np.argmax(net))
                v = net[best]
                alt = net.copy()
                alt[best] = S[t, best] - runner_up[best]
                w = alt.max()
                slot = int(cheapest_slot[best])
                prev = int(owner[best, slot])
                if prev >= 0:
                    expert_of[prev] = -1
                    slot_of[prev] = -1
                    displaced.append(prev)
                prices[best, slot] += v - w + phase_eps
                owner[best, slot] = t
                expert_of[t] = best
                slot_of[t] = slot
                row = prices[best]
                if cap > 1:
                    i0, i1 = np.argsort(row, kind="stable")[:2]
                    cheapest_slot[best], cheapest[best], runner_up[best] = i0, row[i0], row[i1]
                else:
                    cheapest[best] = row[0]
            free = sorted(displaced)
        if fell_back:
            break

    if fell_back:
        load = np.bincount(expert_of[expert_of >= 0], minlength=E)
        _greedy_fill(S, expert_of, load, cap)

    a = Assignment(expert_of, E, mode="balanced")
    return AssignmentResult(a, objective_of(scores, a), iterations, fell_back)


def solve_oracle(scores: ScoreMatrix) -> AssignmentResult:
    """Exact balanced optimum for small instances.

    Each expert column is replicated ``T / E`` times and the resulting square
    problem is solved exactly; replica ``j`` maps back to expert ``j // (T/E)``.
    """
    T, E, cap = _check_balanced_shape(scores)
    if T > ORACLE_MAX_TOKENS:
        raise ContractError(f"oracle is limited to T <= {ORACLE_MAX_TOKENS}, got T={T}")
    square = np.repeat(scores.values, cap, axis=1)
    rows, cols = linear_sum_assignment(square, maximize=True)
    expert_of = np.empty(T, dtype=np.int64)
    expert_of[rows] = cols // cap
    a = Assignment(expert_of, E, mode="balanced")
    return AssignmentResult(a, objective_of(scores, a), 0, False)
