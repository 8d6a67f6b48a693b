"""Simulated multi-worker balanced expert routing.

Each of the ``E`` workers holds ``T`` tokens and one expert. In training
mode a batch goes through::

    shuffle -> local balanced assignment -> sort by expert -> all_to_all
      -> expert -> inverse all_to_all -> unsort -> unshuffle

and comes back to its origin worker in its original row order. Workers only
exchange immutable messages, so the per-worker stages can run on a thread
pool without changing results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .assignment import AuctionConfig, assign_greedy, compute_scores, solve_balanced
from .baselayer import LayerOutput, mix_forward
from .core import STREAM_SHUFFLE, Assignment, ContractError, ExpertSet, TokenBatch, seeded_rng


@dataclass(frozen=True)
class WorkerTopology:
    num_workers: int
    tokens_per_worker: int

    def __post_init__(self):
        if self.num_workers < 1:
            raise ContractError(f"need at least one worker, got {self.num_workers}")
        if self.tokens_per_worker < 1 or self.tokens_per_worker % self.num_workers:
            raise ContractError(
                f"workers E={self.num_workers} must divide tokens per worker T={self.tokens_per_worker}")

    @property
    def group_size(self) -> int:
        return self.tokens_per_worker // self.num_workers


@dataclass
class RoutingTrace:
    """What moved where during one ``route_and_apply`` call.

    ``shuffle_plan[i][r]`` is the worker that row ``r`` of worker ``i`` was
    shuffled to. ``dispatch_counts[j][e]`` counts tokens worker ``j`` sent to
    expert ``e``; ``return_counts`` is its transpose once the trip back is
    done. ``assignments[i][r]`` is the expert that handled row ``r`` of
    worker ``i``, in the original row order.
    """

    mode: str
    num_workers: int
    tokens_per_worker: int
    shuffle_plan: list = field(default_factory=list)
    shuffle_counts: np.ndarray | None = None
    dispatch_counts: np.ndarray | None = None
    return_counts: np.ndarray | None = None
    assignments: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    fell_back: list = field(default_factory=list)
    max_shard_size: int = 0
    origin_restored: bool = False

    def to_json(self) -> dict:
        def mat(m):
            return None if m is None else np.asarray(m).astype(int).tolist()
        return {
            "mode": self.mode,
            "num_workers": self.num_workers,
            "tokens_per_worker": self.tokens_per_worker,
            "shuffle_plan": [np.asarray(p).astype(int).tolist() for p in self.shuffle_plan],
            "shuffle_counts": mat(self.shuffle_counts),
            "dispatch_counts": mat(self.dispatch_counts),
            "return_counts": mat(self.return_counts),
            "assignments": [np.asarray(a).astype(int).tolist() for a in self.assignments],
            "objectives": [float(o) for o in self.objectives],
            "iterations": [int(i) for i in self.iterations],
            "fell_back_to_greedy": [bool(f) for f in self.fell_back],
            "max_shard_size": int(self.max_shard_size),
            "origin_restored": bool(self.origin_restored),
        }


@dataclass(frozen=True)
class Message:
    """Rows one worker sends another; unlike TokenBatch it may be empty."""

    features: np.ndarray
    origin: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @classmethod
    def rows(cls, batch: TokenBatch, index) -> "Message":
        index = np.asarray(index, dtype=np.int64)
        return cls(batch.features[index], batch.origin[index])


@contextmanager
def _stage(name: str):
    try:
        yield
    except ContractError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def _pmap(fn: Callable, items: Sequence, max_workers: int | None):
    if max_workers is None:
        max_workers = min(len(items), os.cpu_count() or 1)
    if max_workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


def _check_batches(batches: Sequence[TokenBatch]) -> WorkerTopology:
    if not batches:
        raise ContractError("no worker batches given")
    T = batches[0].size
    if any(b.size != T for b in batches):
        raise ContractError(f"all workers must hold the same number of tokens, got {[b.size for b in batches]}")
    return WorkerTopology(len(batches), T)


# ---------------------------------------------------------------------------
# stages

def shuffle(batches: Sequence[TokenBatch], seed: int | tuple[int, ...]):
    """Random equal exchange: every worker sends ``T/E`` random rows to each worker.

    Worker ``i`` draws a permutation from its own stream ``(seed, shuffle, i)``
    (``seed`` may be a tuple such as ``(master, step)``) and splits it into ``E`` contiguous groups; group ``j`` goes to worker
    ``j``. Received groups are concatenated in source-worker order.

    Returns ``(shuffled_batches, send_index)`` where ``send_index[i]`` is an
    ``E x T/E`` array of the rows worker ``i`` sent to each destination.
    """
    topo = _check_batches(batches)
    E, c = topo.num_workers, topo.group_size
    master, *prefix = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    send_index = [
        seeded_rng(master, *prefix, STREAM_SHUFFLE, i).permutation(topo.tokens_per_worker).reshape(E, c)
        for i in range(E)
    ]
    shuffled = [TokenBatch.concat([batches[i].take(send_index[i][j]) for i in range(E)]) for j in range(E)]
    return shuffled, send_index


def all_to_all_destinations(num_rows: int, num_workers: int) -> np.ndarray:
    """Row ``t`` goes to worker ``floor(t * E / T)``."""
    if num_rows % num_workers:
        raise ContractError(f"all_to_all needs E | T (T={num_rows}, E={num_workers})")
    return (np.arange(num_rows) * num_workers) // num_rows


def all_to_all(batch: TokenBatch, num_workers: int) -> list[TokenBatch]:
    dest = all_to_all_destinations(batch.size, num_workers)
    return [batch.take(np.flatnonzero(dest == e)) for e in range(num_workers)]


def sort_by_expert(batch: TokenBatch, assignment: Assignment, require_balanced: bool = True):
    """Stable sort of rows by assigned expert.

    Returns ``(sorted_batch, restore)`` with ``sorted_batch.take(restore)``
    equal to ``batch``.
    """
    if assignment.expert_of.size != batch.size:
        raise ContractError(f"assignment length {assignment.expert_of.size} != batch size {batch.size}")
    if require_balanced:
        counts = assignment.counts()
        if batch.size % assignment.num_experts or np.any(counts != batch.size // assignment.num_experts):
            raise ContractError(f"training pipeline needs a balanced assignment, got counts {counts.tolist()}")
    order = np.argsort(assignment.expert_of, kind="stable")
    restore = np.empty_like(order)
    restore[order] = np.arange(order.size)
    return batch.take(order), restore


# ---------------------------------------------------------------------------
# pipeline

def route_and_apply(batches: Sequence[TokenBatch], experts: ExpertSet,
                    config: AuctionConfig | None = None, seed: int | tuple[int, ...] = 0,
                    mode: str = "train", max_workers: int | None = None):
    """Run the full routing pipeline; returns ``(outputs, trace)``.

    ``outputs[i]`` is the LayerOutput for worker ``i`` with rows in that
    worker's original order. Test mode skips the shuffle, routes greedily and
    dispatches variable-size shards; the return trip is the same.
    """
    if mode not in ("train", "test"):
        raise ContractError(f"mode must be 'train' or 'test', got {mode!r}")
    with _stage("topology"):
        topo = _check_batches(batches)
        E, T = topo.num_workers, topo.tokens_per_worker
        if experts.num_experts != E:
            raise ContractError(f"{E} workers but {experts.num_experts} experts (one expert per worker)")
        if batches[0].dim != experts.dim:
            raise ContractError(f"token dimension {batches[0].dim} != expert dimension {experts.dim}")
    train = mode == "train"
    trace = RoutingTrace(mode, E, T)

    # 1. shuffle
    if train:
        with _stage("shuffle"):
            local, send_index = shuffle(batches, seed)
        trace.shuffle_plan = [np.argsort(si.ravel()) // topo.group_size for si in send_index]
        trace.shuffle_counts = np.array([[si[j].size for j in range(E)] for si in send_index])
    else:
        local, send_index = list(batches), None
        trace.shuffle_plan = [np.full(T, i) for i in range(E)]
        trace.shuffle_counts = np.diag(np.full(E, T))

    # 2. local assignment
    def assign(batch):
        scores = compute_scores(batch, experts)
        if train:
            return solve_balanced(scores, config)
        return assign_greedy(scores)

    with _stage("assign"):
        results = _pmap(assign, local, max_workers)
    if train:
        local_assign = [r.assignment for r in results]
        trace.objectives = [r.objective for r in results]
        trace.iterations = [r.iterations_used for r in results]
        trace.fell_back = [r.fell_back_to_greedy for r in results]
    else:
        local_assign = results
        trace.fell_back = [False] * E

    # 3. sort and dispatch
    with _stage("sort"):
        sorted_pairs = [sort_by_expert(b, a, require_balanced=train) for b, a in zip(local, local_assign)]
    with _stage("all_to_all"):
        sent = []
        for (sb, _), a in zip(sorted_pairs, local_assign):
            if train:
                dest = all_to_all_destinations(sb.size, E)
            else:
                dest = np.sort(a.expert_of, kind="stable")
            sent.append([Message.rows(sb, np.flatnonzero(dest == e)) for e in range(E)])
        trace.dispatch_counts = np.array([[msg.size for msg in row] for row in sent])
        shards = [[sent[j][e] for j in range(E)] for e in range(E)]

    # 4. expert computation on each worker
    def apply(e):
        parts = [m for m in shards[e] if m.size]
        if not parts:
            return [m.features for m in shards[e]], [np.zeros(0) for _ in shards[e]]
        feats = np.concatenate([m.features for m in parts])
        out, gates = mix_forward(feats, experts, np.full(feats.shape[0], e))
        bounds = np.cumsum([0] + [m.size for m in shards[e]])
        return ([out[bounds[j]:bounds[j + 1]] for j in range(E)],
                [gates[bounds[j]:bounds[j + 1]] for j in range(E)])

    with _stage("expert"):
        applied = _pmap(apply, range(E), max_workers)
    trace.max_shard_size = int(max(sum(m.size for m in shards[e]) for e in range(E)))

    # 5. inverse all_to_all: worker j collects its rows back from every expert
    with _stage("return"):
        trace.return_counts = np.array([[applied[e][0][j].shape[0] for e in range(E)] for j in range(E)])
        back_out, back_gate, back_expert, back_origin = [], [], [], []
        for j in range(E):
            back_out.append(np.concatenate([applied[e][0][j] for e in range(E)]))
            back_gate.append(np.concatenate([applied[e][1][j] for e in range(E)]))
            back_expert.append(np.concatenate([np.full(shards[e][j].size, e) for e in range(E)]))
            back_origin.append(np.concatenate([shards[e][j].origin for e in range(E)]))

    # 6. unsort
    with _stage("unsort"):
        for j, (_, restore) in enumerate(sorted_pairs):
            back_out[j] = back_out[j][restore]
            back_gate[j] = back_gate[j][restore]
            back_expert[j] = back_expert[j][restore]
            back_origin[j] = back_origin[j][restore]

    # 7. unshuffle
    with _stage("unshuffle"):
        if train:
            c = topo.group_size
            final_out = [np.empty((T, experts.dim)) for _ in range(E)]
            final_gate = [np.empty(T) for _ in range(E)]
            final_expert = [np.empty(T, dtype=np.int64) for _ in range(E)]
            final_origin = [np.empty((T, 2), dtype=np.int64) for _ in range(E)]
            for j in range(E):
                for i in range(E):
                    rows = send_index[i][j]
                    block = slice(i * c, (i + 1) * c)
                    final_out[i][rows] = back_out[j][block]
                    final_gate[i][rows] = back_gate[j][block]
                    final_expert[i][rows] = back_expert[j][block]
                    final_origin[i][rows] = back_origin[j][block]
        else:
            final_out, final_gate, final_expert, final_origin = back_out, back_gate, back_expert, back_origin
        for i, b in enumerate(batches):
            if not np.array_equal(final_origin[i], b.origin):
                raise ContractError(f"worker {i}: returned rows do not match origin order")
        trace.origin_restored = True

    trace.assignments = final_expert
    outputs = [LayerOutput(final_out[i], final_gate[i]) for i in range(E)]
    return outputs, trace
