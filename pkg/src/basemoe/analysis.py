"""Expert balance curves, previous-token specialization tables and a timing harness."""

from __future__ import annotations

import statistics
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .assignment import AuctionConfig
from .core import (
    STREAM_DATA, STREAM_PARAMS, Assignment, ContractError, TokenBatch, init_experts, rows_to_csv,
    seeded_rng,
)
from .routing import route_and_apply

DEFAULT_TOP_K = 5
BOS_ID = -1


@dataclass(frozen=True)
class BalanceReport:
    """Share of tokens per expert, most used first."""

    usage: np.ndarray
    mode: str
    counts: np.ndarray

    def __post_init__(self):
        if abs(float(self.usage.sum()) - 1.0) > 1e-9:
            raise ContractError(f"usage fractions sum to {self.usage.sum()}, not 1")
        if np.any(np.diff(self.usage) > 0):
            raise ContractError("usage must be sorted non-increasing")

    def to_json(self) -> dict:
        return {"mode": self.mode, "usage": [float(u) for u in self.usage],
                "counts": [int(c) for c in self.counts]}

    def to_csv(self) -> str:
        return rows_to_csv(["rank", "fraction", "count"],
                           [(i, float(u), int(c)) for i, (u, c) in enumerate(zip(self.usage, self.counts))])

    def plot_data(self) -> str:
        """``rank percent`` pairs, one per line, for a sorted-usage curve."""
        return "".join(f"{i} {100.0 * float(u)!r}\n" for i, u in enumerate(self.usage))


def balance_report(assignments: Iterable[Assignment | np.ndarray], num_experts: int,
                   mode: str = "training") -> BalanceReport:
    if mode not in ("training", "testing"):
        raise ContractError(f"mode must be 'training' or 'testing', got {mode!r}")
    counts = np.zeros(num_experts, dtype=np.int64)
    seen = False
    for a in assignments:
        idx = a.expert_of if isinstance(a, Assignment) else np.asarray(a, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= num_experts):
            raise ContractError(f"expert index out of range for E={num_experts}")
        chunk = np.bincount(idx, minlength=num_experts)
        if mode == "training" and np.any(chunk != chunk[0]):
            raise ContractError(f"training-mode assignment is not balanced: counts {chunk.tolist()}")
        counts += chunk
        seen = True
    if not seen or counts.sum() == 0:
        raise ContractError("balance_report needs at least one token")
    counts = np.sort(counts)[::-1]
    return BalanceReport(counts / counts.sum(), mode, counts)


@dataclass(frozen=True)
class SpecializationTable:
    """``entries[e]`` lists ``(previous token id, count)``, most frequent first."""

    entries: dict
    k: int

    def __post_init__(self):
        for e, rows in self.entries.items():
            counts = [c for _, c in rows]
            if any(b > a for a, b in zip(counts, counts[1:])):
                raise ContractError(f"expert {e}: counts are not non-increasing")

    def to_json(self) -> dict:
        return {"k": self.k, "experts": {str(e): [[int(i), int(c)] for i, c in rows]
                                         for e, rows in sorted(self.entries.items())}}

    def to_csv(self) -> str:
        return rows_to_csv(["expert", "rank", "previous_id", "count"],
                           [(e, r, i, c) for e, rows in sorted(self.entries.items())
                            for r, (i, c) in enumerate(rows)])


def specialization_table(token_ids: Sequence[Sequence[int]], assignments: Sequence[Sequence[int]],
                         num_experts: int, k: int = DEFAULT_TOP_K, bos_id: int = BOS_ID) -> SpecializationTable:
    """Most frequent token at ``t - 1`` for each expert's tokens at ``t``.

    Position 0 of every sequence counts ``bos_id`` as its previous token.
    Ties are broken by the smaller id.
    """
    if len(token_ids) != len(assignments):
        raise ContractError(f"{len(token_ids)} id sequences but {len(assignments)} assignment sequences")
    counters = [Counter() for _ in range(num_experts)]
    for ids, a in zip(token_ids, assignments):
        ids = np.asarray(ids, dtype=np.int64)
        a = a.expert_of if isinstance(a, Assignment) else np.asarray(a, dtype=np.int64)
        if ids.shape != a.shape:
            raise ContractError(f"sequence of length {ids.size} has {a.size} assignments")
        prev = np.concatenate([[bos_id], ids[:-1]])
        for p, e in zip(prev.tolist(), a.tolist()):
            counters[e][p] += 1
    entries = {e: sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:k] for e, c in enumerate(counters)}
    return SpecializationTable(entries, k)


@dataclass
class ThroughputReport:
    rows: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rows": self.rows}

    def to_csv(self) -> str:
        keys = ["experts", "tokens", "dim", "blocks", "repetitions", "median_tokens_per_sec", "band_low", "band_high"]
        return rows_to_csv(keys, [[r[k] for k in keys] for r in self.rows])


def throughput_report(settings: Sequence[dict], repetitions: int = 3, seed: int = 0,
                      mode: str = "train") -> ThroughputReport:
    """Median tokens/second of ``route_and_apply`` for each setting.

    A setting is ``{"experts": E, "tokens": T, "dim": D, "blocks": B}`` with
    ``T`` tokens per worker. The band is ``median +/- 3 * 1.4826 * MAD``.
    Absolute numbers depend on the machine.
    """
    if repetitions < 3:
        raise ContractError(f"repetitions must be >= 3, got {repetitions}")
    report = ThroughputReport()
    for s in settings:
        E, T, D, B = s["experts"], s["tokens"], s["dim"], s.get("blocks", 1)
        experts = init_experts(seeded_rng(seed, STREAM_PARAMS), E, D, B)
        rng = seeded_rng(seed, STREAM_DATA)
        batches = [TokenBatch.from_features(rng.normal(size=(T, D)), worker=i) for i in range(E)]
        rates = []
        for r in range(repetitions):
            t0 = time.perf_counter()
            route_and_apply(batches, experts, AuctionConfig(), seed=(seed, r), mode=mode, max_workers=1)
            rates.append(E * T / (time.perf_counter() - t0))
        med = statistics.median(rates)
        mad = statistics.median(abs(x - med) for x in rates)
        half = 3 * 1.4826 * mad
        report.rows.append({
            "experts": E, "tokens": T, "dim": D, "blocks": B, "repetitions": repetitions,
            "tokens_per_sec": rates, "median_tokens_per_sec": med,
            "band_low": med - half, "band_high": med + half,
        })
    return report
