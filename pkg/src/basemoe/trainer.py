"""Toy training loop on clustered synthetic tokens.

Tokens come from ``K`` Gaussian clusters. The regression target for a token
of cluster ``c`` is the token plus a fixed per-cluster correction
``target_map[c]``, so an expert is most useful when it sees one cluster
only. A shared ``D x D`` linear readout sits after the expert layer; it is the
only replicated ("shared") parameter and the only thing whose gradient norm
drives clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import AuctionConfig, assign_greedy, compute_scores
from .baselayer import base_backward
from .core import (
    STREAM_BASELINE, STREAM_DATA, STREAM_EVAL, STREAM_TASK, Assignment, ContractError,
    FORMAT_NAME, SCHEMA_VERSION, DivergenceError, ExpertSet, NonFiniteError, ParseError, TokenBatch,
    from_record, seeded_rng, to_record,
)
from .routing import route_and_apply

DEFAULT_CLIP = 0.1


@dataclass(frozen=True)
class ClipConfig:
    threshold: float = DEFAULT_CLIP

    def __post_init__(self):
        if not (self.threshold > 0 and math.isfinite(self.threshold)):
            raise ContractError(f"clip threshold must be positive, got {self.threshold}")


def clip_gradients(shared_grads, expert_grads, config: ClipConfig = ClipConfig()):
    """Rescale every gradient by one factor computed from the shared ones.

    ``scale = min(1, threshold / ||shared||)``. Expert gradients never enter
    the norm, so workers agree on the factor without exchanging expert
    norms; they are still multiplied by it. Returns
    ``(shared, experts, scale)``.
    """
    shared = np.asarray(shared_grads, dtype=np.float64)
    if not np.all(np.isfinite(shared)):
        raise NonFiniteError("shared gradients contain non-finite values")
    experts = [np.asarray(g, dtype=np.float64) for g in expert_grads]
    for e, g in enumerate(experts):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradients of expert {e} contain non-finite values")
    norm = float(np.linalg.norm(shared))
    scale = 1.0 if norm <= config.threshold else config.threshold / norm
    return shared * scale, [g * scale for g in experts], scale


@dataclass(frozen=True)
class SyntheticTask:
    """Clustered token source.

    Cluster ``c`` owns token ids ``[c * tokens_per_cluster, (c+1) * tokens_per_cluster)``.
    Streams are Markov: the next token stays in the current cluster with
    probability ``persistence``, otherwise the cluster is redrawn uniformly.
    """

    cluster_centroids: np.ndarray
    target_map: np.ndarray
    tokens_per_cluster: int = 16
    noise_scale: float = 1.0
    persistence: float = 0.9

    def __post_init__(self):
        c = np.array(self.cluster_centroids, dtype=np.float64)
        m = np.array(self.target_map, dtype=np.float64)
        if c.ndim != 2 or c.shape != m.shape:
            raise ContractError(f"centroids {c.shape} and target_map {m.shape} must both be K x D")
        if len(np.unique(c, axis=0)) != c.shape[0]:
            raise ContractError("cluster centroids must be mutually distinct")
        if self.noise_scale <= 0:
            raise ContractError("noise_scale must be positive")
        if self.tokens_per_cluster < 1 or not 0 <= self.persistence <= 1:
            raise ContractError("tokens_per_cluster must be >= 1 and persistence in [0, 1]")
        object.__setattr__(self, "cluster_centroids", c)
        object.__setattr__(self, "target_map", m)

    @property
    def num_clusters(self) -> int:
        return self.cluster_centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.cluster_centroids.shape[1]

    @classmethod
    def make(cls, num_clusters: int, dim: int, seed: int, separation: float = 3.0,
             noise_scale: float = 1.0, target_scale: float = 1.0, **kw) -> "SyntheticTask":
        """Centroids on orthogonal directions at distance ``separation`` from 0.

        Corrections are drawn normally and centered across clusters, so an
        expert that serves every cluster alike gains nothing from its offset.
        """
        if num_clusters > dim:
            raise ContractError(f"need num_clusters <= dim for orthogonal centroids ({num_clusters} > {dim})")
        rng = seeded_rng(seed, STREAM_TASK)
        q, _ = np.linalg.qr(rng.normal(size=(dim, num_clusters)))
        centroids = separation * q.T
        target = rng.normal(0.0, target_scale, size=(num_clusters, dim))
        target -= target.mean(axis=0)
        return cls(centroids, target, noise_scale=noise_scale, **kw)

    def sample(self, rng: np.random.Generator, num_streams: int, length: int):
        """Draw ``num_streams`` streams; returns (features, token_ids, clusters)."""
        K = self.num_clusters
        clusters = np.empty((num_streams, length), dtype=np.int64)
        clusters[:, 0] = rng.integers(K, size=num_streams)
        for t in range(1, length):
            stay = rng.random(num_streams) < self.persistence
            clusters[:, t] = np.where(stay, clusters[:, t - 1], rng.integers(K, size=num_streams))
        ids = clusters * self.tokens_per_cluster + rng.integers(self.tokens_per_cluster, size=clusters.shape)
        noise = rng.normal(0.0, self.noise_scale, size=(num_streams, length, self.dim))
        return self.cluster_centroids[clusters] + noise, ids, clusters

    def to_json(self) -> dict:
        return {
            "cluster_centroids": self.cluster_centroids.tolist(),
            "target_map": self.target_map.tolist(),
            "tokens_per_cluster": self.tokens_per_cluster,
            "noise_scale": self.noise_scale,
            "persistence": self.persistence,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticTask":
        return cls(np.array(d["cluster_centroids"]), np.array(d["target_map"]),
                   d["tokens_per_cluster"], d["noise_scale"], d["persistence"])


# ---------------------------------------------------------------------------
# purity

def routing_purity(clusters: np.ndarray, expert_of: np.ndarray, num_experts: int) -> float:
    """Share of tokens routed to their cluster's plurality expert."""
    clusters = np.asarray(clusters).ravel()
    expert_of = np.asarray(expert_of).ravel()
    K = int(clusters.max()) + 1
    table = np.zeros((K, num_experts), dtype=np.int64)
    np.add.at(table, (clusters, expert_of), 1)
    return float(table.max(axis=1).sum() / clusters.size)


def greedy_purity(experts: ExpertSet, features: np.ndarray, clusters: np.ndarray) -> float:
    tb = TokenBatch.from_features(features)
    a = assign_greedy(compute_scores(tb, experts))
    return routing_purity(clusters, a.expert_of, experts.num_experts)


def random_routing_purity(clusters: np.ndarray, num_experts: int, rng: np.random.Generator,
                          trials: int = 500) -> np.ndarray:
    """Purity of uniformly random routing, one value per simulated trial."""
    clusters = np.asarray(clusters).ravel()
    return np.array([
        routing_purity(clusters, rng.integers(num_experts, size=clusters.size), num_experts)
        for _ in range(trials)
    ])


def eval_set(task: SyntheticTask, seed: int, per_cluster: int = 64):
    """Fixed held-out tokens, ``per_cluster`` from every cluster."""
    rng = seeded_rng(seed, STREAM_EVAL)
    clusters = np.repeat(np.arange(task.num_clusters), per_cluster)
    feats = task.cluster_centroids[clusters] + rng.normal(0.0, task.noise_scale, size=(clusters.size, task.dim))
    return feats, clusters


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    experts: ExpertSet
    readout: np.ndarray | None
    log: list[dict] = field(default_factory=list)
    initial_purity: float = 0.0
    final_purity: float = 0.0
    baseline_purity: float = 0.0
    baseline_p99: float = 0.0

    LOG_FIELDS = ("step", "loss", "scale_factor", "purity", "max_greedy_shard")

    def summary(self) -> dict:
        losses = [r["loss"] for r in self.log]
        return {
            "steps": len(self.log),
            "initial_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None,
            "initial_purity": self.initial_purity,
            "final_purity": self.final_purity,
            "random_baseline_purity": self.baseline_purity,
            "random_baseline_p99": self.baseline_p99,
            "expert_usage": self.log[-1]["usage"] if self.log else None,
        }


def train_toy(task: SyntheticTask, experts: ExpertSet, steps: int, learning_rate: float,
              clip: ClipConfig = ClipConfig(), seed: int = 0, tokens_per_worker: int = 32,
              use_readout: bool = True, auction: AuctionConfig | None = None,
              eval_per_cluster: int = 64) -> TrainResult:
    """Plain gradient descent through the routed expert layer.

    Every step draws one stream of ``tokens_per_worker`` tokens per worker,
    routes it in train mode, scores ``mean((out @ R - (h + target_map[c]))**2)``
    and backpropagates through ``base_backward`` using the per-token experts
    recorded in the routing trace. Purity is greedy routing purity on a
    fixed held-out set, logged before each update.
    """
    E = experts.num_experts
    if tokens_per_worker % E:
        raise ContractError(f"E={E} must divide tokens_per_worker={tokens_per_worker}")
    if task.dim != experts.dim:
        raise ContractError(f"task dimension {task.dim} != expert dimension {experts.dim}")
    if task.num_clusters > E:
        raise ContractError(f"need K <= E, got K={task.num_clusters}, E={E}")
    if steps < 0 or learning_rate < 0:
        raise ContractError("steps and learning_rate must be non-negative")

    D = experts.dim
    readout = np.eye(D) if use_readout else None
    data_rng = seeded_rng(seed, STREAM_DATA)
    eval_x, eval_c = eval_set(task, seed, eval_per_cluster)
    baseline = random_routing_purity(eval_c, E, seeded_rng(seed, STREAM_BASELINE))

    result = TrainResult(experts, readout, baseline_purity=float(baseline.mean()),
                         baseline_p99=float(np.quantile(baseline, 0.99)))
    result.initial_purity = greedy_purity(experts, eval_x, eval_c)

    for step in range(steps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                feats, ids, clusters = task.sample(data_rng, E, tokens_per_worker)
                batches = [TokenBatch(feats[i], ids[i], np.stack([np.full(tokens_per_worker, i),
                                                                 np.arange(tokens_per_worker)], axis=1))
                           for i in range(E)]
                outputs, trace = route_and_apply(batches, experts, auction, seed=(seed, step), mode="train")

                X = feats.reshape(-1, D)
                out = np.concatenate([o.outputs for o in outputs])
                target = X + task.target_map[clusters.ravel()]
                pred = out @ readout if use_readout else out
                err = pred - target
                loss = float(np.mean(err ** 2))
                if not math.isfinite(loss):
                    raise DivergenceError(step, loss)

                d_pred = 2.0 * err / err.size
                if use_readout:
                    d_readout = out.T @ d_pred
                    upstream = d_pred @ readout.T
                else:
                    d_readout = np.zeros(0)
                    upstream = d_pred
                assignment = Assignment(np.concatenate(trace.assignments), E)
                grads = base_backward(TokenBatch.concat(batches), experts, assignment, upstream)
                shared, expert_grads, scale = clip_gradients(
                    d_readout.ravel(), [grads.expert_flat(e) for e in range(E)], clip)

                greedy = assign_greedy(compute_scores(TokenBatch.from_features(eval_x), experts))
                result.log.append({
                    "step": step,
                    "loss": loss,
                    "scale_factor": scale,
                    "purity": routing_purity(eval_c, greedy.expert_of, E),
                    "max_greedy_shard": int(greedy.counts().max()),
                    "usage": assignment.counts().tolist(),
                })

                if learning_rate:
                    experts = experts.with_expert_flats(
                        [experts.expert_flat(e) - learning_rate * expert_grads[e] for e in range(E)])
                    if use_readout:
                        readout = readout - learning_rate * shared.reshape(D, D)
        except NonFiniteError as exc:
            # overflow shows up as non-finite activations or gradients before the loss
            raise DivergenceError(step, math.nan) from exc

    result.experts = experts
    result.readout = readout
    result.final_purity = greedy_purity(experts, eval_x, eval_c)
    return result


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_record(experts: ExpertSet, readout: np.ndarray | None, task: SyntheticTask,
                      seed: int, config: dict) -> dict:
    """Container holding parameters plus everything needed to rebuild the run."""
    return {
        "format": FORMAT_NAME, "schema_version": SCHEMA_VERSION, "kind": "Checkpoint",
        "data": {
            "experts": to_record(experts),
            "readout": None if readout is None else np.asarray(readout).tolist(),
            "task": task.to_json(),
            "seed": int(seed),
            "config": config,
        },
    }


def read_checkpoint(rec: dict):
    """Inverse of ``checkpoint_record``; returns (experts, readout, task, seed, config)."""
    if rec.get("format") != FORMAT_NAME or rec.get("kind") != "Checkpoint":
        raise ParseError("not a basemoe checkpoint")
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {rec.get('schema_version')!r}")
    d = rec["data"]
    readout = None if d["readout"] is None else np.array(d["readout"], dtype=np.float64)
    return from_record(d["experts"]), readout, SyntheticTask.from_json(d["task"]), d["seed"], d["config"]
