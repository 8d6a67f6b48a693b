"""Shared domain types, seeded randomness and the on-disk container.

Every array is float64 (or int64 for indices) and is frozen after
construction, so instances can be handed to concurrent workers freely.

Container format (JSON)::

    {"format": "basemoe", "schema_version": 1, "kind": "<TypeName>",
     "data": {...}}

Arrays are stored as ``{"shape": [...], "values": [...flat row-major...]}``.
Floats are written with Python's shortest round-trip repr, so a
save/load cycle is bit-exact.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FORMAT_NAME = "basemoe"
SCHEMA_VERSION = 1
LAYERNORM_EPS = 1e-5
INIT_STD = 0.02


class ContractError(ValueError):
    """An operation's precondition or a type invariant was violated."""


class NonFiniteError(ContractError):
    """A value that must be finite was NaN or infinite."""


class ParseError(ValueError):
    """Input text (CSV, config, container) could not be parsed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


def _frozen(a: Any, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# randomness

def seeded_rng(seed: int, *path: int) -> np.random.Generator:
    """Return a PCG64 stream for ``seed``, optionally forked along ``path``.

    ``path`` is a tuple of non-negative ints (e.g. ``(worker_id,)``) fed to
    ``SeedSequence.spawn_key``, so sub-streams are independent of call order.
    """
    if seed < 0 or seed >= 2**64:
        raise ContractError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


# Fixed sub-stream tags so every component draws from its own stream.
STREAM_PARAMS = 1
STREAM_DATA = 2
STREAM_SHUFFLE = 3
STREAM_EVAL = 4
STREAM_BASELINE = 5
STREAM_TASK = 6


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class TokenBatch:
    """``T`` token feature rows with vocabulary ids and origin records.

    ``origin[t] = (worker_id, position)`` identifies where the row started
    out, which is what the routing round-trip checks compare against.
    """

    features: np.ndarray
    token_ids: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        feats = _frozen(self.features)
        if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
            raise ContractError(f"features must be a non-empty T x D matrix, got shape {feats.shape}")
        _require_finite("features", feats)
        T = feats.shape[0]
        ids = _frozen(self.token_ids, np.int64)
        if ids.shape != (T,):
            raise ContractError(f"token_ids must have length {T}, got shape {ids.shape}")
        origin = _frozen(self.origin, np.int64)
        if origin.shape != (T, 2):
            raise ContractError(f"origin must be a {T} x 2 array, got shape {origin.shape}")
        if len(np.unique(origin, axis=0)) != T:
            raise ContractError("origin entries must be unique within a batch")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_features(cls, features, worker: int = 0, token_ids=None) -> "TokenBatch":
        features = np.asarray(features, dtype=np.float64)
        T = features.shape[0]
        if token_ids is None:
            token_ids = np.zeros(T, dtype=np.int64)
        origin = np.stack([np.full(T, worker), np.arange(T)], axis=1)
        return cls(features, token_ids, origin)

    def take(self, index) -> "TokenBatch":
        index = np.asarray(index, dtype=np.int64)
        return TokenBatch(self.features[index], self.token_ids[index], self.origin[index])

    @staticmethod
    def concat(batches: Sequence["TokenBatch"]) -> "TokenBatch":
        return TokenBatch(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.token_ids for b in batches]),
            np.concatenate([b.origin for b in batches]),
        )


@dataclass(frozen=True)
class FeedForwardBlock:
    """One residual block: ``x + relu(ln(x) @ w_up + b_up) @ w_down + b_down``."""

    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray
    w_down: np.ndarray
    b_down: np.ndarray

    PARAMS = ("ln_gain", "ln_bias", "w_up", "b_up", "w_down", "b_down")

    def __post_init__(self):
        for name in self.PARAMS:
            arr = _frozen(getattr(self, name))
            _require_finite(name, arr)
            object.__setattr__(self, name, arr)
        D = self.ln_gain.shape[0]
        H = self.w_up.shape[1] if self.w_up.ndim == 2 else -1
        expected = {
            "ln_gain": (D,), "ln_bias": (D,), "w_up": (D, H),
            "b_up": (H,), "w_down": (H, D), "b_down": (D,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dim(self) -> int:
        return self.ln_gain.shape[0]

    def shapes(self) -> tuple:
        return tuple(getattr(self, n).shape for n in self.PARAMS)

    @classmethod
    def zeros(cls, dim: int, hidden: int | None = None) -> "FeedForwardBlock":
        hidden = 4 * dim if hidden is None else hidden
        return cls(np.zeros(dim), np.zeros(dim), np.zeros((dim, hidden)),
                   np.zeros(hidden), np.zeros((hidden, dim)), np.zeros(dim))


@dataclass(frozen=True)
class ExpertNetwork:
    blocks: tuple[FeedForwardBlock, ...]

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if len(blocks) < 1:
            raise ContractError("an expert network needs at least one block")
        dims = {b.dim for b in blocks}
        if len(dims) != 1:
            raise ContractError(f"blocks disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def dim(self) -> int:
        return self.blocks[0].dim

    def shapes(self) -> tuple:
        return tuple(b.shapes() for b in self.blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(b, n).ravel() for b in self.blocks for n in FeedForwardBlock.PARAMS])

    def with_flat(self, vec: np.ndarray) -> "ExpertNetwork":
        """Build a network of the same shapes from a flat parameter vector."""
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for b in self.blocks:
            parts = {}
            for n in FeedForwardBlock.PARAMS:
                shape = getattr(b, n).shape
                size = int(np.prod(shape))
                parts[n] = vec[pos:pos + size].reshape(shape)
                pos += size
            out.append(FeedForwardBlock(**parts))
        if pos != vec.size:
            raise ContractError(f"flat vector has {vec.size} entries, network needs {pos}")
        return ExpertNetwork(tuple(out))

    @classmethod
    def zeros(cls, dim: int, num_blocks: int = 1) -> "ExpertNetwork":
        return cls(tuple(FeedForwardBlock.zeros(dim) for _ in range(num_blocks)))


@dataclass(frozen=True)
class ExpertSet:
    embeddings: np.ndarray
    networks: tuple[ExpertNetwork, ...]

    def __post_init__(self):
        emb = _frozen(self.embeddings)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ContractError(f"embeddings must be a non-empty E x D matrix, got shape {emb.shape}")
        _require_finite("embeddings", emb)
        nets = tuple(self.networks)
        if len(nets) != emb.shape[0]:
            raise ContractError(f"{emb.shape[0]} embeddings but {len(nets)} networks")
        if len({n.shapes() for n in nets}) != 1:
            raise ContractError("expert networks must share identical layer shapes")
        if nets[0].dim != emb.shape[1]:
            raise ContractError(f"network dimension {nets[0].dim} != embedding dimension {emb.shape[1]}")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "networks", nets)

    @property
    def num_experts(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_blocks(self) -> int:
        return len(self.networks[0].blocks)

    def expert_flat(self, e: int) -> np.ndarray:
        """Embedding row followed by all network parameters of expert ``e``."""
        return np.concatenate([self.embeddings[e], self.networks[e].flat()])

    def with_expert_flats(self, flats: Sequence[np.ndarray]) -> "ExpertSet":
        D = self.dim
        emb = np.stack([f[:D] for f in flats])
        nets = tuple(net.with_flat(f[D:]) for net, f in zip(self.networks, flats))
        return ExpertSet(emb, nets)

    @classmethod
    def zeros(cls, num_experts: int, dim: int, num_blocks: int = 1) -> "ExpertSet":
        return cls(np.zeros((num_experts, dim)),
                   tuple(ExpertNetwork.zeros(dim, num_blocks) for _ in range(num_experts)))


@dataclass(frozen=True)
class Assignment:
    """Expert index per token; ``mode`` is ``"balanced"`` or ``"greedy"``."""

    expert_of: np.ndarray
    num_experts: int
    mode: str = "balanced"

    def __post_init__(self):
        a = _frozen(self.expert_of, np.int64)
        if a.ndim != 1:
            raise ContractError("expert_of must be a vector")
        if self.mode not in ("balanced", "greedy"):
            raise ContractError(f"unknown assignment mode {self.mode!r}")
        E = int(self.num_experts)
        if E < 1:
            raise ContractError("num_experts must be positive")
        if a.size and (a.min() < 0 or a.max() >= E):
            raise ContractError(f"expert index out of range 0..{E - 1}")
        if self.mode == "balanced":
            T = a.size
            if T % E:
                raise ContractError(f"balanced assignment needs E | T (T={T}, E={E})")
            counts = np.bincount(a, minlength=E)
            if np.any(counts != T // E):
                raise ContractError(f"assignment is not balanced: counts {counts.tolist()}")
        object.__setattr__(self, "expert_of", a)
        object.__setattr__(self, "num_experts", E)

    def __len__(self) -> int:
        return self.expert_of.size

    def counts(self) -> np.ndarray:
        return np.bincount(self.expert_of, minlength=self.num_experts)


@dataclass(frozen=True)
class ScoreMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2 or 0 in v.shape:
            raise ContractError(f"scores must be a non-empty T x E matrix, got shape {v.shape}")
        _require_finite("scores", v)
        object.__setattr__(self, "values", v)

    @property
    def num_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def num_experts(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# initialization

def init_experts(rng: np.random.Generator, num_experts: int, dim: int,
                 num_blocks: int = 1, std: float = INIT_STD) -> ExpertSet:
    """Normal(0, std) embeddings and projections, unit gain, zero biases."""
    emb = rng.normal(0.0, std, size=(num_experts, dim))
    nets = []
    for _ in range(num_experts):
        blocks = []
        for _ in range(num_blocks):
            blocks.append(FeedForwardBlock(
                ln_gain=np.ones(dim), ln_bias=np.zeros(dim),
                w_up=rng.normal(0.0, std, size=(dim, 4 * dim)), b_up=np.zeros(4 * dim),
                w_down=rng.normal(0.0, std, size=(4 * dim, dim)), b_down=np.zeros(dim),
            ))
        nets.append(ExpertNetwork(tuple(blocks)))
    return ExpertSet(emb, tuple(nets))


# ---------------------------------------------------------------------------
# serialization

def _enc_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    if a.dtype.kind in "iu":
        values = [int(x) for x in a.ravel()]
    else:
        values = [float(x) for x in a.ravel()]
    return {"shape": list(a.shape), "values": values}


def _dec_array(d: dict, dtype=np.float64) -> np.ndarray:
    try:
        return np.array(d["values"], dtype=dtype).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad array record: {exc}") from exc


def _enc_network(net: ExpertNetwork) -> list:
    return [{n: _enc_array(getattr(b, n)) for n in FeedForwardBlock.PARAMS} for b in net.blocks]


def _dec_network(blocks: list) -> ExpertNetwork:
    return ExpertNetwork(tuple(
        FeedForwardBlock(**{n: _dec_array(b[n]) for n in FeedForwardBlock.PARAMS}) for b in blocks
    ))


def to_record(obj) -> dict:
    """Encode a core type (or a plain dict of them) as a JSON-ready container."""
    if isinstance(obj, TokenBatch):
        kind, data = "TokenBatch", {
            "features": _enc_array(obj.features),
            "token_ids": _enc_array(obj.token_ids),
            "origin": _enc_array(obj.origin),
        }
    elif isinstance(obj, ExpertSet):
        kind, data = "ExpertSet", {
            "embeddings": _enc_array(obj.embeddings),
            "networks": [_enc_network(n) for n in obj.networks],
        }
    elif isinstance(obj, ExpertNetwork):
        kind, data = "ExpertNetwork", {"blocks": _enc_network(obj)}
    elif isinstance(obj, Assignment):
        kind, data = "Assignment", {
            "expert_of": _enc_array(obj.expert_of),
            "num_experts": obj.num_experts, "mode": obj.mode,
        }
    elif isinstance(obj, ScoreMatrix):
        kind, data = "ScoreMatrix", {"values": _enc_array(obj.values)}
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")
    return {"format": FORMAT_NAME, "schema_version": SCHEMA_VERSION, "kind": kind, "data": data}


def from_record(rec: dict):
    if not isinstance(rec, dict) or rec.get("format") != FORMAT_NAME:
        raise ParseError("not a basemoe container")
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {rec.get('schema_version')!r}")
    kind, d = rec.get("kind"), rec.get("data", {})
    if kind == "TokenBatch":
        return TokenBatch(_dec_array(d["features"]), _dec_array(d["token_ids"], np.int64),
                          _dec_array(d["origin"], np.int64))
    if kind == "ExpertSet":
        return ExpertSet(_dec_array(d["embeddings"]), tuple(_dec_network(n) for n in d["networks"]))
    if kind == "ExpertNetwork":
        return _dec_network(d["blocks"])
    if kind == "Assignment":
        return Assignment(_dec_array(d["expert_of"], np.int64), d["num_experts"], d["mode"])
    if kind == "ScoreMatrix":
        return ScoreMatrix(_dec_array(d["values"]))
    raise ParseError(f"unknown container kind {kind!r}")


def dumps(obj) -> str:
    return json.dumps(to_record(obj), sort_keys=True)


def loads(text: str):
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    return from_record(rec)


def save(obj, path) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def load(path):
    return loads(Path(path).read_text())


def write_json(path, payload: dict) -> None:
    """Deterministic JSON (sorted keys, fixed indentation) for reports."""
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# CSV matrices

def matrix_to_csv(values) -> str:
    """Row-major CSV with a leading ``shape,<rows>,<cols>`` header row."""
    m = np.atleast_2d(np.asarray(values))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shape", m.shape[0], m.shape[1]])
    for row in m:
        w.writerow([repr(float(x)) if m.dtype.kind == "f" else int(x) for x in row])
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    """Parse a CSV matrix; the ``shape`` header is optional but checked if present.

    Lines starting with ``#`` are comments. Errors name the 1-based line that failed.
    """
    rows: list[list[float]] = []
    expected = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        if not rows and expected is None and row[0].strip().lower() == "shape":
            try:
                expected = (int(row[1]), int(row[2]))
            except (IndexError, ValueError):
                raise ParseError(f"line {lineno}: malformed shape header {row!r}") from None
            continue
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric entry in {row!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"line {lineno}: non-finite entry")
        if rows and len(vals) != len(rows[0]):
            raise ParseError(f"line {lineno}: expected {len(rows[0])} columns, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise ParseError("line 1: no data rows")
    m = np.array(rows, dtype=np.float64)
    if expected is not None and m.shape != expected:
        raise ParseError(f"line 1: header says shape {expected}, data has {m.shape}")
    return m


def rows_to_csv(header: Iterable[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()
