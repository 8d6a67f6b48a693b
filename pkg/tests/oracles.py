"""Reference implementations written without the package's vectorised code paths.

Each one re-derives a result with plain loops so it can check the package
independently.
"""

from __future__ import annotations

import math

import numpy as np

from basemoe.core import STREAM_SHUFFLE, ExpertSet, TokenBatch, seeded_rng


def balanced_assignments(T: int, E: int):
    """Yield every assignment vector with exactly T/E tokens per expert."""
    cap = T // E

    def rec(t, load, cur):
        if t == T:
            yield tuple(cur)
            return
        for e in range(E):
            if load[e] < cap:
                load[e] += 1
                cur.append(e)
                yield from rec(t + 1, load, cur)
                cur.pop()
                load[e] -= 1

    yield from rec(0, [0] * E, [])


def brute_force_optimum(S: np.ndarray) -> float:
    T, E = S.shape
    return max(sum(S[t][a[t]] for t in range(T)) for a in balanced_assignments(T, E))


def dot_scores(features, embeddings):
    out = [[0.0] * len(embeddings) for _ in features]
    for t, h in enumerate(features):
        for e, w in enumerate(embeddings):
            acc = 0.0
            for k in range(len(h)):
                acc += float(h[k]) * float(w[k])
            out[t][e] = acc
    return np.array(out)


def row_argmax(S):
    out = []
    for row in S:
        best, arg = -math.inf, -1
        for e, v in enumerate(row):
            if v > best:
                best, arg = v, e
        out.append(arg)
    return np.array(out)


def histogram(values, n):
    counts = [0] * n
    for v in values:
        counts[int(v)] += 1
    return counts


def bigram_counts(token_ids, assignments, num_experts, bos_id=-1):
    """counts[e][prev] for every expert, by direct scanning."""
    counts = [dict() for _ in range(num_experts)]
    for ids, a in zip(token_ids, assignments):
        prev = bos_id
        for tok, e in zip(ids, a):
            counts[int(e)][int(prev)] = counts[int(e)].get(int(prev), 0) + 1
            prev = int(tok)
    return counts


# --- scalar forward of the gated expert layer --------------------------------

def _layer_norm_scalar(x, gain, bias, eps=1e-5):
    D = len(x)
    mean = sum(x) / D
    var = sum((v - mean) ** 2 for v in x) / D
    return [(x[i] - mean) / math.sqrt(var + eps) * gain[i] + bias[i] for i in range(D)]


def branch_scalar(block, x):
    D, H = block.w_up.shape
    z = _layer_norm_scalar(x, block.ln_gain, block.ln_bias)
    hidden = [max(0.0, sum(z[i] * block.w_up[i][j] for i in range(D)) + block.b_up[j]) for j in range(H)]
    return [sum(hidden[j] * block.w_down[j][i] for j in range(H)) + block.b_down[i] for i in range(D)]


def expert_delta_scalar(net, h):
    """Sum of the residual branches of every block (the expert's contribution)."""
    x = [float(v) for v in h]
    total = [0.0] * len(x)
    for block in net.blocks:
        b = branch_scalar(block, x)
        x = [x[i] + b[i] for i in range(len(x))]
        total = [total[i] + b[i] for i in range(len(x))]
    return total


def expert_stack_scalar(net, h):
    x = [float(v) for v in h]
    for block in net.blocks:
        b = branch_scalar(block, x)
        x = [x[i] + b[i] for i in range(len(x))]
    return x


def gated_output_scalar(h, experts: ExpertSet, e: int):
    w = experts.embeddings[e]
    s = sum(float(h[k]) * float(w[k]) for k in range(len(h)))
    g = 1.0 / (1.0 + math.exp(-s))
    f = expert_delta_scalar(experts.networks[e], h)
    return [g * f[i] + float(h[i]) for i in range(len(h))], g


# --- routing-free reference ----------------------------------------------------

def routing_free(batches, experts, seed, solve):
    """Shuffle with the same per-worker streams, solve each local problem, apply the layer in place.

    ``solve(features) -> expert_of`` is the local assignment rule. Results are
    written back by origin metadata, with no sorting or all_to_all.
    """
    E = len(batches)
    T = batches[0].size
    c = T // E
    master, *prefix = (seed,) if isinstance(seed, int) else tuple(seed)
    perms = [seeded_rng(master, *prefix, STREAM_SHUFFLE, i).permutation(T) for i in range(E)]
    out = [np.full((T, batches[0].dim), np.nan) for _ in range(E)]
    for j in range(E):
        rows = [(i, int(r)) for i in range(E) for r in perms[i][j * c:(j + 1) * c]]
        feats = np.array([batches[i].features[r] for i, r in rows])
        expert_of = solve(feats)
        for (i, r), h, e in zip(rows, feats, expert_of):
            y, _ = gated_output_scalar(h, experts, int(e))
            w, pos = batches[i].origin[r]
            out[int(w)][int(pos)] = y
    return out


# --- finite differences --------------------------------------------------------

def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = f(x)
        flat[k] = orig - step
        lo = f(x)
        flat[k] = orig
        g[k] = (hi - lo) / (2 * step)
    return grad


def gradients_agree(analytic, numeric, rel=1e-4, floor=1e-8) -> tuple[bool, float, float]:
    """Every coordinate within relative ``rel`` or absolute ``floor``.

    Returns (ok, max absolute difference, worst relative error among coordinates larger than 1e-6).
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    ok = bool(np.all((diff <= floor) | (diff < rel * scale)))
    big = scale > 1e-6
    worst_rel = float((diff[big] / scale[big]).max(initial=0.0))
    return ok, float(diff.max(initial=0.0)), worst_rel


def permutation_count(T, E):
    """Number of balanced assignments, T! / ((T/E)!)^E."""
    return math.factorial(T) // math.factorial(T // E) ** E


def gradient_check_instance(seed: int, T: int, E: int, D: int, blocks: int, step: float = 1e-5):
    """Compare base_backward with central differences of sum(upstream * output) on one random instance.

    Returns (ok, max absolute difference, worst relative error) over every coordinate of
    inputs, embeddings and networks.
    """
    from basemoe.baselayer import base_backward, base_forward
    from basemoe.core import Assignment, init_experts

    rng = seeded_rng(seed)
    experts = init_experts(rng, E, D, blocks)
    experts = experts.with_expert_flats(
        [rng.normal(0.0, 0.5, size=experts.expert_flat(e).size) for e in range(E)])
    X = rng.normal(size=(T, D))
    u = rng.normal(size=(T, D))
    a = Assignment(np.arange(T) % E, E, mode="greedy")
    grads = base_backward(TokenBatch.from_features(X), experts, a, u)

    def loss(X_, ex):
        return float(np.sum(u * base_forward(TokenBatch.from_features(X_), ex, a).outputs))

    results = [gradients_agree(grads.d_inputs, central_difference(lambda x: loss(x, experts), X, step))]
    flats = [experts.expert_flat(e) for e in range(E)]
    for e in range(E):
        def loss_e(v, e=e):
            return loss(X, experts.with_expert_flats(flats[:e] + [v] + flats[e + 1:]))
        results.append(gradients_agree(grads.expert_flat(e), central_difference(loss_e, flats[e], step)))
    return (all(r[0] for r in results), max(r[1] for r in results), max(r[2] for r in results))
