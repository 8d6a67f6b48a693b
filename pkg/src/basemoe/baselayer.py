"""Position-wise balanced expert layer: expert feedforward stacks and the gated mix.

For a token ``h`` routed to expert ``e``::

    out = sigmoid(h . w_e) * f_e(h) + h

The expert owns a stack of residual blocks (layer norm, 4x up-projection,
ReLU, down-projection, residual). ``f_e`` in the mix is the sum of the
blocks' residual branches, i.e. the stack output minus its input, so an
all-zero expert contributes exactly nothing and the layer reduces to the
identity. ``expert_forward`` returns the full stack output.

Gradients are derived by hand; ``base_backward`` returns the gradient of
``sum(upstream * out)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import (
    LAYERNORM_EPS, Assignment, ContractError, ExpertNetwork, ExpertSet, NonFiniteError,
    FeedForwardBlock, TokenBatch,
)


@dataclass(frozen=True)
class LayerOutput:
    outputs: np.ndarray
    gate_values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.outputs)):
            raise NonFiniteError("layer outputs are not finite")


@dataclass(frozen=True)
class LayerGradients:
    d_inputs: np.ndarray
    d_embeddings: np.ndarray
    d_networks: tuple[ExpertNetwork, ...]

    def expert_flat(self, e: int) -> np.ndarray:
        return np.concatenate([self.d_embeddings[e], self.d_networks[e].flat()])


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYERNORM_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _layer_norm_backward(dy: np.ndarray, gain: np.ndarray, cache):
    xhat, rstd = cache
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _block_branch(b: FeedForwardBlock, x: np.ndarray):
    y, ln_cache = _layer_norm(x, b.ln_gain, b.ln_bias)
    pre = y @ b.w_up + b.b_up
    act = np.maximum(pre, 0.0)
    return act @ b.w_down + b.b_down, (y, ln_cache, pre, act)


def _block_backward(b: FeedForwardBlock, cache, dout: np.ndarray):
    y, ln_cache, pre, act = cache
    d_w_down = act.T @ dout
    d_b_down = dout.sum(axis=0)
    dpre = (dout @ b.w_down.T) * (pre > 0)
    d_w_up = y.T @ dpre
    d_b_up = dpre.sum(axis=0)
    dy = dpre @ b.w_up.T
    dx_ln, d_gain, d_bias = _layer_norm_backward(dy, b.ln_gain, ln_cache)
    grads = FeedForwardBlock(d_gain, d_bias, d_w_up, d_b_up, d_w_down, d_b_down)
    return dout + dx_ln, grads


def _network_forward(net: ExpertNetwork, x: np.ndarray):
    """Returns (stack output, residual-branch sum, caches)."""
    delta = np.zeros_like(x)
    caches = []
    for b in net.blocks:
        branch, c = _block_branch(b, x)
        x = x + branch
        delta = delta + branch
        caches.append(c)
    return x, delta, caches


def _network_backward(net: ExpertNetwork, caches, dout: np.ndarray):
    grads = []
    for b, c in zip(reversed(net.blocks), reversed(caches)):
        dout, g = _block_backward(b, c, dout)
        grads.append(g)
    return dout, ExpertNetwork(tuple(reversed(grads)))


def expert_forward(net: ExpertNetwork, h: np.ndarray) -> np.ndarray:
    """Run the residual block stack on a D-vector or on each row of a matrix."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != net.dim:
        raise ContractError(f"input dimension {h.shape[-1]} != expert dimension {net.dim}")
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("expert input is not finite")
    out, _, _ = _network_forward(net, np.atleast_2d(h))
    return out[0] if h.ndim == 1 else out


def _check(features: np.ndarray, experts: ExpertSet, assignment: Assignment) -> np.ndarray:
    a = assignment.expert_of
    if a.size != features.shape[0]:
        raise ContractError(f"assignment length {a.size} != number of tokens {features.shape[0]}")
    if features.shape[1] != experts.dim:
        raise ContractError(f"token dimension {features.shape[1]} != expert dimension {experts.dim}")
    if a.size and a.max() >= experts.num_experts:
        raise ContractError(f"expert index {int(a.max())} out of range for E={experts.num_experts}")
    return a


def mix_forward(features: np.ndarray, experts: ExpertSet, expert_of: np.ndarray):
    """Gated residual mix on a raw feature matrix; returns (outputs, gates)."""
    out = np.array(features, dtype=np.float64, copy=True)
    gates = np.empty(features.shape[0])
    for e in np.unique(expert_of):
        rows = np.flatnonzero(expert_of == e)
        h = features[rows]
        g = expit(h @ experts.embeddings[e])
        _, f, _ = _network_forward(experts.networks[e], h)
        out[rows] = g[:, None] * f + h
        gates[rows] = g
    return out, gates


def base_forward(tokens: TokenBatch, experts: ExpertSet, assignment: Assignment) -> LayerOutput:
    a = _check(tokens.features, experts, assignment)
    out, gates = mix_forward(tokens.features, experts, a)
    return LayerOutput(out, gates)


def base_backward(tokens: TokenBatch, experts: ExpertSet, assignment: Assignment,
                  upstream: np.ndarray) -> LayerGradients:
    a = _check(tokens.features, experts, assignment)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != tokens.features.shape:
        raise ContractError(f"upstream shape {u.shape} != output shape {tokens.features.shape}")

    X = tokens.features
    d_inputs = u.copy()  # residual path
    d_emb = np.zeros_like(experts.embeddings)
    d_nets = []
    for e, net in enumerate(experts.networks):
        rows = np.flatnonzero(a == e)
        if rows.size == 0:
            d_nets.append(ExpertNetwork(tuple(
                FeedForwardBlock(*(np.zeros_like(getattr(b, n)) for n in FeedForwardBlock.PARAMS))
                for b in net.blocks)))
            continue
        h, ue = X[rows], u[rows]
        w = experts.embeddings[e]
        g = expit(h @ w)
        _, f, caches = _network_forward(net, h)
        # gate path: d/ds of g(s) * (u . f)
        ds = (ue * f).sum(axis=1) * g * (1.0 - g)
        d_emb[e] = ds @ h
        df = g[:, None] * ue
        dh_stack, grads = _network_backward(net, caches, df)
        # f = stack(h) - h, so drop the stack's identity path
        d_inputs[rows] += ds[:, None] * w + (dh_stack - df)
        d_nets.append(grads)
    return LayerGradients(d_inputs, d_emb, tuple(d_nets))
