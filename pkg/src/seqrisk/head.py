"""Fusion head: intention + habit + profile features through a small MLP with
PReLU activations and dropout, reduced to an overdue probability, plus the
training losses.

The final dense layer has two units; the scalar logit is their difference
(equivalent to the two-way softmax probability of the risky class) and the
output probability is its sigmoid, clamped away from 0 and 1 before any log.

Losses: plain cross entropy, and the teacher-guided variant adding
alpha/2 * (KL(p||q) + KL(q||p)) over the implied Bernoulli pair, where the
teacher probability q is a constant (no gradient flows into it). The
coefficient alpha is kept nonnegative through a softplus reparameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape
from .embeddings import glorot_uniform

CLAMP_EPS = 1e-7


def prelu(x, alpha):
    """max(0, x) + alpha * min(0, x) on plain numbers or arrays."""
    return np.maximum(0.0, x) + alpha * np.minimum(0.0, x)


@dataclass
class UpiParams:
    """Node handles for the fusion MLP: per layer (w, b, prelu alpha)."""

    layers: list

    @property
    def n_hidden(self):
        return len(self.layers) - 1


def init_upi_arrays(rng, in_dim, widths=(50, 25, 2), prefix="upi"):
    arrays = {}
    prev = in_dim
    for i, width in enumerate(widths):
        arrays[f"{prefix}.l{i}.w"] = glorot_uniform(rng, prev, width, (prev, width))
        arrays[f"{prefix}.l{i}.b"] = np.zeros(width)
        if i < len(widths) - 1:
            arrays[f"{prefix}.l{i}.alpha"] = np.asarray(0.5)
        prev = width
    return arrays


def upi_params_from(nodes, n_layers=3, prefix="upi"):
    layers = []
    for i in range(n_layers):
        alpha = nodes.get(f"{prefix}.l{i}.alpha")
        layers.append((nodes[f"{prefix}.l{i}.w"], nodes[f"{prefix}.l{i}.b"], alpha))
    return UpiParams(layers=layers)


def fuse_and_score(params, t_m, h_m, profile_f, dropout_on=False, rng_seed=0, keep_prob=0.6):
    """Overdue probability node for a batch.

    Hidden layers apply dense -> PReLU -> dropout (training only, inverted
    scaling, mask drawn from ``rng_seed``). With dropout off the computation
    is deterministic. All-zero sequence inputs leave the score a function of
    the profile path alone.
    """
    x = tape.concat([t_m, h_m, profile_f], axis=1)
    rng = np.random.default_rng(rng_seed) if dropout_on else None
    n_layers = len(params.layers)
    for i, (w, b, alpha) in enumerate(params.layers):
        x = tape.add(tape.matmul(x, w), b)
        if i < n_layers - 1:
            x = tape.prelu(x, alpha)
            if dropout_on:
                mask = (rng.random(x.value.shape) < keep_prob) / keep_prob
                x = tape.mul(x, tape.constant(mask))
    logit = tape.sub(tape.narrow(x, 1, 1, 1), tape.narrow(x, 1, 0, 1))
    return tape.clip(tape.sigmoid(logit), CLAMP_EPS, 1.0 - CLAMP_EPS)


def cross_entropy(p, y):
    """Elementwise -(y ln p + (1-y) ln(1-p)); callers reduce with mean."""
    one = tape.constant(1.0)
    return tape.neg(
        tape.add(
            tape.mul(y, tape.log(p)),
            tape.mul(tape.sub(one, y), tape.log(tape.sub(one, p))),
        )
    )


def bernoulli_kl(p, q):
    """Elementwise KL between Bernoulli(p) and Bernoulli(q)."""
    one = tape.constant(1.0)
    return tape.add(
        tape.mul(p, tape.sub(tape.log(p), tape.log(q))),
        tape.mul(tape.sub(one, p), tape.sub(tape.log(tape.sub(one, p)), tape.log(tape.sub(one, q)))),
    )


def aux_loss(p, q, y, alpha):
    """cross_entropy + alpha/2 * (KL(p||q) + KL(q||p)) with constant teacher q."""
    sym = tape.add(bernoulli_kl(p, q), bernoulli_kl(q, p))
    return tape.add(cross_entropy(p, y), tape.mul(tape.scale(sym, 0.5), alpha))


def alpha_aux_raw_init(alpha=1.0):
    """Inverse softplus, so softplus(raw) starts at the requested coefficient."""
    return math.log(math.expm1(alpha))


def clamp_probs(values, eps=CLAMP_EPS):
    return np.clip(np.asarray(values, dtype=np.float64), eps, 1.0 - eps)
