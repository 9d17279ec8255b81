"""The hierarchical recurrent core.

Two custom gated cells: a time-aware cell run over the events of each session
and a user-item-aware cell run over the resulting per-session intention
vectors. Both operate on row batches: every input is (N, dim) and weights are
stored input-major as (in_dim, hidden) so a step is one matmul per gate.

Time-aware step, with [a;b] meaning column concatenation per row:

    u = sigmoid([x; h; xw; xm] @ w_u + b_u)
    r = sigmoid([x; h; xw; xm] @ w_r + b_r)
    p = tanh([x; h; xw; xm; r*h] @ w_p + b_p)
    g = sigmoid((x + sigmoid(q * dt)) @ w_m + b_m)
    h' = (1 - u) * h + p * g * u

where dt is the per-row gap in raw seconds and q is a single learned vector
shared across steps, scaled elementwise by dt. The candidate input carries
both h and r*h, deliberately.

User-item-aware step:

    u = sigmoid([t; h; xu; xi] @ w_u + b_u)
    r = sigmoid([t; h; xu; xi] @ w_r + b_r)
    p = tanh([t; xu; xi; r*h] @ w_p + b_p)
    h' = (1 - u) * h + p * u

A plain gated cell (textbook form, no extra inputs) backs the ablation
variants. Pad steps are handled by the callers through masked blending, which
leaves the hidden state bit-identical to not having run the step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .embeddings import glorot_uniform

ONE = None  # lazily built constant 1.0


def _one():
    global ONE
    if ONE is None or ONE.value.dtype != tape.default_dtype():
        ONE = tape.constant(1.0)
    return ONE


@dataclass
class TimeAwareGruParams:
    """Node handles for one time-aware cell."""

    w_u: object
    b_u: object
    w_r: object
    b_r: object
    w_p: object
    b_p: object
    w_m: object
    b_m: object
    q: object


@dataclass
class UserItemGruParams:
    w_u: object
    b_u: object
    w_r: object
    b_r: object
    w_p: object
    b_p: object


@dataclass
class GruParams:
    w_u: object
    b_u: object
    w_r: object
    b_r: object
    w_p: object
    b_p: object


def init_time_aware_arrays(rng, d, d_t, hidden, prefix="tgru"):
    """Fresh parameter arrays for a time-aware cell, keyed by name."""
    gate_in = d + hidden + 2 * d_t
    cand_in = gate_in + hidden
    return {
        f"{prefix}.w_u": glorot_uniform(rng, gate_in, hidden, (gate_in, hidden)),
        f"{prefix}.b_u": np.zeros(hidden),
        f"{prefix}.w_r": glorot_uniform(rng, gate_in, hidden, (gate_in, hidden)),
        f"{prefix}.b_r": np.zeros(hidden),
        f"{prefix}.w_p": glorot_uniform(rng, cand_in, hidden, (cand_in, hidden)),
        f"{prefix}.b_p": np.zeros(hidden),
        f"{prefix}.w_m": glorot_uniform(rng, d, hidden, (d, hidden)),
        f"{prefix}.b_m": np.zeros(hidden),
        # raw seconds can reach the session gap bound, so start q tiny to
        # keep the inner sigmoid away from saturation early in training
        f"{prefix}.q": rng.uniform(-0.01, 0.01, size=d),
    }


def init_user_item_arrays(rng, h_in, hidden, p_user, d_item, prefix="ugru"):
    gate_in = h_in + hidden + p_user + d_item
    cand_in = h_in + p_user + d_item + hidden
    return {
        f"{prefix}.w_u": glorot_uniform(rng, gate_in, hidden, (gate_in, hidden)),
        f"{prefix}.b_u": np.zeros(hidden),
        f"{prefix}.w_r": glorot_uniform(rng, gate_in, hidden, (gate_in, hidden)),
        f"{prefix}.b_r": np.zeros(hidden),
        f"{prefix}.w_p": glorot_uniform(rng, cand_in, hidden, (cand_in, hidden)),
        f"{prefix}.b_p": np.zeros(hidden),
    }


def init_gru_arrays(rng, d_in, hidden, prefix="gru"):
    gate_in = d_in + hidden
    return {
        f"{prefix}.w_u": glorot_uniform(rng, gate_in, hidden, (gate_in, hidden)),
        f"{prefix}.b_u": np.zeros(hidden),
        f"{prefix}.w_r": glorot_uniform(rng, gate_in, hidden, (gate_in, hidden)),
        f"{prefix}.b_r": np.zeros(hidden),
        f"{prefix}.w_p": glorot_uniform(rng, gate_in, hidden, (gate_in, hidden)),
        f"{prefix}.b_p": np.zeros(hidden),
    }


def params_from(nodes, prefix, cls):
    names = [f.name for f in cls.__dataclass_fields__.values()]
    return cls(**{name: nodes[f"{prefix}.{name}"] for name in names})


def time_aware_step(p, x, h_prev, x_week, x_month, dt_col):
    """One time-aware update; ``dt_col`` is an (N, 1) node of gap seconds."""
    gate_in = tape.concat([x, h_prev, x_week, x_month], axis=1)
    u = tape.sigmoid(tape.add(tape.matmul(gate_in, p.w_u), p.b_u))
    r = tape.sigmoid(tape.add(tape.matmul(gate_in, p.w_r), p.b_r))
    cand_in = tape.concat([x, h_prev, x_week, x_month, tape.mul(r, h_prev)], axis=1)
    cand = tape.tanh(tape.add(tape.matmul(cand_in, p.w_p), p.b_p))
    decay = tape.sigmoid(tape.mul(dt_col, p.q))
    g = tape.sigmoid(tape.add(tape.matmul(tape.add(x, decay), p.w_m), p.b_m))
    keep = tape.sub(_one(), u)
    return tape.add(tape.mul(keep, h_prev), tape.mul(tape.mul(cand, g), u))


def user_item_step(p, t, h_prev, x_user, x_item):
    gate_in = tape.concat([t, h_prev, x_user, x_item], axis=1)
    u = tape.sigmoid(tape.add(tape.matmul(gate_in, p.w_u), p.b_u))
    r = tape.sigmoid(tape.add(tape.matmul(gate_in, p.w_r), p.b_r))
    cand_in = tape.concat([t, x_user, x_item, tape.mul(r, h_prev)], axis=1)
    cand = tape.tanh(tape.add(tape.matmul(cand_in, p.w_p), p.b_p))
    keep = tape.sub(_one(), u)
    return tape.add(tape.mul(keep, h_prev), tape.mul(cand, u))


def gru_step(p, x, h_prev):
    gate_in = tape.concat([x, h_prev], axis=1)
    u = tape.sigmoid(tape.add(tape.matmul(gate_in, p.w_u), p.b_u))
    r = tape.sigmoid(tape.add(tape.matmul(gate_in, p.w_r), p.b_r))
    cand_in = tape.concat([x, tape.mul(r, h_prev)], axis=1)
    cand = tape.tanh(tape.add(tape.matmul(cand_in, p.w_p), p.b_p))
    keep = tape.sub(_one(), u)
    return tape.add(tape.mul(keep, h_prev), tape.mul(cand, u))


def masked(h_new, h_prev, mask_col):
    """Blend so rows with mask 0 keep h_prev bit-identically."""
    inv = tape.constant(1.0 - mask_col.value)
    return tape.add(tape.mul(mask_col, h_new), tape.mul(inv, h_prev))


def encode_session(p, xs, weeks, months, dts, masks=None):
    """Run the time-aware cell over one session's per-step inputs.

    ``xs``/``weeks``/``months`` are lists of (N, dim) nodes, ``dts`` of (N, 1)
    nodes. Pad steps (mask 0) carry the hidden state through unchanged; the
    returned node is the hidden state after the last real step, or zero for an
    all-pad session.
    """
    n = xs[0].value.shape[0]
    hidden = p.w_u.value.shape[1]
    h = tape.constant(np.zeros((n, hidden)))
    for i, x in enumerate(xs):
        h_new = time_aware_step(p, x, h, weeks[i], months[i], dts[i])
        h = h_new if masks is None else masked(h_new, h, masks[i])
    return h


def encode_history(p, ts, x_user, x_item, masks=None):
    """Run the user-item-aware cell over an intention sequence."""
    n = ts[0].value.shape[0]
    hidden = p.w_u.value.shape[1]
    h = tape.constant(np.zeros((n, hidden)))
    for i, t in enumerate(ts):
        h_new = user_item_step(p, t, h, x_user, x_item)
        h = h_new if masks is None else masked(h_new, h, masks[i])
    return h
