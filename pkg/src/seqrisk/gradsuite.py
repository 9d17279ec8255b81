"""Randomized gradient verification for every differentiable component.

Each builder returns (fn, arrays): named input/parameter arrays and a
function mapping their Node counterparts to a scalar loss. ``tape.grad_check``
then compares analytic gradients against central finite differences. Builders
resample instances whose relu/prelu pre-activations sit too close to the kink,
where a finite difference straddles the nondifferentiable point.
"""

from __future__ import annotations

import time

import numpy as np

from . import cells, head, tape

COMPONENTS = (
    "time_aware_cell",
    "user_item_cell",
    "field_transform",
    "fusion_head",
    "cross_entropy_loss",
    "teacher_loss",
)

_MARGIN = 1e-3


def _proj(rng, shape):
    return np.asarray(rng.standard_normal(shape))


def build_time_aware_cell(rng, n=2, d=3, d_t=2, hidden=4):
    arrays = cells.init_time_aware_arrays(rng, d, d_t, hidden, prefix="c")
    arrays = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in arrays.items()}
    arrays["x"] = _proj(rng, (n, d)) * 0.7
    arrays["h"] = _proj(rng, (n, hidden)) * 0.7
    arrays["xw"] = _proj(rng, (n, d_t)) * 0.7
    arrays["xm"] = _proj(rng, (n, d_t)) * 0.7
    dt = rng.uniform(0.0, 3600.0, size=(n, 1))
    weight = _proj(rng, (n, hidden))

    def fn(p):
        cell = cells.params_from(p, "c", cells.TimeAwareGruParams)
        h = cells.time_aware_step(cell, p["x"], p["h"], p["xw"], p["xm"], tape.constant(dt))
        return tape.sum_all(tape.mul(h, tape.constant(weight)))

    return fn, arrays


def build_user_item_cell(rng, n=2, h_in=3, hidden=4, p_user=3, d_item=2):
    arrays = cells.init_user_item_arrays(rng, h_in, hidden, p_user, d_item, prefix="c")
    arrays = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in arrays.items()}
    arrays["t"] = _proj(rng, (n, h_in)) * 0.7
    arrays["h"] = _proj(rng, (n, hidden)) * 0.7
    arrays["xu"] = _proj(rng, (n, p_user)) * 0.7
    arrays["xi"] = _proj(rng, (n, d_item)) * 0.7
    weight = _proj(rng, (n, hidden))

    def fn(p):
        cell = cells.params_from(p, "c", cells.UserItemGruParams)
        h = cells.user_item_step(cell, p["t"], p["h"], p["xu"], p["xi"])
        return tape.sum_all(tape.mul(h, tape.constant(weight)))

    return fn, arrays


def build_field_transform(rng, n=3, d=4):
    for _ in range(50):
        arrays = {
            "w": _proj(rng, (d, d)) * 0.8,
            "b": _proj(rng, (d,)) * 0.5,
            "e": _proj(rng, (n, d)) * 0.8,
        }
        pre = arrays["e"] @ arrays["w"] + arrays["b"]
        if np.min(np.abs(pre)) > _MARGIN:
            break
    weight = _proj(rng, (n, d))

    def fn(p):
        z = tape.add(tape.matmul(p["e"], p["w"]), p["b"])
        return tape.sum_all(tape.mul(tape.relu(z), tape.constant(weight)))

    return fn, arrays


def build_fusion_head(rng, n=2, hidden=3, p_feat=2, widths=(5, 4, 2)):
    y = (rng.random((n, 1)) < 0.5).astype(np.float64)
    for _ in range(50):
        arrays = head.init_upi_arrays(rng, 2 * hidden + p_feat, widths)
        arrays = {
            k: v + (0.3 * rng.standard_normal(v.shape) if v.ndim else 0.0)
            for k, v in arrays.items()
        }
        arrays["t_m"] = _proj(rng, (n, hidden)) * 0.7
        arrays["h_m"] = _proj(rng, (n, hidden)) * 0.7
        arrays["prof"] = _proj(rng, (n, p_feat)) * 0.7
        if _head_margins_ok(arrays, widths, n, hidden, p_feat):
            break

    def fn(p):
        upi = head.upi_params_from(p, n_layers=len(widths))
        prob = head.fuse_and_score(upi, p["t_m"], p["h_m"], p["prof"], dropout_on=False)
        return tape.mean_all(head.cross_entropy(prob, tape.constant(y)))

    return fn, arrays


def _head_margins_ok(arrays, widths, n, hidden, p_feat):
    x = np.concatenate([arrays["t_m"], arrays["h_m"], arrays["prof"]], axis=1)
    for i in range(len(widths)):
        z = x @ arrays[f"upi.l{i}.w"] + arrays[f"upi.l{i}.b"]
        if i < len(widths) - 1:
            if np.min(np.abs(z)) <= _MARGIN:
                return False
            x = head.prelu(z, float(arrays[f"upi.l{i}.alpha"]))
    return True


def build_cross_entropy_loss(rng, n=4):
    arrays = {"logits": _proj(rng, (n, 1)) * 1.5}
    y = (rng.random((n, 1)) < 0.5).astype(np.float64)

    def fn(p):
        prob = tape.clip(tape.sigmoid(p["logits"]), head.CLAMP_EPS, 1.0 - head.CLAMP_EPS)
        return tape.mean_all(head.cross_entropy(prob, tape.constant(y)))

    return fn, arrays


def build_teacher_loss(rng, n=4):
    arrays = {
        "logits": _proj(rng, (n, 1)) * 1.5,
        "alpha_raw": np.asarray(rng.uniform(-0.5, 1.0)),
    }
    y = (rng.random((n, 1)) < 0.5).astype(np.float64)
    q = rng.uniform(0.05, 0.95, size=(n, 1))

    def fn(p):
        prob = tape.clip(tape.sigmoid(p["logits"]), head.CLAMP_EPS, 1.0 - head.CLAMP_EPS)
        alpha = tape.softplus(p["alpha_raw"])
        return tape.mean_all(head.aux_loss(prob, tape.constant(q), tape.constant(y), alpha))

    return fn, arrays


_BUILDERS = {
    "time_aware_cell": build_time_aware_cell,
    "user_item_cell": build_user_item_cell,
    "field_transform": build_field_transform,
    "fusion_head": build_fusion_head,
    "cross_entropy_loss": build_cross_entropy_loss,
    "teacher_loss": build_teacher_loss,
}


def run(components=None, n_instances=10, seed=0, h=1e-5, tol=1e-4):
    """Run the suite; returns {component: max relative error} plus elapsed seconds."""
    components = list(components or COMPONENTS)
    rng = np.random.default_rng(seed)
    worst = {}
    start = time.monotonic()
    for name in components:
        builder = _BUILDERS[name]
        err = 0.0
        for _ in range(n_instances):
            fn, arrays = builder(rng)
            report = tape.grad_check(fn, arrays, h=h, tol=tol)
            err = max(err, report.max_rel_error)
        worst[name] = err
    return worst, time.monotonic() - start
