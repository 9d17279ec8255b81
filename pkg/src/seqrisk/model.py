"""Model assembly: parameter layout, dense featurization, batched forward.

The per-event/per-session contracts live in ``embeddings`` and ``cells``;
this module lays the same math out over dense index arrays so a whole batch
of users runs through numpy matmuls. Rows for the session-level recurrence
are ordered session-major (row = session * batch + user), which keeps every
tensor two-dimensional.

Padding convention: windows and sessions are head-padded, so the final slot
of each axis is the newest real element. Pad steps are blended out of the
recurrences, pad rows embed to an exact zero, and a user with no effective
sessions scores purely through the profile path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import cells, head, sessions, tape
from .config import keep_prob
from .embeddings import (
    FIELD_OP,
    FIELD_PROFILE,
    FIELD_TIME,
    FIELD_WIDGET,
    UNKNOWN_ITEM,
    glorot_uniform,
    item_field,
)
from .events import Category

log = logging.getLogger(__name__)

FIELD_BEHAVIOR_SHARED = "behavior"
PAD_ROW = 0


class ModelError(ValueError):
    pass


@dataclass
class FeatureSpace:
    """Vocabulary-derived layout shared by params, featurizer and checkpoints.

    ``row_keys`` describes the stacked behavior-embedding matrix row by row:
    row 0 is the pad row, then widget kinds, operation kinds, and per product
    class its item ids followed by an unseen-item row.
    """

    d: int
    d_t: int
    p: int
    widget_keys: list
    op_keys: list
    item_classes: list
    items: dict
    target_items: list
    row_of_kind: dict = field(init=False, repr=False)
    item_row: dict = field(init=False, repr=False)
    row_field: np.ndarray = field(init=False, repr=False)
    fields: list = field(init=False, repr=False)
    target_of: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.fields = [FIELD_WIDGET, FIELD_OP] + [item_field(c) for c in self.item_classes]
        field_ids = {f: i for i, f in enumerate(self.fields)}
        self.row_of_kind = {}
        self.item_row = {c: {} for c in self.item_classes}
        row_field = [-1]  # pad row belongs to no field
        row = 1
        for key in self.widget_keys:
            self.row_of_kind[key] = row
            row_field.append(field_ids[FIELD_WIDGET])
            row += 1
        for key in self.op_keys:
            self.row_of_kind[key] = row
            row_field.append(field_ids[FIELD_OP])
            row += 1
        for cls in self.item_classes:
            fid = field_ids[item_field(cls)]
            for item in self.items[cls]:
                self.item_row[cls][item] = row
                row_field.append(fid)
                row += 1
            self.item_row[cls][UNKNOWN_ITEM] = row
            row_field.append(fid)
            row += 1
        self.row_field = np.array(row_field, dtype=np.int64)
        self.target_of = {t: i for i, t in enumerate(self.target_items)}

    @property
    def n_rows(self):
        return len(self.row_field)

    def event_row(self, ev):
        cat = ev.kind.category
        if cat is Category.ITEM_CLICK:
            rows = self.item_row.get(ev.kind.cls)
            if rows is None:
                raise ModelError(f"unknown item class {ev.kind.cls!r}")
            return rows.get(ev.item_id, rows[UNKNOWN_ITEM])
        row = self.row_of_kind.get(ev.kind.key)
        if row is None:
            raise ModelError(f"unknown behavior kind {ev.kind.key!r}")
        return row

    def target_row(self, item_id):
        return self.target_of.get(item_id, len(self.target_items))

    def to_meta(self):
        return {
            "d": self.d,
            "d_t": self.d_t,
            "p": self.p,
            "widget_keys": list(self.widget_keys),
            "op_keys": list(self.op_keys),
            "item_classes": list(self.item_classes),
            "items": {c: list(v) for c, v in self.items.items()},
            "target_items": list(self.target_items),
        }

    @classmethod
    def from_meta(cls, meta):
        return cls(
            d=int(meta["d"]),
            d_t=int(meta["d_t"]),
            p=int(meta["p"]),
            widget_keys=list(meta["widget_keys"]),
            op_keys=list(meta["op_keys"]),
            item_classes=list(meta["item_classes"]),
            items={c: list(v) for c, v in meta["items"].items()},
            target_items=list(meta["target_items"]),
        )


def build_feature_space(taxonomy, events_by_user, profiles, cfg):
    """Derive the vocabulary layout from the taxonomy and the training data."""
    widget_keys, op_keys, item_classes = [], [], []
    for kind in taxonomy.kinds():
        if kind.category is Category.FUNCTION_WIDGET:
            widget_keys.append(kind.key)
        elif kind.category is Category.TRANSFORM_OP:
            op_keys.append(kind.key)
        else:
            item_classes.append(kind.cls)
    items = {c: set() for c in item_classes}
    for user_events in events_by_user.values():
        for ev in user_events:
            if ev.kind.category is Category.ITEM_CLICK:
                items[ev.kind.cls].add(ev.item_id)
    if not profiles:
        raise ModelError("cannot build a feature space without profile records")
    targets = sorted({r.applied_item_id for r in profiles})
    return FeatureSpace(
        d=int(cfg["embed"]["dim"]),
        d_t=int(cfg["embed"]["time_dim"]),
        p=len(profiles[0].features),
        widget_keys=widget_keys,
        op_keys=op_keys,
        item_classes=item_classes,
        items={c: sorted(items[c]) for c in item_classes},
        target_items=targets,
    )


@dataclass
class ParamStore:
    """Named parameter arrays plus non-trainable buffers (normalization stats)."""

    arrays: dict
    buffers: set = field(default_factory=set)

    def wrap(self):
        return {
            name: tape.constant(a) if name in self.buffers else tape.param(a)
            for name, a in self.arrays.items()
        }

    def trainable(self):
        return [n for n in sorted(self.arrays) if n not in self.buffers]

    def copy(self):
        return ParamStore({n: a.copy() for n, a in self.arrays.items()}, set(self.buffers))


def uses_time_cell(cfg):
    return cfg["model"]["sessions"] and cfg["gru"]["time_aware"]


def uses_item_cell(cfg):
    return cfg["model"]["sessions"] and cfg["gru"]["user_item_aware"]


def init_pretrain_arrays(p_features, cfg, rng):
    """Profile-path and fusion-head parameters, the stage-one subset."""
    hidden = int(cfg["gru"]["hidden"])
    arrays = {
        "fan.profile.w": glorot_uniform(rng, p_features, p_features, (p_features, p_features)),
        "fan.profile.b": np.zeros(p_features),
    }
    arrays.update(head.init_upi_arrays(rng, 2 * hidden + p_features, tuple(cfg["mlp"]["widths"])))
    arrays["loss.alpha_aux_raw"] = np.asarray(head.alpha_aux_raw_init(cfg["loss"]["alpha_aux_init"]))
    arrays["norm.mean"] = np.zeros(p_features)
    arrays["norm.var"] = np.ones(p_features)
    store = ParamStore(arrays, buffers={"norm.mean", "norm.var"})
    return store


def init_full_arrays(space, cfg, rng):
    """All parameter groups needed by the configured variant."""
    d, d_t, hidden = space.d, space.d_t, int(cfg["gru"]["hidden"])
    arrays = {}
    n_w, n_op = len(space.widget_keys), len(space.op_keys)
    arrays["emb.widget"] = glorot_uniform(rng, n_w, d, (n_w, d))
    arrays["emb.op"] = glorot_uniform(rng, n_op, d, (n_op, d))
    for cls in space.item_classes:
        n = len(space.items[cls]) + 1
        arrays[f"emb.item.{cls}"] = glorot_uniform(rng, n, d, (n, d))

    if cfg["fan"]["field_aware"]:
        for f in space.fields:
            arrays[f"fan.{f}.w"] = glorot_uniform(rng, d, d, (d, d))
            arrays[f"fan.{f}.b"] = np.zeros(d)
    else:
        arrays[f"fan.{FIELD_BEHAVIOR_SHARED}.w"] = glorot_uniform(rng, d, d, (d, d))
        arrays[f"fan.{FIELD_BEHAVIOR_SHARED}.b"] = np.zeros(d)

    if uses_time_cell(cfg):
        arrays["emb.week"] = glorot_uniform(rng, 7, d_t, (7, d_t))
        arrays["emb.month"] = glorot_uniform(rng, 31, d_t, (31, d_t))
        arrays[f"fan.{FIELD_TIME}.w"] = glorot_uniform(rng, d_t, d_t, (d_t, d_t))
        arrays[f"fan.{FIELD_TIME}.b"] = np.zeros(d_t)
        arrays.update(cells.init_time_aware_arrays(rng, d, d_t, hidden, prefix="tgru"))
    elif cfg["model"]["sessions"]:
        arrays.update(cells.init_gru_arrays(rng, d, hidden, prefix="sgru"))
    else:
        arrays.update(cells.init_gru_arrays(rng, d, hidden, prefix="fgru"))

    if uses_item_cell(cfg):
        n_t = len(space.target_items) + 1
        arrays["emb.target"] = glorot_uniform(rng, n_t, d, (n_t, d))
        arrays.update(cells.init_user_item_arrays(rng, hidden, hidden, space.p, d, prefix="ugru"))
    elif cfg["model"]["sessions"]:
        arrays.update(cells.init_gru_arrays(rng, hidden, hidden, prefix="hgru"))

    pre = init_pretrain_arrays(space.p, cfg, rng)
    arrays.update(pre.arrays)
    return ParamStore(arrays, buffers=set(pre.buffers))


@dataclass
class Featurized:
    """Dense per-user arrays ready for batched forward passes."""

    user_ids: list
    prof: np.ndarray
    target_idx: np.ndarray
    labels: np.ndarray  # -1 marks unlabeled rows
    idx: np.ndarray | None = None
    mult: np.ndarray | None = None
    week: np.ndarray | None = None
    month: np.ndarray | None = None
    dt: np.ndarray | None = None
    ev_mask: np.ndarray | None = None
    sess_mask: np.ndarray | None = None
    flat_idx: np.ndarray | None = None
    flat_mult: np.ndarray | None = None
    flat_mask: np.ndarray | None = None

    @property
    def n(self):
        return len(self.user_ids)


def _event_mult(ev, log1p_amount):
    if ev.kind.category is Category.TRANSFORM_OP:
        return math.log1p(ev.amount) if log1p_amount else math.log(ev.amount)
    return 1.0


def featurize(events_by_user, profiles, space, cfg, hierarchical=True, flat=False):
    """Sessionize and pack one user set into dense arrays.

    Profiles drive the user set; users without events get all-pad histories.
    """
    gap = int(cfg["session"]["gap_seconds"])
    min_len = int(cfg["session"]["min_events"])
    l_s = int(cfg["session"]["max_sessions"])
    l_b = int(cfg["session"]["max_events"])
    log1p_amount = bool(cfg["embed"]["log1p_amount"])
    n = len(profiles)

    fz = Featurized(
        user_ids=[r.user_id for r in profiles],
        prof=np.stack([r.features for r in profiles]) if n else np.zeros((0, space.p)),
        target_idx=np.array([space.target_row(r.applied_item_id) for r in profiles], dtype=np.int64),
        labels=np.array([-1 if r.label is None else int(r.label) for r in profiles], dtype=np.int64),
    )

    if hierarchical:
        fz.idx = np.zeros((n, l_s, l_b), dtype=np.int64)
        fz.mult = np.zeros((n, l_s, l_b))
        fz.week = np.zeros((n, l_s, l_b), dtype=np.int64)
        fz.month = np.zeros((n, l_s, l_b), dtype=np.int64)
        fz.dt = np.zeros((n, l_s, l_b))
        fz.ev_mask = np.zeros((n, l_s, l_b))
        fz.sess_mask = np.zeros((n, l_s))

    flat_cap = int(cfg["model"]["flat_max_events"])
    flat_rows = []

    for u, rec in enumerate(profiles):
        user_events = events_by_user.get(rec.user_id, [])
        if hierarchical:
            window = sessions.build_window(
                sessions.segment(user_events, gap), rec.loan_ts, min_len, l_s, l_b
            )
            for s, sess in enumerate(window.sessions):
                if not sess.events:
                    continue
                fz.sess_mask[u, s] = 1.0
                base = sess.pad_count
                for i, ev in enumerate(sess.events):
                    j = base + i
                    fz.idx[u, s, j] = space.event_row(ev)
                    fz.mult[u, s, j] = _event_mult(ev, log1p_amount)
                    fz.week[u, s, j] = ev.week_day - 1
                    fz.month[u, s, j] = ev.month_day - 1
                    fz.dt[u, s, j] = 0.0 if i == 0 else float(sess.intervals[i - 1])
                    fz.ev_mask[u, s, j] = 1.0
        if flat:
            kept = [ev for ev in user_events if ev.ts <= rec.loan_ts][-flat_cap:]
            flat_rows.append(kept)

    if flat:
        f_len = max((len(k) for k in flat_rows), default=0)
        f_len = max(f_len, 1)
        fz.flat_idx = np.zeros((n, f_len), dtype=np.int64)
        fz.flat_mult = np.zeros((n, f_len))
        fz.flat_mask = np.zeros((n, f_len))
        for u, kept in enumerate(flat_rows):
            base = f_len - len(kept)
            for i, ev in enumerate(kept):
                fz.flat_idx[u, base + i] = space.event_row(ev)
                fz.flat_mult[u, base + i] = _event_mult(ev, log1p_amount)
                fz.flat_mask[u, base + i] = 1.0
    return fz


def _stacked_behavior(nodes, space):
    parts = [tape.constant(np.zeros((1, space.d)))]
    parts.append(nodes["emb.widget"])
    parts.append(nodes["emb.op"])
    for cls in space.item_classes:
        parts.append(nodes[f"emb.item.{cls}"])
    return tape.concat(parts, axis=0)


def _behavior_features(nodes, space, cfg, stacked, idx_t, mult_t, mask_t):
    """Embed one step's events and apply the per-field transform, pad rows zero."""
    e = tape.gather_rows(stacked, idx_t)
    e = tape.mul(e, tape.constant(mult_t[:, None]))
    use_bias = cfg["fan"]["use_bias"]
    if cfg["fan"]["field_aware"]:
        row_fields = space.row_field[idx_t]
        total = None
        for fid, f in enumerate(space.fields):
            sel = row_fields == fid
            if not sel.any():
                continue
            z = tape.matmul(e, nodes[f"fan.{f}.w"])
            if use_bias:
                z = tape.add(z, nodes[f"fan.{f}.b"])
            part = tape.mul(tape.relu(z), tape.constant(sel[:, None].astype(float)))
            total = part if total is None else tape.add(total, part)
        assert total is not None
        f_t = total
    else:
        z = tape.matmul(e, nodes[f"fan.{FIELD_BEHAVIOR_SHARED}.w"])
        if use_bias:
            z = tape.add(z, nodes[f"fan.{FIELD_BEHAVIOR_SHARED}.b"])
        f_t = tape.relu(z)
    return tape.mul(f_t, tape.constant(mask_t[:, None]))


def _time_features(nodes, cfg, table_name, idx_t):
    z = tape.matmul(tape.gather_rows(nodes[table_name], idx_t), nodes[f"fan.{FIELD_TIME}.w"])
    if cfg["fan"]["use_bias"]:
        z = tape.add(z, nodes[f"fan.{FIELD_TIME}.b"])
    return tape.relu(z)


def profile_features(nodes, store, prof_batch, cfg):
    """Standardized profile vector through its field transform."""
    mean = store.arrays["norm.mean"]
    var = store.arrays["norm.var"]
    z = (prof_batch - mean) / np.sqrt(var + float(cfg["norm"]["epsilon"]))
    zn = tape.matmul(tape.constant(z), nodes["fan.profile.w"])
    if cfg["fan"]["use_bias"]:
        zn = tape.add(zn, nodes["fan.profile.b"])
    return tape.relu(zn)


def _step_major(a, sel):
    """(B, S, T) batch slice to a list-indexable (T, S*B) layout (row = s*B + u)."""
    sub = a[sel]
    b, s, t = sub.shape
    return np.ascontiguousarray(sub.transpose(2, 1, 0)).reshape(t, s * b)


def forward_scores(store, space, fz, cfg, sel, train_mode=False, dropout_seed=0):
    """Probability node for the selected users under the configured variant.

    Returns ``(p, nodes)`` where ``p`` is an (B, 1) node and ``nodes`` the
    wrapped parameters (for gradient readout after backward).
    """
    nodes = store.wrap()
    hidden = int(cfg["gru"]["hidden"])
    b = len(sel)
    prof_f = profile_features(nodes, store, fz.prof[sel], cfg)

    if cfg["model"]["sessions"]:
        t_m, h_m = _encode_hierarchical(nodes, store, space, fz, cfg, sel, prof_f)
    else:
        t_m = _encode_flat(nodes, space, fz, cfg, sel)
        h_m = tape.constant(np.zeros((b, hidden)))

    upi = head.upi_params_from(nodes, n_layers=len(cfg["mlp"]["widths"]))
    return (
        head.fuse_and_score(
            upi, t_m, h_m, prof_f,
            dropout_on=train_mode, rng_seed=dropout_seed, keep_prob=keep_prob(cfg),
        ),
        nodes,
    )


def _encode_hierarchical(nodes, store, space, fz, cfg, sel, prof_f):
    b = len(sel)
    l_s, l_b = fz.idx.shape[1], fz.idx.shape[2]
    hidden = int(cfg["gru"]["hidden"])
    stacked = _stacked_behavior(nodes, space)
    idx = _step_major(fz.idx, sel)
    mult = _step_major(fz.mult, sel)
    week = _step_major(fz.week, sel)
    month = _step_major(fz.month, sel)
    dt = _step_major(fz.dt, sel)
    mask = _step_major(fz.ev_mask, sel)

    time_cell = uses_time_cell(cfg)
    if time_cell:
        cell = cells.params_from(nodes, "tgru", cells.TimeAwareGruParams)
    else:
        cell = cells.params_from(nodes, "sgru", cells.GruParams)

    rows = l_s * b
    h = tape.constant(np.zeros((rows, hidden)))
    for t in range(l_b):
        m = mask[t]
        if not m.any():
            continue
        x = _behavior_features(nodes, space, cfg, stacked, idx[t], mult[t], m)
        if time_cell:
            xw = _time_features(nodes, cfg, "emb.week", week[t])
            xm = _time_features(nodes, cfg, "emb.month", month[t])
            h_new = cells.time_aware_step(cell, x, h, xw, xm, tape.constant(dt[t][:, None]))
        else:
            h_new = cells.gru_step(cell, x, h)
        h = cells.masked(h_new, h, tape.constant(m[:, None]))

    intentions = h  # row s*B + u holds T of session s for user u
    t_m = tape.narrow(intentions, 0, (l_s - 1) * b, b)

    item_cell = uses_item_cell(cfg)
    if item_cell:
        hist = cells.params_from(nodes, "ugru", cells.UserItemGruParams)
        x_item = tape.gather_rows(nodes["emb.target"], fz.target_idx[sel])
    else:
        hist = cells.params_from(nodes, "hgru", cells.GruParams)
        x_item = None

    sess_mask = fz.sess_mask[sel]
    hu = tape.constant(np.zeros((b, hidden)))
    for s in range(l_s):
        m = sess_mask[:, s]
        if not m.any():
            continue
        t_s = tape.narrow(intentions, 0, s * b, b)
        if item_cell:
            h_new = cells.user_item_step(hist, t_s, hu, prof_f, x_item)
        else:
            h_new = cells.gru_step(hist, t_s, hu)
        hu = cells.masked(h_new, hu, tape.constant(m[:, None]))
    return t_m, hu


def _encode_flat(nodes, space, fz, cfg, sel):
    hidden = int(cfg["gru"]["hidden"])
    b = len(sel)
    stacked = _stacked_behavior(nodes, space)
    cell = cells.params_from(nodes, "fgru", cells.GruParams)
    idx = fz.flat_idx[sel].T
    mult = fz.flat_mult[sel].T
    mask = fz.flat_mask[sel].T
    h = tape.constant(np.zeros((b, hidden)))
    for t in range(idx.shape[0]):
        m = mask[t]
        if not m.any():
            continue
        x = _behavior_features(nodes, space, cfg, stacked, idx[t], mult[t], m)
        h_new = cells.gru_step(cell, x, h)
        h = cells.masked(h_new, h, tape.constant(m[:, None]))
    return h


def pretrain_scores(store, prof_batch, cfg, train_mode=False, dropout_seed=0):
    """Stage-one forward: fusion head over zero-filled sequence slots."""
    nodes = store.wrap()
    hidden = int(cfg["gru"]["hidden"])
    b = prof_batch.shape[0]
    prof_f = profile_features(nodes, store, prof_batch, cfg)
    zeros = tape.constant(np.zeros((b, hidden)))
    upi = head.upi_params_from(nodes, n_layers=len(cfg["mlp"]["widths"]))
    return (
        head.fuse_and_score(
            upi, zeros, zeros, prof_f,
            dropout_on=train_mode, rng_seed=dropout_seed, keep_prob=keep_prob(cfg),
        ),
        nodes,
    )
