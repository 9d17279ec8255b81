"""Vectorization of behaviors, time periods and profiles, plus the per-field
transform applied on top.

Item clicks look up a per-item row in their product class table; transform
operations use one row per operation class scaled by ln(amount); all widget
clicks share a single row; week day and month day each have their own small
table. Every field (one per item-click product class, one for operations, one
for widgets, one for time periods, one for the profile vector) owns a square
matrix and bias applied as relu(w @ e + b), so field-wise features are
elementwise nonnegative. Pad slots are exactly zero and get no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FIELD_OP = "op"
FIELD_WIDGET = "widget"
FIELD_TIME = "time"
FIELD_PROFILE = "profile"
UNKNOWN_ITEM = "<unk>"


def glorot_uniform(rng, fan_in, fan_out, shape):
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def item_field(product_class):
    return f"item:{product_class}"


@dataclass
class EmbeddingTables:
    """Lookup tables for single-event embedding.

    ``item`` maps product class to an array whose last row is the unseen-item
    fallback; ``item_rows`` maps item ids to rows. ``op`` has one row per
    operation class, ``widget`` one row per widget kind (a single row under
    the default merge). Week rows are indexed by week_day-1, month rows by
    month_day-1.
    """

    item: dict
    item_rows: dict
    op: np.ndarray
    op_rows: dict
    widget: np.ndarray
    widget_rows: dict
    week: np.ndarray
    month: np.ndarray

    @property
    def dim(self):
        return self.op.shape[1]


def embed_event(ev, tables):
    """Vector for one event; ``None`` stands for a pad slot and embeds to zero."""
    if ev is None:
        return np.zeros(tables.dim)
    cat = ev.kind.category.value
    if cat == "transform_op":
        assert ev.amount is not None and ev.amount > 0, "transform op requires positive amount"
        row = tables.op[tables.op_rows[ev.kind.cls]]
        return row * math.log(ev.amount)
    if cat == "item_click":
        rows = tables.item_rows[ev.kind.cls]
        table = tables.item[ev.kind.cls]
        return np.array(table[rows.get(ev.item_id, table.shape[0] - 1)])
    return np.array(tables.widget[tables.widget_rows.get(ev.kind.key, 0)])


@dataclass
class FieldMatrices:
    """One (w, b) pair per field key; bias may be disabled globally."""

    w: dict
    b: dict
    use_bias: bool = True


def field_aware(e, field_key, mats):
    """relu(w_field @ e + b_field); output is elementwise nonnegative."""
    z = mats.w[field_key] @ e
    if mats.use_bias:
        z = z + mats.b[field_key]
    return np.maximum(z, 0.0)


@dataclass
class NormalizationStats:
    """Per-feature mean and population variance from the training split only."""

    mean: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-8

    @classmethod
    def fit(cls, features, epsilon=1e-8):
        x = np.asarray(features, dtype=np.float64)
        return cls(mean=x.mean(axis=0), var=x.var(axis=0), epsilon=epsilon)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.epsilon)


def normalize_profile(features, stats, mats):
    """Standardize a profile vector, then map it through the profile field."""
    return field_aware(stats.apply(features), FIELD_PROFILE, mats)
