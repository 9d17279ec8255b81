"""Variant matrix: the model family compared in the ablation study.

Variants toggle the structural pieces independently: the two-stage transfer
(``no_pretrain``), teacher guidance inside stage one (``no_teacher``), session
hierarchy (``flat_gru`` feeds the raw event sequence to one plain cell), the
custom time/user-item cells (``plain_cells`` swaps in textbook cells), and
``profile_only`` which is just the stage-one head trained on the new data's
profiles. ``run_variant`` executes the full two-stage protocol for one variant
and evaluates it on a held-out set.
"""

from __future__ import annotations

import copy
import dataclasses
import logging

import numpy as np

from . import synthetic, training

log = logging.getLogger(__name__)

DEFAULT_VARIANTS = ("full", "plain_cells", "no_pretrain", "no_teacher", "flat_gru")

VARIANT_FLAGS = {
    "full": {},
    "plain_cells": {("gru", "time_aware"): False, ("gru", "user_item_aware"): False},
    "no_pretrain": {("train", "aux_pretrain"): False},
    "no_teacher": {("train", "teacher_guidance"): False},
    "flat_gru": {("model", "sessions"): False},
    "profile_only": {},
}


def variant_config(cfg, name):
    if name not in VARIANT_FLAGS:
        raise ValueError(f"unknown variant {name!r}; known: {sorted(VARIANT_FLAGS)}")
    out = copy.deepcopy(cfg)
    for (section, key), value in VARIANT_FLAGS[name].items():
        out[section][key] = value
    return out


def make_datasets(cfg, n_train=None, n_test=None, n_old=None, seed=None):
    """Train/test/old datasets from the scenario section, on disjoint seed streams."""
    base = synthetic.ScenarioConfig.from_cfg(cfg, seed=seed)
    n_train = int(n_train if n_train is not None else base.n_users)
    n_test = int(n_test if n_test is not None else max(base.n_users // 4, 1))
    n_old = int(n_old if n_old is not None else cfg["scenario"]["n_old_users"] or 2 * n_train)
    train = synthetic.generate(dataclasses.replace(base, n_users=n_train, seed=base.seed * 3 + 0))
    test = synthetic.generate(dataclasses.replace(base, n_users=n_test, seed=base.seed * 3 + 1))
    old = synthetic.generate(
        dataclasses.replace(base, n_users=n_old, seed=base.seed * 3 + 2), with_events=False
    )
    return train, test, old


def teacher_table(profiles, cfg):
    """Builtin-teacher guidance probabilities keyed by user id."""
    labeled = [r for r in profiles if r.label is not None]
    feats = np.stack([r.features for r in labeled])
    labels = training.apply_label_polarity(np.array([r.label for r in labeled]), cfg)
    probs, _, _ = training.builtin_teacher(
        feats,
        labels,
        l2=float(cfg["teacher"]["l2"]),
        grad_tol=float(cfg["teacher"]["grad_tol"]),
        max_iters=int(cfg["teacher"]["max_iters"]),
    )
    return {r.user_id: float(q) for r, q in zip(labeled, probs)}


def run_variant(name, cfg, taxonomy, train_ds, old_ds):
    """Train one variant end to end; returns (checkpoint, variant_cfg, results)."""
    vcfg = variant_config(cfg, name)
    results = {}

    if name == "profile_only":
        teacher = None
        if vcfg["train"]["teacher_guidance"]:
            teacher = teacher_table(train_ds.profiles, vcfg)
        res = training.pretrain(train_ds.profiles, vcfg, teacher_probs=teacher)
        results["pretrain"] = res
        return res.checkpoint, vcfg, results

    init = None
    if vcfg["train"]["aux_pretrain"]:
        teacher = None
        if vcfg["train"]["teacher_guidance"]:
            teacher = teacher_table(old_ds.profiles, vcfg)
        pre = training.pretrain(old_ds.profiles, vcfg, teacher_probs=teacher)
        results["pretrain"] = pre
        init = pre.checkpoint

    res = training.train_full(
        train_ds.events_by_user, train_ds.profiles, taxonomy, vcfg, init=init
    )
    results["full"] = res
    return res.checkpoint, vcfg, results


def evaluate_variant(ckpt, vcfg, test_ds):
    return training.evaluate(ckpt, test_ds.events_by_user, test_ds.profiles, vcfg)


def ablation_table(cfg, variants=DEFAULT_VARIANTS, taxonomy=None, datasets=None):
    """Run every requested variant on one scenario; returns result rows."""
    if taxonomy is None:
        taxonomy = synthetic.scenario_taxonomy()
    if datasets is None:
        datasets = make_datasets(cfg)
    train_ds, test_ds, old_ds = datasets
    rows = []
    for name in variants:
        log.info("ablation: running variant %s", name)
        ckpt, vcfg, _ = run_variant(name, cfg, taxonomy, train_ds, old_ds)
        ev = evaluate_variant(ckpt, vcfg, test_ds)
        rows.append({"variant": name, "auc": ev["auc"], "ks": ev["ks"], "loss": ev["loss"]})
    return rows
