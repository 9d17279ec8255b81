"""Two-stage training, optimization, checkpointing and evaluation.

Stage one pre-trains the fusion head and profile path on old, profile-only
data, feeding zero vectors through the sequence slots; the loss optionally
adds the symmetric-KL pull toward a teacher's guidance probabilities. Stage
two trains the whole network end to end on new data with plain cross entropy,
starting the head from the stage-one checkpoint when transfer is enabled.

Everything is seeded: batching order, dropout masks and initialization all
derive from the run seed, so identical inputs give bit-identical checkpoints.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import head, model, tape
from .config import config_hash
from .embeddings import NormalizationStats

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_store(cls, store, skip=()):
        names = [n for n in store.trainable() if n not in skip]
        return cls(
            m={n: np.zeros_like(store.arrays[n]) for n in names},
            v={n: np.zeros_like(store.arrays[n]) for n in names},
        )


def adam_step(store, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected moment update, applied in sorted-name order."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in sorted(state.m):
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(store.arrays[name])
        g = np.asarray(g, dtype=store.arrays[name].dtype).reshape(store.arrays[name].shape)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        store.arrays[name] = store.arrays[name] - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_gradients(grads, max_norm):
    """Scale all gradients down to a global norm bound; returns the norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# ---------------------------------------------------------------- teacher


def builtin_teacher(features, labels, l2=1e-3, grad_tol=1e-6, max_iters=10000):
    """Guidance probabilities from L2-regularized logistic regression.

    Features are standardized internally; training is full-batch gradient
    descent with a Lipschitz step size, run to grad-norm convergence. The
    intercept is unregularized. Returns (probabilities, weights, intercept)
    with weights expressed in the standardized space.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.shape[0] != x.shape[0]:
        raise TrainError("teacher: feature/label shape mismatch")
    if len(np.unique(y)) < 2:
        raise TrainError("teacher: degenerate single-class data")
    stats = NormalizationStats.fit(x)
    z = stats.apply(x)
    n, p = z.shape
    # mean-loss gradient is (1/4n) z^T z Lipschitz plus the ridge term
    gram_top = float(np.linalg.eigvalsh((z.T @ z) / n).max()) if p else 0.0
    step = 1.0 / (0.25 * (gram_top + 1.0) + l2)
    w = np.zeros(p)
    b = 0.0
    for _ in range(max_iters):
        logits = z @ w + b
        probs = _sigmoid(logits)
        err = probs - y
        gw = z.T @ err / n + l2 * w
        gb = float(np.mean(err))
        gnorm = float(np.sqrt(np.sum(gw * gw) + gb * gb))
        if gnorm < grad_tol:
            break
        w -= step * gw
        b -= step * gb
    return _sigmoid(z @ w + b), w, b


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def write_teacher_file(path, user_ids, probs):
    with open(path, "w") as fh:
        fh.write("user_id,probability\n")
        for uid, q in zip(user_ids, probs):
            fh.write(f"{uid},{q!r}\n")


def read_teacher_file(path):
    table = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "user_id,probability":
            raise TrainError(f"bad teacher header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            uid, q = line.rsplit(",", 1)
            table[uid] = float(q)
    return table


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    store: model.ParamStore
    cfg_hash: str
    stage: str
    meta: dict = field(default_factory=dict)
    lineage: str | None = None

    def require_compatible(self, cfg):
        h = config_hash(cfg)
        if h != self.cfg_hash:
            raise CheckpointError(
                f"checkpoint was built under model config {self.cfg_hash}, current is {h}"
            )


def save_checkpoint(path, ckpt):
    """Write a checkpoint as canonical JSON (.json) or portable binary (.npz)."""
    path = str(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "config_hash": ckpt.cfg_hash,
        "stage": ckpt.stage,
        "lineage": ckpt.lineage,
        "meta": ckpt.meta,
        "buffers": sorted(ckpt.store.buffers),
        "shapes": {n: list(a.shape) for n, a in sorted(ckpt.store.arrays.items())},
    }
    if path.endswith(".npz"):
        np.savez(
            path,
            __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            **{n: a for n, a in ckpt.store.arrays.items()},
        )
    elif path.endswith(".json"):
        payload = dict(header)
        payload["arrays"] = {
            n: [float(v) for v in a.reshape(-1)] for n, a in sorted(ckpt.store.arrays.items())
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)
    else:
        raise CheckpointError(f"checkpoint path must end in .json or .npz: {path}")


def load_checkpoint(path):
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            arrays = {n: np.array(data[n]) for n in header["shapes"]}
    elif path.endswith(".json"):
        with open(path) as fh:
            header = json.load(fh)
        arrays = {
            n: np.array(header["arrays"][n], dtype=np.float64).reshape(header["shapes"][n])
            for n in header["shapes"]
        }
    else:
        raise CheckpointError(f"checkpoint path must end in .json or .npz: {path}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    for name, shape in header["shapes"].items():
        if list(arrays[name].shape) != shape:
            raise CheckpointError(f"array {name}: shape {arrays[name].shape} != declared {shape}")
    store = model.ParamStore(arrays, buffers=set(header["buffers"]))
    return Checkpoint(
        store=store,
        cfg_hash=header["config_hash"],
        stage=header["stage"],
        meta=header.get("meta", {}),
        lineage=header.get("lineage"),
    )


# ---------------------------------------------------------------- data prep


def apply_label_polarity(labels, cfg):
    """Map raw CSV labels so that 1 always means overdue internally."""
    labels = np.asarray(labels)
    if cfg["labels"]["positive_means"] == "normal":
        flipped = np.where(labels >= 0, 1 - labels, labels)
        return flipped
    return labels


def stratified_split(labels, val_fraction, rng):
    """Deterministic stratified train/validation index split."""
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for value in (0, 1):
        idx = np.flatnonzero(labels == value)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction))
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return np.array(sorted(train_idx), dtype=np.int64), np.array(sorted(val_idx), dtype=np.int64)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    auc: float
    ks: float

    def row(self):
        return [self.epoch, self.split, repr(self.loss), repr(self.auc), repr(self.ks)]


@dataclass
class TrainResult:
    stage: str
    checkpoint: Checkpoint
    metrics: list
    step_losses: list

    def metrics_rows(self):
        return [m.row() for m in self.metrics]


def write_metrics_csv(path, result):
    with open(path, "w") as fh:
        fh.write("epoch,split,loss,auc,ks\n")
        for row in result.metrics_rows():
            fh.write(",".join(str(v) for v in row) + "\n")


# ---------------------------------------------------------------- training loops


def _mean_loss_node(p, y_batch, weights=None, teacher=None, alpha_node=None):
    y = tape.constant(y_batch[:, None])
    if teacher is not None:
        per = head.aux_loss(p, tape.constant(teacher[:, None]), y, alpha_node)
    else:
        per = head.cross_entropy(p, y)
    if weights is not None:
        per = tape.mul(per, tape.constant(weights[:, None]))
    return tape.mean_all(per)


def _collect_grads(store, nodes, skip=()):
    grads = {}
    for name in store.trainable():
        if name in skip:
            continue
        node = nodes[name]
        grads[name] = node.grad if node.grad is not None else np.zeros_like(store.arrays[name])
    return grads


def _class_weights(labels, train_idx, enabled):
    """Inverse-prevalence weights from the training split, globally indexed."""
    if not enabled:
        return None
    labels = np.asarray(labels)
    sub = labels[train_idx]
    n = sub.size
    n_pos = max(int(np.sum(sub == 1)), 1)
    n_neg = max(int(np.sum(sub == 0)), 1)
    w = np.where(labels == 1, n / (2.0 * n_pos), n / (2.0 * n_neg))
    return w.astype(np.float64)


def _epoch_eval(forward, labels, batch_size):
    from . import metrics as metrics_mod

    scores = []
    losses = []
    n = labels.size
    for start in range(0, n, batch_size):
        sel = np.arange(start, min(start + batch_size, n))
        p = forward(sel)
        pv = p.value.reshape(-1)
        scores.append(pv)
        yv = labels[sel]
        pv_c = head.clamp_probs(pv)
        losses.append(-(yv * np.log(pv_c) + (1 - yv) * np.log(1 - pv_c)))
    scores = np.concatenate(scores) if scores else np.zeros(0)
    loss = float(np.mean(np.concatenate(losses))) if losses else float("nan")
    try:
        auc_v = metrics_mod.auc(scores, labels)
        ks_v = metrics_mod.ks(scores, labels)
    except metrics_mod.MetricError:
        auc_v, ks_v = float("nan"), float("nan")
    return loss, auc_v, ks_v, scores


def pretrain(profiles, cfg, teacher_probs=None, rng=None):
    """Stage one: fit the fusion head on profile-only records.

    ``teacher_probs`` maps user id to guidance probability; required when
    teacher guidance is enabled. Returns a TrainResult whose checkpoint holds
    only head/profile-path parameters.
    """
    if rng is None:
        rng = np.random.default_rng(int(cfg["seed"]))
    use_teacher = bool(cfg["train"]["teacher_guidance"]) and cfg["loss"]["mode"] == "ce_plus_symkl"

    labeled = [r for r in profiles if r.label is not None]
    if not labeled:
        raise TrainError("pretrain requires labeled profiles")
    feats = np.stack([r.features for r in labeled])
    labels = apply_label_polarity(np.array([r.label for r in labeled]), cfg)

    q = None
    if use_teacher:
        if teacher_probs is None:
            raise TrainError("teacher guidance enabled but no teacher probabilities given")
        missing = [r.user_id for r in labeled if r.user_id not in teacher_probs]
        if missing:
            raise TrainError(f"teacher file missing {len(missing)} users, first: {missing[0]}")
        q = head.clamp_probs(np.array([teacher_probs[r.user_id] for r in labeled]))

    split_rng = np.random.default_rng([int(cfg["seed"]), 101])
    train_idx, val_idx = stratified_split(labels, float(cfg["train"]["val_fraction"]), split_rng)

    store = model.init_pretrain_arrays(feats.shape[1], cfg, rng)
    stats = NormalizationStats.fit(feats[train_idx], epsilon=float(cfg["norm"]["epsilon"]))
    store.arrays["norm.mean"] = stats.mean
    store.arrays["norm.var"] = stats.var

    weights = _class_weights(labels, train_idx, cfg["train"]["class_weight"])

    def forward_eval(sel_local, base_idx):
        p, _ = model.pretrain_scores(store, feats[base_idx][sel_local], cfg)
        return p

    result = _run_loop(
        store=store,
        cfg=cfg,
        labels=labels,
        train_idx=train_idx,
        val_idx=val_idx,
        epochs=int(cfg["train"]["pretrain_epochs"]),
        make_train_forward=lambda sel, seed: model.pretrain_scores(
            store, feats[sel], cfg, train_mode=True, dropout_seed=seed
        ),
        make_eval_forward=lambda base_idx: (lambda sel: forward_eval(sel, base_idx)),
        weights_all=weights,
        teacher_all=q,
        stage="pretrain",
        meta={"p_features": int(feats.shape[1]), "config": model_config_view(cfg)},
    )
    return result


def train_full(events_by_user, profiles, taxonomy, cfg, init=None, rng=None, space=None, fz=None):
    """Stage two: end-to-end training on new data with behavior sequences."""
    if rng is None:
        rng = np.random.default_rng(int(cfg["seed"]))
    labeled = [r for r in profiles if r.label is not None]
    if not labeled:
        raise TrainError("training requires labeled profiles")
    labels = apply_label_polarity(np.array([r.label for r in labeled]), cfg)

    if space is None:
        space = model.build_feature_space(taxonomy, events_by_user, labeled, cfg)
    hierarchical = bool(cfg["model"]["sessions"])
    if fz is None:
        fz = model.featurize(
            events_by_user, labeled, space, cfg, hierarchical=hierarchical, flat=not hierarchical
        )

    store = model.init_full_arrays(space, cfg, rng)
    if init is not None:
        init.require_compatible(cfg)
        _transfer_pretrained(store, init)

    split_rng = np.random.default_rng([int(cfg["seed"]), 202])
    train_idx, val_idx = stratified_split(labels, float(cfg["train"]["val_fraction"]), split_rng)

    stats = NormalizationStats.fit(fz.prof[train_idx], epsilon=float(cfg["norm"]["epsilon"]))
    store.arrays["norm.mean"] = stats.mean
    store.arrays["norm.var"] = stats.var

    weights = _class_weights(labels, train_idx, cfg["train"]["class_weight"])
    skip = frozenset(
        n for n in store.trainable() if cfg["train"]["upi_freeze"] and n.startswith("upi.")
    )

    result = _run_loop(
        store=store,
        cfg=cfg,
        labels=labels,
        train_idx=train_idx,
        val_idx=val_idx,
        epochs=int(cfg["train"]["epochs"]),
        make_train_forward=lambda sel, seed: model.forward_scores(
            store, space, fz, cfg, sel, train_mode=True, dropout_seed=seed
        ),
        make_eval_forward=lambda base_idx: (
            lambda sel: model.forward_scores(store, space, fz, cfg, base_idx[sel])[0]
        ),
        weights_all=weights,
        teacher_all=None,
        stage="full",
        meta={"space": space.to_meta(), "config": model_config_view(cfg)},
        skip=skip,
        lineage=init.cfg_hash if init is not None else None,
    )
    return result


def _transfer_pretrained(store, init):
    for name, array in init.store.arrays.items():
        if name not in store.arrays:
            raise CheckpointError(f"pretrained array {name} has no slot in the full model")
        if store.arrays[name].shape != array.shape:
            raise CheckpointError(
                f"pretrained array {name}: shape {array.shape} != expected {store.arrays[name].shape}"
            )
        store.arrays[name] = array.copy()


def _run_loop(
    store,
    cfg,
    labels,
    train_idx,
    val_idx,
    epochs,
    make_train_forward,
    make_eval_forward,
    weights_all,
    teacher_all,
    stage,
    meta,
    skip=frozenset(),
    lineage=None,
):
    batch_size = int(cfg["train"]["batch_size"])
    state = AdamState.for_store(store, skip=skip)
    metrics_rows = []
    step_losses = []
    alpha_needed = teacher_all is not None

    for epoch in range(epochs):
        order_rng = np.random.default_rng([int(cfg["seed"]), 303, epoch])
        order = train_idx[order_rng.permutation(len(train_idx))]
        for b_num, start in enumerate(range(0, len(order), batch_size)):
            sel = order[start : start + batch_size]
            seed_tuple = (int(cfg["seed"]), 404, epoch, b_num)
            p, nodes = make_train_forward(sel, seed_tuple)
            alpha_node = None
            if alpha_needed:
                alpha_node = tape.softplus(nodes["loss.alpha_aux_raw"])
            loss = _mean_loss_node(
                p,
                labels[sel].astype(np.float64),
                weights=None if weights_all is None else weights_all[sel],
                teacher=None if teacher_all is None else teacher_all[sel],
                alpha_node=alpha_node,
            )
            loss_v = float(loss.value)
            if not np.isfinite(loss_v):
                raise TrainError(f"non-finite loss at epoch {epoch} batch {b_num}")
            step_losses.append(loss_v)
            tape.backward(loss)
            grads = _collect_grads(store, nodes, skip=skip)
            if not cfg["train"]["strict"]:
                clip_gradients(grads, float(cfg["train"]["clip_norm"]))
            adam_step(
                store,
                grads,
                state,
                lr=float(cfg["train"]["lr"]),
                beta1=float(cfg["train"]["beta1"]),
                beta2=float(cfg["train"]["beta2"]),
                eps=float(cfg["train"]["adam_eps"]),
            )

        for split, idx in (("train", train_idx), ("val", val_idx)):
            if len(idx) == 0:
                continue
            loss_v, auc_v, ks_v, _ = _epoch_eval(make_eval_forward(idx), labels[idx], batch_size)
            metrics_rows.append(EpochMetrics(epoch, split, loss_v, auc_v, ks_v))
            log.info("%s epoch %d %s: loss=%.5f auc=%.4f ks=%.4f", stage, epoch, split, loss_v, auc_v, ks_v)

    ckpt = Checkpoint(
        store=store, cfg_hash=config_hash(cfg), stage=stage, meta=meta, lineage=lineage
    )
    return TrainResult(stage=stage, checkpoint=ckpt, metrics=metrics_rows, step_losses=step_losses)


def model_config_view(cfg):
    """The config sections a checkpoint's shapes depend on, for portability."""
    from .config import MODEL_SECTIONS

    return {name: cfg[name] for name in MODEL_SECTIONS}


def apply_model_config(cfg, ckpt):
    """Overlay a checkpoint's stored model sections onto a resolved config."""
    import copy

    out = copy.deepcopy(cfg)
    for name, section in ckpt.meta.get("config", {}).items():
        out[name] = copy.deepcopy(section)
    return out


# ---------------------------------------------------------------- inference


def evaluate(ckpt, events_by_user, profiles, cfg, batch_size=256):
    """AUC/KS/loss of a checkpoint on labeled data. Events may be empty."""
    from . import metrics as metrics_mod

    labeled = [r for r in profiles if r.label is not None]
    if not labeled:
        raise TrainError("evaluation requires labeled profiles")
    labels = apply_label_polarity(np.array([r.label for r in labeled]), cfg)
    scores = score(ckpt, events_by_user, labeled, cfg, batch_size=batch_size)
    pv = head.clamp_probs(scores)
    loss = float(np.mean(-(labels * np.log(pv) + (1 - labels) * np.log(1 - pv))))
    return {
        "auc": metrics_mod.auc(scores, labels),
        "ks": metrics_mod.ks(scores, labels),
        "loss": loss,
        "scores": scores,
        "labels": labels,
    }


def score(ckpt, events_by_user, profiles, cfg, batch_size=256):
    """Overdue probabilities for profile records; missing histories are all-pad."""
    ckpt.require_compatible(cfg)
    store = ckpt.store
    out = np.zeros(len(profiles))
    if ckpt.stage == "pretrain":
        feats = np.stack([r.features for r in profiles])
        for start in range(0, len(profiles), batch_size):
            sel = slice(start, min(start + batch_size, len(profiles)))
            p, _ = model.pretrain_scores(store, feats[sel], cfg)
            out[sel] = p.value.reshape(-1)
        return out
    space = model.FeatureSpace.from_meta(ckpt.meta["space"])
    hierarchical = bool(cfg["model"]["sessions"])
    fz = model.featurize(
        events_by_user, profiles, space, cfg, hierarchical=hierarchical, flat=not hierarchical
    )
    for start in range(0, len(profiles), batch_size):
        sel = np.arange(start, min(start + batch_size, len(profiles)))
        p, _ = model.forward_scores(store, space, fz, cfg, sel)
        out[sel] = p.value.reshape(-1)
    return out
