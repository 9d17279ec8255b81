"""Deterministic synthetic banking-behavior data with planted risk signals.

Each user draws three latent traits: impulsivity (shortens the final session
before the loan and its inter-event gaps), risk appetite (tilts the product
mix toward fund/wealth actions, larger amounts, and the riskier target
product), and end-of-month concentration (shifts session days toward day 25
and later). The overdue label is Bernoulli of a logistic score that is linear
in those latents, so the Bayes-optimal AUC is computable from the retained
per-user log odds and serves as the ceiling no model can reliably beat.

Generation is deterministic per (seed, user index): every user owns three
child streams (traits/profile, label, events), so profiles and labels are
identical whether or not events are materialized. The profile-only mode is
what stands in for the historical data predating behavior collection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .events import (
    BehaviorEvent,
    BehaviorKind,
    Category,
    ProfileRecord,
    TaxonomyConfig,
    derive_time_period,
    write_events,
    write_profiles,
)

ITEM_UNIVERSE = {
    "credit_loan": [f"credit_loan_{i:02d}" for i in range(3)],
    "deposit": [f"deposit_{i:02d}" for i in range(5)],
    "fund": [f"fund_{i:02d}" for i in range(8)],
    "wealth": [f"wealth_{i:02d}" for i in range(5)],
}

TARGET_ITEMS = ["loan_small", "loan_flex", "loan_max"]

RISKY_ACTIONS = [
    ("click", "fund", 0.45),
    ("click", "wealth", 0.20),
    ("op", "fund_purchase", 0.25),
    ("op", "wealth_purchase", 0.10),
]
SAFE_ACTIONS = [
    ("click", "deposit", 0.40),
    ("click", "credit_loan", 0.15),
    ("op", "transfer", 0.30),
    ("op", "deposit_purchase", 0.10),
    ("op", "repayment", 0.05),
]
WIDGET_CODES = ["w_confirm", "w_back", "w_home"]


def scenario_taxonomy():
    """The raw-code taxonomy matching what the generator emits."""
    mapping = {}
    for cls in ITEM_UNIVERSE:
        mapping[f"click_{cls}"] = BehaviorKind(Category.ITEM_CLICK, cls)
    for op in ["transfer", "fund_purchase", "deposit_purchase", "wealth_purchase", "repayment"]:
        mapping[f"op_{op}"] = BehaviorKind(Category.TRANSFORM_OP, op)
    for code in WIDGET_CODES:
        mapping[code] = BehaviorKind(Category.FUNCTION_WIDGET)
    return TaxonomyConfig(mapping)


@dataclass
class ScenarioConfig:
    n_users: int = 2000
    base_rate: float = 0.053
    brevity_coef: float = 0.0
    risk_coef: float = 0.0
    month_coef: float = 0.0
    noise_level: float = 0.0
    profile_rho: float = 0.55
    n_profile_features: int = 6
    sessions_mean: float = 8.0
    events_mean: float = 7.0
    loan_ts: int = 1623758400  # 2021-06-15 12:00 UTC
    seed: int = 0

    @classmethod
    def from_cfg(cls, cfg, n_users=None, seed=None):
        sc = cfg["scenario"]
        return cls(
            n_users=int(n_users if n_users is not None else sc["n_users"]),
            base_rate=float(sc["base_rate"]),
            brevity_coef=float(sc["brevity_coef"]),
            risk_coef=float(sc["risk_coef"]),
            month_coef=float(sc["month_coef"]),
            noise_level=float(sc["noise_level"]),
            profile_rho=float(sc["profile_rho"]),
            n_profile_features=int(sc["n_profile_features"]),
            sessions_mean=float(sc["sessions_mean"]),
            events_mean=float(sc["events_mean"]),
            loan_ts=int(sc["loan_ts"]),
            seed=int(seed if seed is not None else cfg["seed"]),
        )


@dataclass
class GeneratedDataset:
    user_ids: list
    profiles: list
    labels: np.ndarray
    log_odds: np.ndarray
    events_by_user: dict = field(default_factory=dict)
    traits: np.ndarray | None = None

    def write(self, events_path=None, profiles_path=None, truth_path=None):
        if profiles_path is not None:
            write_profiles(profiles_path, self.profiles)
        if events_path is not None:
            write_events(events_path, self.events_by_user)
        if truth_path is not None:
            with open(truth_path, "w") as fh:
                fh.write("user_id,log_odds\n")
                for uid, lo in zip(self.user_ids, self.log_odds):
                    fh.write(f"{uid},{lo!r}\n")


def _pick(rng, actions):
    u = rng.random()
    acc = 0.0
    for kind, name, w in actions:
        acc += w
        if u < acc:
            return kind, name
    return actions[-1][0], actions[-1][1]


def _user_traits(cfg, idx):
    rng = np.random.default_rng([cfg.seed, idx, 0])
    z = rng.standard_normal(3)  # brevity, risk, month
    noise = rng.standard_normal()
    rho = cfg.profile_rho
    tail = math.sqrt(max(1.0 - rho * rho, 0.0))
    p = cfg.n_profile_features
    feats = np.empty(p)
    base_noise = rng.standard_normal(p)
    feats[0] = rho * z[1] + tail * base_noise[0]
    feats[1] = rho * z[0] + tail * base_noise[1]
    feats[2] = rho * z[2] + tail * base_noise[2]
    feats[3:] = base_noise[3:]
    tilt = np.array([-0.4, 0.0, 0.4]) * z[1]
    w = np.exp(tilt - tilt.max())
    target = TARGET_ITEMS[rng.choice(3, p=w / w.sum())]
    return z, noise, feats, target


def _session_days(rng, cfg, z):
    """Day offsets (days before the loan) for the non-final sessions.

    Users with a high end-of-month trait resample candidate days until they
    land on month day 25 or later; distinct days keep sessions separated by
    far more than the one-hour gap.
    """
    n_sessions = 3 + rng.poisson(max(cfg.sessions_mean - 3.0, 0.1))
    n_sessions = int(min(n_sessions, 40))
    p_end = _sigmoid_scalar(0.8 * z[2])
    days = []
    used = set()
    for _ in range(n_sessions - 1):
        day = None
        for _attempt in range(8):
            cand = int(rng.integers(2, 121))
            if cand in used:
                continue
            if rng.random() < p_end:
                _, month_day = derive_time_period(cfg.loan_ts - cand * 86400)
                if month_day < 25:
                    continue
            day = cand
            break
        if day is None:
            continue
        used.add(day)
        days.append(day)
    return sorted(days, reverse=True)


def _sigmoid_scalar(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _draw_gaps(rng, n_events, mean_log_gap, sigma):
    return [
        int(np.clip(math.exp(rng.normal(mean_log_gap, sigma)), 5, 3400))
        for _ in range(max(n_events - 1, 0))
    ]


def _session_events(rng, cfg, uid, z, start_ts, gaps):
    p_risky = _sigmoid_scalar(0.9 * z[1])
    ts = start_ts
    out = []
    for i in range(len(gaps) + 1):
        if i > 0:
            ts += gaps[i - 1]
        if rng.random() < 0.25:
            code_kind, name = "widget", WIDGET_CODES[int(rng.integers(len(WIDGET_CODES)))]
        elif rng.random() < p_risky:
            code_kind, name = _pick(rng, RISKY_ACTIONS)
        else:
            code_kind, name = _pick(rng, SAFE_ACTIONS)
        week_day, month_day = derive_time_period(ts)
        if code_kind == "widget":
            ev = BehaviorEvent(uid, ts, BehaviorKind(Category.FUNCTION_WIDGET),
                               week_day=week_day, month_day=month_day)
        elif code_kind == "click":
            items = ITEM_UNIVERSE[name]
            ev = BehaviorEvent(
                uid, ts, BehaviorKind(Category.ITEM_CLICK, name),
                item_id=items[int(rng.integers(len(items)))],
                week_day=week_day, month_day=month_day,
            )
        else:
            amount = round(float(np.clip(math.exp(rng.normal(math.log(300.0) + 0.4 * z[1], 0.8)),
                                         1.01, 5e6)), 2)
            ev = BehaviorEvent(
                uid, ts, BehaviorKind(Category.TRANSFORM_OP, name), amount=amount,
                week_day=week_day, month_day=month_day,
            )
        out.append(ev)
    return out


def _user_events(cfg, idx, uid, z):
    rng = np.random.default_rng([cfg.seed, idx, 2])
    days = _session_days(rng, cfg, z)
    events = []
    for day in days:
        day_start = cfg.loan_ts - day * 86400
        start = day_start - (day_start % 86400) + int(rng.integers(8 * 3600, 22 * 3600))
        n_ev = int(np.clip(3 + rng.poisson(max(cfg.events_mean - 3.0, 0.1)), 3, 25))
        events.extend(_session_events(rng, cfg, uid, z, start, _draw_gaps(rng, n_ev, 5.0, 0.6)))

    # final session, built backward from just before the application so its
    # length and pace carry the impulsivity trait undistorted
    n_last = int(np.clip(round(10.0 - 2.5 * z[0] + 0.5 * rng.standard_normal()), 3, 25))
    mean_log_gap = float(np.clip(5.0 - 0.45 * z[0], 2.5, 7.0))
    gaps = [int(np.clip(math.exp(rng.normal(mean_log_gap, 0.35)), 5, 2400)) for _ in range(n_last - 1)]
    end_ts = cfg.loan_ts - int(rng.integers(60, 1800))
    events.extend(_session_events(rng, cfg, uid, z, end_ts - sum(gaps), gaps))
    events.sort(key=lambda e: e.ts)

    # enforce strictly increasing timestamps so downstream gaps are positive
    for i in range(1, len(events)):
        if events[i].ts <= events[i - 1].ts:
            events[i].ts = events[i - 1].ts + 1
            events[i].week_day, events[i].month_day = derive_time_period(events[i].ts)
    return events


def _calibrate_intercept(signal, base_rate):
    lo, hi = -40.0, 10.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.mean(_sigmoid_vec(mid + signal)) > base_rate:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _sigmoid_vec(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def generate(cfg, with_events=True):
    """Build one dataset; profiles and labels do not depend on ``with_events``."""
    if cfg.n_profile_features < 3:
        raise ValueError("need at least 3 profile features for the trait views")
    n = cfg.n_users
    traits = np.zeros((n, 3))
    noise = np.zeros(n)
    feats = np.zeros((n, cfg.n_profile_features))
    targets = []
    user_ids = [f"u{idx:06d}" for idx in range(n)]
    for idx in range(n):
        z, eps, f, target = _user_traits(cfg, idx)
        traits[idx] = z
        noise[idx] = eps
        feats[idx] = f
        targets.append(target)

    signal = (
        cfg.brevity_coef * traits[:, 0]
        + cfg.risk_coef * traits[:, 1]
        + cfg.month_coef * traits[:, 2]
        + cfg.noise_level * noise
    )
    intercept = _calibrate_intercept(signal, cfg.base_rate)
    log_odds = intercept + signal
    probs = _sigmoid_vec(log_odds)
    labels = np.zeros(n, dtype=np.int64)
    for idx in range(n):
        labels[idx] = int(np.random.default_rng([cfg.seed, idx, 1]).random() < probs[idx])

    profiles = [
        ProfileRecord(
            user_id=user_ids[idx],
            features=feats[idx],
            applied_item_id=targets[idx],
            loan_ts=cfg.loan_ts,
            label=int(labels[idx]),
        )
        for idx in range(n)
    ]

    events_by_user = {}
    if with_events:
        for idx in range(n):
            events_by_user[user_ids[idx]] = _user_events(cfg, idx, user_ids[idx], traits[idx])

    return GeneratedDataset(
        user_ids=user_ids,
        profiles=profiles,
        labels=labels,
        log_odds=log_odds,
        events_by_user=events_by_user,
        traits=traits,
    )


def oracle_auc(dataset):
    """AUC of the true log odds against the sampled labels: the Bayes ceiling."""
    from .metrics import auc

    return auc(dataset.log_odds, dataset.labels)
