"""Gap-based session segmentation and fixed-size window assembly.

A session is a maximal run of events whose consecutive gaps stay within the
threshold (default one hour; a gap exactly equal to the threshold does not
split). Windows keep the most recent effective sessions, truncate each to its
latest events, and head-pad both levels so every user encodes to the same
dense shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(slots=True)
class Session:
    """Events of one session plus the intervals between consecutive kept events.

    ``intervals[i]`` is the gap in seconds between events[i] and events[i+1];
    the first event of a session has an implicit gap of zero. ``pad_count``
    head slots are reserved padding once the window is built.
    """

    events: list
    intervals: list
    session_start_ts: int
    pad_count: int = 0

    @property
    def size(self):
        return len(self.events)


@dataclass(slots=True)
class SessionWindow:
    """Up to ``max_sessions`` sessions ordered oldest to newest, head-padded."""

    sessions: list
    session_pad_count: int


def segment(events, gap_s=3600):
    """Split a time-sorted event list wherever the gap exceeds ``gap_s``."""
    sessions = []
    cur = None
    prev_ts = None
    for ev in events:
        if cur is not None and ev.ts - prev_ts <= gap_s:
            cur.intervals.append(ev.ts - prev_ts)
            cur.events.append(ev)
        else:
            cur = Session(events=[ev], intervals=[], session_start_ts=ev.ts)
            sessions.append(cur)
        prev_ts = ev.ts
    return sessions


def _pad_session(max_events):
    return Session(events=[], intervals=[], session_start_ts=0, pad_count=max_events)


def build_window(raw_sessions, loan_ts, min_len=3, max_sessions=50, max_events=25):
    """Filter, truncate and pad raw sessions into a fixed-shape window.

    Events after ``loan_ts`` are dropped first (they postdate the decision
    point), then sessions shorter than ``min_len`` are discarded as noise,
    the latest ``max_sessions`` survivors are kept, and each is cut to its
    latest ``max_events`` events with head padding making up the difference.
    """
    kept = []
    for s in raw_sessions:
        n_ok = 0
        for ev in s.events:
            if ev.ts > loan_ts:
                break
            n_ok += 1
        if n_ok < min_len:
            continue
        events = s.events[:n_ok]
        intervals = s.intervals[: n_ok - 1]
        if len(events) > max_events:
            events = events[-max_events:]
            intervals = intervals[-(max_events - 1):]
        kept.append(
            Session(
                events=events,
                intervals=intervals,
                session_start_ts=events[0].ts,
                pad_count=max_events - len(events),
            )
        )
    kept = kept[-max_sessions:]
    pad = max_sessions - len(kept)
    return SessionWindow(sessions=[_pad_session(max_events) for _ in range(pad)] + kept,
                         session_pad_count=pad)
