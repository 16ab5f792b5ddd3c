"""Discrete-time survival math: bin assignment, likelihood loss, risk scores,
concordance index, Kaplan-Meier curves, and the two-group log-rank test.

Conventions fixed here (all are reproducibility-critical):

- Quantile edges use linear interpolation between order statistics.
- Censored subjects at time t remain at risk for events at t.
- Hazards are clamped to [1e-7, 1 - 1e-7] before taking logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, MetricUndefinedError
from .tensor import Tensor

HAZARD_CLAMP = 1e-7


@dataclass
class SurvivalLabel:
    event_time: float  # days
    event: int  # 1 = event observed, 0 = censored
    bin: int = -1  # assigned from the training fold's quantile edges


@dataclass
class KMCurve:
    times: np.ndarray  # ascending distinct uncensored event times
    survival: np.ndarray  # product-limit estimate after each time
    at_risk: np.ndarray
    events: np.ndarray


def assign_bins(train_times, train_events, n_bins: int) -> list[float]:
    """Interior quantile edges (1/n .. (n-1)/n) of the uncensored event times.

    ``bin(t)`` is the count of edges <= t, so every time lands in [0, n_bins).
    """
    times = np.asarray(train_times, dtype=np.float64)
    events = np.asarray(train_events)
    uncensored = times[events == 1]
    if uncensored.size < n_bins:
        raise ConfigError(
            f"need at least {n_bins} uncensored samples to place {n_bins} bins, "
            f"got {uncensored.size}"
        )
    qs = np.arange(1, n_bins) / n_bins
    edges = np.quantile(uncensored, qs, method="linear")
    return [float(e) for e in edges]


def bin_of(t: float, edges) -> int:
    return int(sum(1 for e in edges if e <= t))


def nll_loss(hazards: Tensor, label: SurvivalLabel) -> Tensor:
    """Negative log-likelihood of one slide under the discrete hazard model.

    Uncensored in bin t: -[log h_t + sum_{k<t} log(1 - h_k)].
    Censored in bin t:   -sum_{k<=t} log(1 - h_k).
    """
    n_bins = hazards.shape[-1]
    t = label.bin
    if not 0 <= t < n_bins:
        raise ContractError(f"label bin {t} outside [0, {n_bins})")
    h = T.clip(hazards, HAZARD_CLAMP, 1.0 - HAZARD_CLAMP)
    log_h = T.log(h)
    log_1mh = T.log(1.0 - h)
    if label.event:
        terms = [T.narrow(log_h, t, t + 1)]
        if t > 0:
            terms.append(T.narrow(log_1mh, 0, t))
    else:
        terms = [T.narrow(log_1mh, 0, t + 1)]
    total = T.sum_all(terms[0]) if len(terms) == 1 else T.sum_all(T.concat(terms, axis=0))
    return -total


def risk_score(survival: np.ndarray) -> float:
    """Negative expected-survival proxy: higher values mean riskier."""
    return float(-np.sum(np.asarray(survival, dtype=np.float64)))


def c_index(risks, times, events) -> float:
    """Concordance over comparable pairs (i with event, t_i < t_j).

    Concordant pairs (risk_i > risk_j) score 1, tied risks score 0.5.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events)
    if not (len(r) == len(t) == len(e)):
        raise ContractError("risks, times, events must have equal lengths")
    comparable = (e[:, None] == 1) & (t[:, None] < t[None, :])
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise MetricUndefinedError("no comparable pairs: concordance undefined")
    greater = r[:, None] > r[None, :]
    tied = r[:, None] == r[None, :]
    credits = (comparable & greater).sum() + 0.5 * (comparable & tied).sum()
    return float(credits / n_pairs)


def km_curve(times, events) -> KMCurve:
    """Product-limit estimator over distinct uncensored event times.

    Censored subjects at time t stay in the risk set for events at t and
    leave afterwards.
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events)
    if t.size == 0:
        raise ContractError("km_curve requires a non-empty cohort")
    event_times = np.unique(t[e == 1])
    surv = []
    at_risk = []
    deaths = []
    s = 1.0
    for et in event_times:
        n_i = int(np.sum(t >= et))
        d_i = int(np.sum((t == et) & (e == 1)))
        s *= 1.0 - d_i / n_i
        at_risk.append(n_i)
        deaths.append(d_i)
        surv.append(s)
    return KMCurve(
        times=event_times,
        survival=np.asarray(surv, dtype=np.float64),
        at_risk=np.asarray(at_risk, dtype=np.int64),
        events=np.asarray(deaths, dtype=np.int64),
    )


def chi2_to_p(chi2: float) -> float:
    """Upper tail of the 1-df chi-square distribution."""
    return math.erfc(math.sqrt(chi2 / 2.0))


def logrank_p(times_a, events_a, times_b, events_b) -> tuple[float, float]:
    """Two-group log-rank test; returns (chi2, p) with p from the 1-df
    chi-square upper tail, computed as erfc(sqrt(chi2 / 2))."""
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b)
    if ta.size == 0 or tb.size == 0:
        raise ContractError("both groups must be non-empty")
    if not (np.any(ea == 1) or np.any(eb == 1)):
        raise MetricUndefinedError("no events in either group: log-rank undefined")
    pooled = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    observed_a = 0.0
    expected_a = 0.0
    variance = 0.0
    for et in pooled:
        n_a = int(np.sum(ta >= et))
        n_b = int(np.sum(tb >= et))
        n = n_a + n_b
        d_a = int(np.sum((ta == et) & (ea == 1)))
        d_b = int(np.sum((tb == et) & (eb == 1)))
        d = d_a + d_b
        if n == 0 or d == 0:
            continue
        observed_a += d_a
        expected_a += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1)
    if variance == 0.0:
        return 0.0, 1.0
    chi2 = (observed_a - expected_a) ** 2 / variance
    return float(chi2), float(chi2_to_p(chi2))
