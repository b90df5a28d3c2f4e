"""Binary classification metrics, one-way ANOVA, Tukey HSD and eval reports."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy import special, stats

from ._qtable import K_MAX, K_MIN, Q_TABLE

METRIC_ORDER = ("F1", "MCC", "AUPRC", "B.ACC", "AUROC", "ACC")
IMBALANCE_CAVEAT = "Metrics not intended for imbalanced datasets."
CAVEAT_METRICS = ("AUROC", "ACC")


class MetricError(ValueError):
    pass


class DegenerateError(MetricError):
    pass


class UnsupportedError(MetricError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise MetricError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_scores(cls, scores, labels, threshold: float = 0.5) -> "ConfusionCounts":
        pred = np.asarray(scores) >= threshold
        y = np.asarray(labels).astype(bool)
        return cls(int((pred & y).sum()), int((~pred & ~y).sum()),
                   int((pred & ~y).sum()), int((~pred & y).sum()))


def _require_total(c: ConfusionCounts) -> None:
    if c.total == 0:
        raise MetricError("metrics are undefined on an empty confusion matrix")


def f1(c: ConfusionCounts) -> float:
    _require_total(c)
    den = 2 * c.tp + c.fp + c.fn
    if den == 0:
        warnings.warn("F1 is 0/0 (no positives present or predicted); scoring 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return 2 * c.tp / den


def acc(c: ConfusionCounts) -> float:
    _require_total(c)
    return (c.tp + c.tn) / c.total


def bacc(c: ConfusionCounts) -> float:
    """Mean of TPR and TNR; a rate with an empty class is left out of the mean."""
    _require_total(c)
    rates = []
    if c.tp + c.fn:
        rates.append(c.tp / (c.tp + c.fn))
    if c.tn + c.fp:
        rates.append(c.tn / (c.tn + c.fp))
    return sum(rates) / len(rates)


def mcc(c: ConfusionCounts) -> float:
    _require_total(c)
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)


def _scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise MetricError("scores and labels must have equal length")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate P(s_pos > s_neg) + P(s_pos = s_neg) / 2 via mid-ranks."""
    s, y = _scored(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = stats.rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def score_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    c = ConfusionCounts.from_scores(scores, labels, threshold)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = {"F1": f1(c), "MCC": mcc(c), "B.ACC": bacc(c), "ACC": acc(c)}
    y = np.asarray(labels).astype(bool)
    out["AUPRC"] = auprc(scores, labels) if y.any() else float("nan")
    out["AUROC"] = auroc(scores, labels) if y.any() and (~y).any() else float("nan")
    return {k: out[k] for k in METRIC_ORDER}


# -- significance testing ----------------------------------------------------------

@dataclass
class AnovaResult:
    F: float
    p: float
    df_between: int
    df_within: int
    ms_within: float


def anova_oneway(groups: Sequence[Sequence[float]]) -> AnovaResult:
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    k = len(groups)
    if k < 2 or any(g.size < 2 for g in groups):
        raise DegenerateError("ANOVA needs at least two groups of at least two observations")
    n = sum(g.size for g in groups)
    grand = np.concatenate(groups).mean()
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    dfb, dfw = k - 1, n - k
    if ssw <= 0:
        raise DegenerateError("within-group variance is zero")
    msw = ssw / dfw
    F = (ssb / dfb) / msw
    # upper tail of F(dfb, dfw) via the regularised incomplete beta
    p = float(special.betainc(dfw / 2.0, dfb / 2.0, dfw / (dfw + dfb * F)))
    return AnovaResult(float(F), p, dfb, dfw, float(msw))


def studentized_range_q(k: int, df: float, alpha: float = 0.05) -> float:
    """Tabulated critical value; df between table rows uses the next lower row."""
    if alpha not in Q_TABLE:
        raise UnsupportedError(f"alpha {alpha} not tabulated (have {sorted(Q_TABLE)})")
    if not K_MIN <= k <= K_MAX:
        raise UnsupportedError(f"k = {k} groups outside the table range {K_MIN}..{K_MAX}")
    rows = sorted(Q_TABLE[alpha])
    if df < rows[0]:
        raise UnsupportedError(f"df = {df} below the table range")
    row = max(r for r in rows if r <= df)
    return Q_TABLE[alpha][row][k - K_MIN]


@dataclass
class TukeyPair:
    group_a: str
    group_b: str
    mean_diff: float
    hsd: float
    significant: bool


def tukey_hsd(groups: Sequence[Sequence[float]], names: Sequence[str] | None = None,
              alpha: float = 0.05) -> list[TukeyPair]:
    """Pairwise Tukey(-Kramer) comparisons; HSD = q * sqrt(MSW / 2 * (1/n_a + 1/n_b))."""
    names = list(names) if names is not None else [f"g{i}" for i in range(len(groups))]
    res = anova_oneway(groups)
    q = studentized_range_q(len(groups), res.df_within, alpha)
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    out = []
    for i, j in combinations(range(len(arrays)), 2):
        diff = float(arrays[i].mean() - arrays[j].mean())
        hsd = q * math.sqrt(res.ms_within / 2.0 * (1.0 / arrays[i].size + 1.0 / arrays[j].size))
        out.append(TukeyPair(names[i], names[j], diff, hsd, abs(diff) > hsd))
    return out


# -- reports -------------------------------------------------------------------

@dataclass
class MethodResult:
    name: str
    per_seed: list[dict] = field(default_factory=list)
    params: int | None = None
    flops: int | None = None

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in METRIC_ORDER:
            vals = np.array([row[m] for row in self.per_seed], dtype=np.float64)
            out[m] = {"mean": float(np.mean(vals)),
                      "std": float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0}
        return out


@dataclass
class EvalReport:
    methods: list[MethodResult]
    threshold: float = 0.5
    anova: dict = field(default_factory=dict)
    tukey: dict = field(default_factory=dict)
    caveats: dict = field(default_factory=lambda: {m: IMBALANCE_CAVEAT for m in CAVEAT_METRICS})

    def aggregate(self) -> dict:
        return {m.name: m.aggregate() for m in self.methods}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregate"] = self.aggregate()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        methods = [MethodResult(**m) for m in d["methods"]]
        return cls(methods, d["threshold"], d["anova"], d["tukey"], d["caveats"])

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        """Tables 2-3 layout: percentages as mean±std, imbalance-caveat columns daggered."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [m + ("†" if m in CAVEAT_METRICS else "") for m in METRIC_ORDER]
                   + ["params", "flops"])
        for method in self.methods:
            agg = method.aggregate()
            w.writerow([method.name]
                       + [f"{100 * agg[m]['mean']:.1f}±{100 * agg[m]['std']:.1f}" for m in METRIC_ORDER]
                       + [method.params if method.params is not None else "",
                          method.flops if method.flops is not None else ""])
        w.writerow([f"† {IMBALANCE_CAVEAT}"])
        return buf.getvalue()


def compare_methods(methods: Sequence[MethodResult], alpha: float = 0.05) -> tuple[dict, dict]:
    """ANOVA per metric across methods, then Tukey HSD where the ANOVA is significant."""
    anova, tukey = {}, {}
    if len(methods) < 2:
        return anova, tukey
    names = [m.name for m in methods]
    for metric in METRIC_ORDER:
        groups = [[row[metric] for row in m.per_seed] for m in methods]
        try:
            res = anova_oneway(groups)
        except DegenerateError as exc:
            anova[metric] = {"error": str(exc)}
            continue
        anova[metric] = asdict(res)
        if res.p < alpha:
            try:
                tukey[metric] = [asdict(p) for p in tukey_hsd(groups, names, alpha)]
            except UnsupportedError as exc:
                tukey[metric] = {"error": str(exc)}
    return anova, tukey


def evaluate(runs: Mapping[str, Sequence[tuple[int, np.ndarray, np.ndarray]]], threshold: float = 0.5,
             complexity: Mapping[str, tuple[int, int]] | None = None, alpha: float = 0.05) -> EvalReport:
    """Build a report from ``{method: [(seed, scores, labels), ...]}``."""
    methods = []
    for name, trials in runs.items():
        rows = []
        for seed, scores, labels in trials:
            row = {"seed": int(seed)}
            row.update(score_metrics(scores, labels, threshold))
            rows.append(row)
        params, flops = (complexity or {}).get(name, (None, None))
        methods.append(MethodResult(name, rows, params, flops))
    anova, tukey = compare_methods(methods, alpha)
    return EvalReport(methods, threshold, anova, tukey)
