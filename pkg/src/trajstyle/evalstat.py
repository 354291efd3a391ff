"""Episode metrics, normalised DTW and the group-comparison statistics."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import special, stats

from .trajdata import DataError, Trajectory

ALPHA = 0.05
METRICS = ("completion_time", "avg_path_deviation", "avg_force", "mrv", "dtw_to_expert")
POSTHOC_NOTE = ("pairwise comparisons use Holm-adjusted Welch t-tests (parametric branch) or "
                "Mann-Whitney U tests (rank branch) in place of Tukey HSD / Dunn")


class DegenerateInput(ValueError):
    pass


# ---------------------------------------------------------------------------
# DTW


def step_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between every row of ``a`` and every row of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d2 = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        diff = a[:, k, None] - b[None, :, k]
        d2 += diff * diff
    return np.sqrt(d2)


@numba.njit(cache=True)
def _dtw_table(cost):
    n, m = cost.shape
    D = np.empty((n, m))
    P = np.empty((n, m), dtype=np.int64)
    D[0, 0] = cost[0, 0]
    P[0, 0] = 1
    for j in range(1, m):
        D[0, j] = cost[0, j] + D[0, j - 1]
        P[0, j] = P[0, j - 1] + 1
    for i in range(1, n):
        D[i, 0] = cost[i, 0] + D[i - 1, 0]
        P[i, 0] = P[i - 1, 0] + 1
        for j in range(1, m):
            # predecessor with the lowest cost, then the shortest path
            bc, bp = D[i - 1, j - 1], P[i - 1, j - 1]
            c, p = D[i - 1, j], P[i - 1, j]
            if c < bc or (c == bc and p < bp):
                bc, bp = c, p
            c, p = D[i, j - 1], P[i, j - 1]
            if c < bc or (c == bc and p < bp):
                bc, bp = c, p
            D[i, j] = cost[i, j] + bc
            P[i, j] = bp + 1
    return D[n - 1, m - 1], P[n - 1, m - 1]


def dtw_normalized(a, b, norm: str = "path") -> float:
    """DTW distance divided by the warping-path length (or by max(len) with ``norm='max'``).

    Among minimum-cost paths the shortest is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("dtw_normalized needs nonempty series")
    if a.shape[1] != b.shape[1]:
        raise DataError(f"channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    total, length = _dtw_table(step_costs(a, b))
    if norm == "path":
        return float(total / length)
    if norm == "max":
        return float(total / max(a.shape[0], b.shape[0]))
    raise ValueError(f"unknown DTW normalisation {norm!r}")


# ---------------------------------------------------------------------------
# episode metrics


@dataclass
class EpisodeMetrics:
    completion_time: float
    avg_path_deviation: float
    avg_force: float
    mrv: float
    dtw_to_expert: float
    no_contact: bool = False

    def as_row(self) -> dict:
        return asdict(self)


def normalize_actions(actions: np.ndarray, bounds) -> np.ndarray:
    lo, hi = (np.asarray(v, dtype=np.float64) for v in bounds)
    return 2.0 * (np.asarray(actions, dtype=np.float64) - lo) / (hi - lo) - 1.0


def episode_metrics(traj: Trajectory, meta: dict | None = None, references=(), bounds=None,
                    blocks: dict | None = None, width_mm: float = 0.5, dtw_reduce: str = "mean",
                    dtw_norm: str = "path") -> EpisodeMetrics:
    """Metrics for one episode.

    Contact samples, forces and removed volume come from the simulator's
    per-observation ``blocks`` when given (true, unfiltered quantities);
    otherwise they are read off the trajectory: contact where the sensed
    force is nonzero, and volume as the integral of commanded DoC x width x
    commanded feed. Action series are compared in [-1, 1] units when
    ``bounds`` is given.
    """
    if len(traj) == 0:
        raise DataError(f"trajectory {traj.id} is empty")
    meta = meta or {}
    s = traj.states
    force_norm = np.linalg.norm(s[:, 0:3], axis=1)
    if blocks is not None:
        contact = np.asarray(blocks["contact_steps"]) > 0
        n_contact = float(np.sum(blocks["contact_steps"]))
        avg_force = float(np.sum(blocks["force_sum"]) / n_contact) if n_contact else 0.0
        mrv = float(np.sum(blocks["mrv"]))
    else:
        contact = force_norm > 0
        avg_force = float(np.mean(force_norm[contact])) if contact.any() else 0.0
        feed_mm_s = s[:, 3] * 1000.0 / 60.0
        mrv = float(np.sum(s[:, 5] * width_mm * feed_mm_s) * traj.dt)
    dev = float(np.mean(np.abs(s[contact, 4]))) if contact.any() else 0.0
    completion = float(meta.get("completion_time", len(traj) * traj.dt))
    dtw = 0.0
    refs = list(references)
    if refs:
        a = normalize_actions(traj.actions, bounds) if bounds is not None else traj.actions
        ds = [dtw_normalized(a, normalize_actions(r, bounds) if bounds is not None else r, dtw_norm)
              for r in refs]
        dtw = float(np.min(ds) if dtw_reduce == "min" else np.mean(ds))
    return EpisodeMetrics(completion, dev, avg_force, mrv, dtw, not bool(contact.any()))


# ---------------------------------------------------------------------------
# statistics


@dataclass
class StatReport:
    test: str
    statistic: float
    p_value: float
    df: tuple = ()
    effect_sizes: dict = field(default_factory=dict)
    transform: str = "none"
    note: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["df"] = list(self.df)
        return d


def _groups(groups) -> list[np.ndarray]:
    out = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(out) < 2:
        raise DegenerateInput("need at least two groups")
    for i, g in enumerate(out):
        if g.size < 2:
            raise DegenerateInput(f"group {i} has fewer than two samples")
        if not np.all(np.isfinite(g)):
            raise DegenerateInput(f"group {i} has non-finite values")
    return out


def f_sf(F: float, d1: float, d2: float) -> float:
    """Upper tail of the F distribution via the regularised incomplete beta."""
    if math.isinf(F):
        return 0.0
    if F <= 0:
        return 1.0
    return float(special.betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * F)))


def chi2_sf(x: float, df: float) -> float:
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def t_sf2(t: float, df: float) -> float:
    """Two-sided p-value of Student's t."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def anova_oneway(groups) -> StatReport:
    g = _groups(groups)
    k = len(g)
    n = sum(x.size for x in g)
    grand = np.concatenate(g).mean()
    ssb = sum(x.size * (x.mean() - grand) ** 2 for x in g)
    ssw = sum(np.sum((x - x.mean()) ** 2) for x in g)
    d1, d2 = k - 1, n - k
    if ssw == 0:
        if ssb == 0:
            return StatReport("anova", 0.0, 1.0, (d1, d2), note="all observations equal")
        return StatReport("anova", math.inf, 0.0, (d1, d2), note="zero within-group variance")
    F = (ssb / d1) / (ssw / d2)
    return StatReport("anova", float(F), f_sf(F, d1, d2), (d1, d2))


def rank_average(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ranks (1-based, ties averaged) and the sizes of the tie groups."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    edges = np.flatnonzero(np.diff(xs) != 0) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [xs.size]])
    ranks = np.empty(x.size)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks, ends - starts


def kruskal_wallis(groups) -> StatReport:
    g = _groups(groups)
    pooled = np.concatenate(g)
    N = pooled.size
    ranks, ties = rank_average(pooled)
    H = 0.0
    lo = 0
    for x in g:
        r = ranks[lo:lo + x.size]
        H += r.sum() ** 2 / x.size
        lo += x.size
    H = 12.0 / (N * (N + 1)) * H - 3.0 * (N + 1)
    corr = 1.0 - np.sum(ties.astype(float) ** 3 - ties) / (N**3 - N)
    df = len(g) - 1
    if corr <= 0:
        return StatReport("kruskal", 0.0, 1.0, (df,), note="all observations tied")
    H = max(H / corr, 0.0)
    return StatReport("kruskal", float(H), chi2_sf(H, df), (df,))


def levene(groups) -> StatReport:
    """Brown-Forsythe variant: ANOVA on absolute deviations from group medians."""
    g = _groups(groups)
    z = [np.abs(x - np.median(x)) for x in g]
    r = anova_oneway(z)
    return StatReport("levene-median", r.statistic, r.p_value, r.df, note=r.note)


def hedges_j(df: float) -> float:
    """Exact small-sample correction factor Gamma(df/2) / (sqrt(df/2) Gamma((df-1)/2))."""
    return float(math.exp(special.gammaln(df / 2.0) - special.gammaln((df - 1.0) / 2.0)) / math.sqrt(df / 2.0))


def hedges_g(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        raise DegenerateInput("Hedges' g needs at least two samples per group")
    df = n1 + n2 - 2
    sp = math.sqrt(((n1 - 1) * a.var(ddof=1) + (n2 - 1) * b.var(ddof=1)) / df)
    diff = a.mean() - b.mean()
    if sp == 0:
        if diff == 0:
            return 0.0
        raise DegenerateInput("zero pooled variance with a nonzero mean difference")
    return float(diff / sp * hedges_j(df))


def welch_t(a, b) -> tuple[float, float, float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        return (0.0 if diff == 0 else math.copysign(math.inf, diff)), float(a.size + b.size - 2), (
            1.0 if diff == 0 else 0.0)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(t), float(df), t_sf2(t, df)


def holm(pvalues) -> np.ndarray:
    """Holm step-down adjusted p-values (monotone, capped at 1)."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="mergesort")
    adj = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[i]))
        adj[i] = running
    return adj


def pairwise_posthoc(groups: dict, method: str = "welch") -> list[StatReport]:
    """All pairwise comparisons with Holm-adjusted p-values and Hedges' g."""
    names = list(groups)
    raw = []
    for a, b in itertools.combinations(names, 2):
        x, y = np.asarray(groups[a], float), np.asarray(groups[b], float)
        if method == "welch":
            t, df, p = welch_t(x, y)
            raw.append((a, b, "welch-t", t, p, (df,)))
        elif method == "mannwhitney":
            res = stats.mannwhitneyu(x, y, alternative="two-sided")
            raw.append((a, b, "mann-whitney", float(res.statistic), float(res.pvalue), ()))
        else:
            raise ValueError(f"unknown post-hoc method {method!r}")
    adj = holm([r[4] for r in raw]) if raw else []
    out = []
    for (a, b, test, st, _, df), p in zip(raw, adj):
        try:
            g = hedges_g(groups[a], groups[b])
        except DegenerateInput:
            g = float("nan")
        out.append(StatReport(f"{test}:{a}|{b}", st, float(p), df, {f"{a}|{b}": g}, note="holm-adjusted"))
    return out


def box_cox_llf(x: np.ndarray, lmbda: float) -> float:
    """Profile log-likelihood of the Box-Cox family at ``lmbda``."""
    logx = np.log(x)
    n = x.size
    if abs(lmbda) < 1e-12:
        y = logx
    else:
        y = np.expm1(lmbda * logx) / lmbda
    var = np.mean((y - y.mean()) ** 2)
    if var <= 0:
        return -math.inf
    return float((lmbda - 1.0) * logx.sum() - 0.5 * n * math.log(var))


def golden_max(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv * (b - a)
    d = a + inv * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def box_cox(x, lmbda: float | None = None, bounds=(-5.0, 5.0)) -> tuple[np.ndarray, float]:
    """Transform ``y = x**lmbda - 1`` (``log x`` at 0); lmbda defaults to the likelihood maximiser."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise DegenerateInput("Box-Cox needs strictly positive finite data")
    if lmbda is None:
        lmbda = golden_max(lambda l: box_cox_llf(x, l), *bounds)
    y = np.log(x) if lmbda == 0 else np.power(x, lmbda) - 1.0
    return y, float(lmbda)


# ---------------------------------------------------------------------------
# comparison suite


def compare_groups(groups: dict, alpha: float = ALPHA) -> dict:
    """Omnibus test plus post-hoc comparisons for one metric.

    Equal variances (Levene) on the raw data, or after a pooled Box-Cox
    transform, select ANOVA with Welch post-hoc tests; otherwise the rank
    branch (Kruskal-Wallis, Mann-Whitney) is used.
    """
    names = list(groups)
    data = [np.asarray(groups[n], dtype=np.float64) for n in names]
    lev = levene(data)
    transform = "none"
    use = data
    if lev.p_value < alpha:
        pooled = np.concatenate(data)
        if np.all(pooled > 0):
            _, lam = box_cox(pooled)
            use = [box_cox(d, lam)[0] for d in data]
            lev = levene(use)
            transform = f"box-cox lambda={lam:.6g}"
    if lev.p_value >= alpha:
        omni = anova_oneway(use)
        post = pairwise_posthoc(dict(zip(names, use)), "welch")
    else:
        omni = kruskal_wallis(data)
        post = pairwise_posthoc(dict(zip(names, data)), "mannwhitney")
        transform = "none (rank test)"
    omni.transform = transform
    for r in post:
        r.transform = transform
    # effect sizes on the untransformed metric for interpretability
    for r in post:
        key = next(iter(r.effect_sizes))
        a, b = key.split("|")
        try:
            r.effect_sizes[key] = hedges_g(groups[a], groups[b])
        except DegenerateInput:
            r.effect_sizes[key] = float("nan")
    return {"levene": lev.to_dict(), "omnibus": omni.to_dict(), "posthoc": [r.to_dict() for r in post],
            "note": POSTHOC_NOTE}


# ---------------------------------------------------------------------------
# reports

METRIC_COLUMNS = ("strategy", "material", "geometry", "completion_time", "path_dev", "avg_force", "mrv",
                  "dtw", "seed", "fault")
_COL_TO_METRIC = {"completion_time": "completion_time", "path_dev": "avg_path_deviation",
                  "avg_force": "avg_force", "mrv": "mrv", "dtw": "dtw_to_expert"}


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for c in ("completion_time", "path_dev", "avg_force", "mrv", "dtw"):
            r[c] = float(r[c])
        r["seed"] = int(r["seed"])
        r["fault"] = r["fault"] in ("True", "true", "1")
    return rows


def summarize(rows: list[dict], by=("strategy",)) -> list[dict]:
    keys = sorted({tuple(r[k] for k in by) for r in rows})
    out = []
    for key in keys:
        sel = [r for r in rows if tuple(r[k] for k in by) == key]
        rec = dict(zip(by, key))
        rec["n"] = len(sel)
        for c in _COL_TO_METRIC:
            v = np.array([r[c] for r in sel], dtype=np.float64)
            rec[f"{c}_mean"] = float(v.mean())
            rec[f"{c}_std"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out.append(rec)
    return out


def build_report(rows: list[dict]) -> dict:
    strategies = sorted({r["strategy"] for r in rows})
    report = {"strategies": strategies, "summary": summarize(rows),
              "summary_by_geometry": summarize(rows, ("strategy", "geometry")), "statistics": {}}
    if len(strategies) < 2:
        report["note"] = "single strategy: statistical comparison skipped"
        return report
    for col in _COL_TO_METRIC:
        groups = {s: [r[col] for r in rows if r["strategy"] == s] for s in strategies}
        try:
            report["statistics"][col] = compare_groups(groups)
        except DegenerateInput as exc:
            report["statistics"][col] = {"skipped": str(exc)}
    report["note"] = POSTHOC_NOTE
    return report


def format_report(report: dict) -> str:
    cols = list(_COL_TO_METRIC)
    lines = ["strategy".ljust(16) + "".join(c.rjust(22) for c in cols)]
    for rec in report["summary"]:
        cells = "".join(f"{rec[c + '_mean']:>12.4g} ±{rec[c + '_std']:<9.3g}" for c in cols)
        lines.append(rec["strategy"].ljust(16) + cells)
    lines.append("")
    if report["statistics"]:
        for col, res in report["statistics"].items():
            if "skipped" in res:
                lines.append(f"{col}: skipped ({res['skipped']})")
                continue
            o = res["omnibus"]
            lines.append(f"{col}: {o['test']} stat={o['statistic']:.4g} p={o['p_value']:.4g} "
                         f"transform={o['transform']}")
            for p in res["posthoc"]:
                (pair, g), = p["effect_sizes"].items()
                lines.append(f"    {pair:<34} p_holm={p['p_value']:.4g} g={g:.3f}")
    lines.append(report.get("note", ""))
    return "\n".join(lines) + "\n"


def write_report(report: dict, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (d / "report.txt").write_text(format_report(report))
    with open(d / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = ["strategy", "geometry", "n"] + [f"{c}_{s}" for c in _COL_TO_METRIC for s in ("mean", "std")]
        w.writerow(keys)
        for rec in report["summary_by_geometry"]:
            w.writerow([rec[k] if not isinstance(rec[k], float) else repr(rec[k]) for k in keys])
