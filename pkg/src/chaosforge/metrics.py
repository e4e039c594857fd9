"""Forecast quality metrics: short-term pointwise error plus long-term
attractor fidelity through fractal dimension and state-distribution KL."""

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .util import DataError, NumericalError, make_rng

# estimator knobs, recorded in every report so runs are self-describing
ESTIMATOR_PARAMS = {
    "theiler_window": 10,
    "n_radii": 20,
    "fit_window": 10,
    "radius_percentiles": (1.0, 50.0),
    "gmm_components": 8,
}

METRIC_NAMES = ("smape_128", "smape_512", "d_frac", "d_stsp")


def smape(pred, true):
    """Symmetric mean absolute percentage error in [0, 200].

    Per timestep: L1 error over channels divided by the sum of the two L1
    magnitudes; a 0/0 timestep contributes 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 2 or pred.shape[0] < 1:
        raise DataError(f"smape expects matching (T, V) arrays, got {pred.shape} vs {true.shape}")
    num = np.sum(np.abs(true - pred), axis=1)
    den = np.sum(np.abs(true), axis=1) + np.sum(np.abs(pred), axis=1)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(200.0 / pred.shape[0] * np.sum(ratio))


# ---------------------------------------------------------------------------
# correlation dimension


def _pair_distance_percentiles(points, lo, hi, seed):
    """1st/50th percentile pair distances; subsampled above ~3e6 pairs."""
    n = points.shape[0]
    if n * (n - 1) // 2 <= 3_000_000:
        from scipy.spatial.distance import pdist

        d = pdist(points)
    else:
        rng = make_rng(seed, "corrdim-radii")
        i = rng.integers(0, n, size=2_000_000)
        j = rng.integers(0, n, size=2_000_000)
        keep = i != j
        d = np.linalg.norm(points[i[keep]] - points[j[keep]], axis=1)
    d = d[d > 0]
    if d.size == 0:
        raise DataError("degenerate point cloud: zero diameter")
    return float(np.percentile(d, lo)), float(np.percentile(d, hi))


def correlation_dimension(points, seed=0):
    """Slope of log C(r) vs log r over the most-linear radius window.

    C(r) counts pairs closer than r, excluding pairs within the Theiler
    window of each other in time. Radii are log-spaced between the 1st and
    50th percentile of pairwise distances, so the estimate is invariant to
    uniform rescaling of the cloud.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1000:
        raise DataError("correlation dimension needs at least 1000 points as (N, V)")
    n = points.shape[0]
    theiler = ESTIMATOR_PARAMS["theiler_window"]
    r_lo, r_hi = _pair_distance_percentiles(
        points, *ESTIMATOR_PARAMS["radius_percentiles"], seed
    )
    if not r_hi > r_lo > 0:
        raise DataError("degenerate point cloud: no usable radius range")
    radii = np.geomspace(r_lo, r_hi, ESTIMATOR_PARAMS["n_radii"])
    tree = cKDTree(points)
    ordered = tree.count_neighbors(tree, radii)
    counts = (ordered - n) / 2.0  # unordered pairs, self-pairs removed
    # take out temporally adjacent pairs
    excluded = 0
    for k in range(1, theiler + 1):
        dk = np.sort(np.linalg.norm(points[k:] - points[:-k], axis=1))
        counts -= np.searchsorted(dk, radii, side="right")
        excluded += n - k
    total = n * (n - 1) / 2.0 - excluded
    C = counts / total
    valid = C > 0
    log_r = np.log(radii[valid])
    log_c = np.log(C[valid])
    w = ESTIMATOR_PARAMS["fit_window"]
    if log_r.size < 3:
        raise NumericalError("too few populated radii for a dimension fit")
    if log_r.size <= w:
        slope, _ = np.polyfit(log_r, log_c, 1)
        return float(slope)
    best = (-np.inf, 0.0)
    for start in range(log_r.size - w + 1):
        xs = log_r[start : start + w]
        ys = log_c[start : start + w]
        slope, intercept = np.polyfit(xs, ys, 1)
        resid = ys - (slope * xs + intercept)
        ss_tot = float(np.sum((ys - ys.mean()) ** 2))
        r2 = -np.inf if ss_tot < 1e-30 else 1.0 - float(np.sum(resid**2)) / ss_tot
        if r2 > best[0]:
            best = (r2, float(slope))
    return best[1]


def d_frac(pred_traj, true_traj, seed=0):
    """Absolute difference of the two correlation-dimension estimates."""
    return abs(
        correlation_dimension(pred_traj, seed=seed)
        - correlation_dimension(true_traj, seed=seed)
    )


# ---------------------------------------------------------------------------
# Gaussian mixtures

_VAR_FLOOR = 1e-6
_WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, V)
    variances: np.ndarray  # (K, V), diagonal covariances

    def __post_init__(self):
        if abs(float(self.weights.sum()) - 1.0) > 1e-10:
            raise DataError("mixture weights must sum to 1")
        if np.any(self.variances < _VAR_FLOOR - 1e-15):
            raise DataError("mixture variances below the stability floor")

    @property
    def components(self):
        return self.weights.shape[0]


def _log_gaussian(points, means, variances):
    # (N, K) log density of each diagonal component at each point
    diff = points[:, None, :] - means[None, :, :]
    return -0.5 * np.sum(
        diff * diff / variances[None] + np.log(2.0 * np.pi * variances[None]), axis=2
    )


def _kmeans_pp(points, k, rng):
    n = points.shape[0]
    centers = [points[int(rng.integers(n))]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            centers.append(points[int(rng.integers(n))])
            continue
        pick = int(rng.choice(n, p=d2 / total))
        centers.append(points[pick])
        d2 = np.minimum(d2, np.sum((points - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm(points, components=8, seed=0, max_iter=200, tol=1e-7):
    """Diagonal-covariance mixture via EM, k-means++ seeded, deterministic.

    Components whose weight underflows are removed and the rest renormalized.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 10 * components:
        raise DataError("need at least 10 points per mixture component")
    n, v = points.shape
    rng = make_rng(seed, "gmm")
    means = _kmeans_pp(points, components, rng)
    base_var = np.maximum(np.var(points, axis=0), _VAR_FLOOR)
    variances = np.tile(base_var, (components, 1))
    weights = np.full(components, 1.0 / components)
    prev_ll = -np.inf
    for _ in range(max_iter):
        log_joint = np.log(weights)[None, :] + _log_gaussian(points, means, variances)
        norms = logsumexp(log_joint, axis=1)
        ll = float(np.mean(norms))
        resp = np.exp(log_joint - norms[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        alive = weights >= _WEIGHT_FLOOR
        if not np.all(alive):
            weights = weights[alive] / weights[alive].sum()
            means = means[alive]
            variances = variances[alive]
            prev_ll = -np.inf
            continue
        means = (resp.T @ points) / nk[:, None]
        sq = (resp.T @ (points * points)) / nk[:, None]
        variances = np.maximum(sq - means * means, _VAR_FLOOR)
        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll
    weights = weights / weights.sum()
    return GmmModel(weights=weights, means=means, variances=variances)


def _diag_gauss_kl(mu1, var1, mu2, var2):
    # KL between diagonal Gaussians, summed over dimensions
    return 0.5 * np.sum(
        np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0, axis=-1
    )


def gmm_kl_variational(f, g):
    """Variational approximation of KL(f || g) between two mixtures.

    Exactly zero when f and g are the same mixture; closed form over
    component-pair Gaussian KLs.
    """
    kl_ff = _diag_gauss_kl(
        f.means[:, None, :], f.variances[:, None, :], f.means[None, :, :], f.variances[None, :, :]
    )
    kl_fg = _diag_gauss_kl(
        f.means[:, None, :], f.variances[:, None, :], g.means[None, :, :], g.variances[None, :, :]
    )
    own = logsumexp(np.log(f.weights)[None, :] - kl_ff, axis=1)
    cross = logsumexp(np.log(g.weights)[None, :] - kl_fg, axis=1)
    return float(np.sum(f.weights * (own - cross)))


def d_stsp(pred_traj, true_traj, components=None, seed=0):
    """KL(true || pred) between mixtures fitted to the two state clouds."""
    components = components or ESTIMATOR_PARAMS["gmm_components"]
    g_pred = fit_gmm(pred_traj, components=components, seed=seed)
    g_true = fit_gmm(true_traj, components=components, seed=seed)
    return gmm_kl_variational(g_true, g_pred)


# ---------------------------------------------------------------------------
# report container


@dataclass(frozen=True, eq=False)
class ForecastReport:
    per_system: tuple  # dicts: system id + the four metrics
    aggregates: dict  # metric -> {mean, median, ci_low, ci_high[, rms]}
    estimator: dict
    seed: int


def build_report(per_system, seed=0, n_boot=1000):
    """Aggregate per-system metrics with bootstrap confidence intervals."""
    per_system = tuple(dict(rec) for rec in per_system)
    if not per_system:
        raise DataError("report needs at least one evaluated system")
    for rec in per_system:
        for name in METRIC_NAMES:
            if name not in rec:
                raise DataError(f"system record missing metric '{name}'")
        for name in ("smape_128", "smape_512"):
            if not 0.0 <= rec[name] <= 200.0:
                raise DataError(f"{name}={rec[name]} outside [0, 200]")
    rng = make_rng(seed, "bootstrap")
    aggregates = {}
    n = len(per_system)
    for name in METRIC_NAMES:
        values = np.array([rec[name] for rec in per_system], dtype=np.float64)
        stats = {
            "mean": float(values.mean()),
            "median": float(np.median(values)),
        }
        if name == "d_frac":
            stats["rms"] = float(np.sqrt(np.mean(values**2)))
        resampled = values[rng.integers(0, n, size=(n_boot, n))].mean(axis=1)
        stats["ci_low"] = float(np.percentile(resampled, 2.5))
        stats["ci_high"] = float(np.percentile(resampled, 97.5))
        aggregates[name] = stats
    return ForecastReport(
        per_system=per_system,
        aggregates=aggregates,
        estimator=dict(ESTIMATOR_PARAMS),
        seed=seed,
    )


def report_to_json(report):
    return {
        "per_system": list(report.per_system),
        "aggregates": report.aggregates,
        "estimator": {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in report.estimator.items()
        },
        "seed": report.seed,
    }


def report_from_json(doc):
    estimator = {
        k: (tuple(v) if isinstance(v, list) else v) for k, v in doc["estimator"].items()
    }
    return ForecastReport(
        per_system=tuple(doc["per_system"]),
        aggregates=doc["aggregates"],
        estimator=estimator,
        seed=int(doc["seed"]),
    )


def report_to_csv(report):
    """Flat per-system table; one row per system, one column per metric."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(("system",) + METRIC_NAMES)
    for rec in report.per_system:
        writer.writerow([rec.get("system", "")] + [repr(float(rec[m])) for m in METRIC_NAMES])
    return buf.getvalue()
