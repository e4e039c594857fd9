"""Evolutionary generation of chaotic systems with multi-stage selection.

Candidates are built by mutating two founder systems and coupling them into a
skew product, then filtered through integration verdicts, the Gottwald-Melbourne
0-1 test, a near-recurrence limit-cycle test, a power-spectrum concentration
test, and a Rosenstein largest-Lyapunov estimate, in that order.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import integrator, systems
from .util import (
    DataError,
    NumericalError,
    derive_seed,
    load_json,
    make_rng,
    parallel_map,
    thread_count,
)

STAGES = ("None", "Trivial", "ZeroOne", "LimitCycle", "Spectrum", "Lyapunov")


@dataclass(frozen=True)
class EvolutionConfig:
    population_target: int = 8
    jitter_sigma: float = 0.1
    trajectory_length_for_tests: int = 4096
    k01_threshold: float = 0.5
    recurrence_threshold: float = 0.01
    spectrum_peak_limit: int = 5
    lyapunov_min: float = 0.0
    rng_seed: int = 0
    candidate_budget_factor: int = 50
    integration_wall_limit: float = 300.0

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise DataError("jitter_sigma must be >= 0")
        if not 0 < self.k01_threshold < 1:
            raise DataError("k01_threshold must lie in (0,1)")
        if self.recurrence_threshold <= 0 or self.spectrum_peak_limit < 1:
            raise DataError("recurrence_threshold > 0 and spectrum_peak_limit >= 1 required")
        if self.trajectory_length_for_tests < 2000:
            raise DataError("trajectory_length_for_tests must be >= 2000")
        if self.integration_wall_limit <= 0:
            raise DataError("integration_wall_limit must be > 0")

    def warmup_integrator_config(self):
        return dataclasses.replace(
            integrator.WARMUP_CONFIG, wall_time_limit=self.integration_wall_limit
        )

    def strict_integrator_config(self):
        return dataclasses.replace(
            integrator.IntegratorConfig(), wall_time_limit=self.integration_wall_limit
        )

    def thresholds(self):
        return {
            "k01_threshold": self.k01_threshold,
            "recurrence_threshold": self.recurrence_threshold,
            "spectrum_peak_limit": self.spectrum_peak_limit,
            "lyapunov_min": self.lyapunov_min,
        }


@dataclass(frozen=True)
class ChaosVerdict:
    accepted: bool
    k01: float
    largest_lyapunov: float
    rejection_stage: str
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rejection_stage not in STAGES:
            raise DataError(f"unknown rejection stage {self.rejection_stage!r}")
        if self.accepted and self.rejection_stage != "None":
            raise DataError("accepted verdict must carry rejection_stage 'None'")


# ---------------------------------------------------------------------------
# variation operators


def mutate(parent, sigma, rng):
    """Jitter every base parameter: N(theta, sigma*|theta|) for |theta|>1, else N(theta, sigma).

    The composition structure is unchanged; jitters attach to base nodes.
    """
    if sigma < 0:
        raise DataError("sigma must be >= 0")
    if isinstance(parent, systems.Base):
        deltas = {}
        for name in sorted(parent.params):
            theta = parent.params[name]
            scale = sigma * abs(theta) if abs(theta) > 1 else sigma
            deltas[name] = float(rng.normal(0.0, scale)) if scale > 0 else 0.0
        return systems.Jittered(child=parent, deltas=deltas)
    if isinstance(parent, systems.Jittered):
        merged = systems.Base(name=parent.child.name, params=systems.effective_params(parent))
        return mutate(merged, sigma, rng)
    if isinstance(parent, systems.SkewProduct):
        return systems.SkewProduct(
            driver=mutate(parent.driver, sigma, rng),
            response=mutate(parent.response, sigma, rng),
            kappa_driver=parent.kappa_driver,
            kappa_response=parent.kappa_response,
        )
    raise DataError(f"unknown spec node: {parent!r}")


def _reference_rms(spec, rng, n_samples=1024, config=None):
    """Flow RMS over a relaxed-tolerance attractor run; verdicts propagate."""
    config = integrator.WARMUP_CONFIG if config is None else config
    ic = integrator.sample_initial_condition(spec, rng, config=config)
    if isinstance(ic, integrator.RejectionVerdict):
        return ic
    traj = integrator.integrate(spec, ic, n_samples, systems.default_dt(spec), config)
    if isinstance(traj, integrator.RejectionVerdict):
        return traj
    return integrator.flow_rms(spec, traj)


def recombine(a, b, rng, rms_a=None, rms_b=None):
    """Skew-product child of two parents; kappas are reciprocal flow RMS values.

    Driver vs response roles come from an rng coin flip. Missing RMS values are
    estimated from a fresh reference run of the corresponding parent.
    """
    swap = bool(rng.random() < 0.5)
    if rms_a is None:
        rms_a = _reference_rms(a, rng)
    if rms_b is None:
        rms_b = _reference_rms(b, rng)
    for r in (rms_a, rms_b):
        if isinstance(r, integrator.RejectionVerdict):
            raise NumericalError(f"parent reference run rejected: {r.kind}")
        if r <= 0:
            raise NumericalError("degenerate parent: zero flow RMS")
    response, driver = (b, a) if swap else (a, b)
    rms_response, rms_driver = (rms_b, rms_a) if swap else (rms_a, rms_b)
    return systems.SkewProduct(
        driver=driver,
        response=response,
        kappa_driver=1.0 / rms_driver,
        kappa_response=1.0 / rms_response,
    )


# ---------------------------------------------------------------------------
# chaoticity gates


def test_01_chaos(series, n_c=100, seed=701):
    """Gottwald-Melbourne 0-1 statistic, correlation method, median over c.

    Translation variables p, q are accumulated for each angular frequency c;
    the mean-square displacement (with the bounded oscillatory term removed)
    grows linearly iff the dynamics are diffusive, and the growth-vs-time
    correlation coefficient K_c approaches 1 for chaos and 0 for regularity.
    """
    phi = np.asarray(series, dtype=np.float64).ravel()
    N = phi.size
    if N < 1000:
        raise DataError(f"0-1 test needs >= 1000 samples, got {N}")
    if np.ptp(phi) == 0:
        raise NumericalError("0-1 test input is constant (zero variance)")
    ncut = N // 10
    ns = np.arange(1, ncut + 1)
    rng = np.random.default_rng(seed)
    cs = rng.uniform(np.pi / 5, 4 * np.pi / 5, size=n_c)
    mean_phi = phi.mean()
    L = 1 << int(np.ceil(np.log2(2 * N)))
    j = np.arange(N)
    ks = np.empty(n_c)

    def msd_increments(a):
        # sum over j of [a(j+n)-a(j)]^2 via prefix sums and FFT autocorrelation
        total = float(a @ a)
        prefix = np.concatenate([[0.0], np.cumsum(a * a)])
        F = np.fft.rfft(a, L)
        R = np.fft.irfft(F * np.conj(F), L)[: ncut + 1]
        return (total - prefix[ns]) + prefix[N - ns] - 2.0 * R[ns]

    for ci, c in enumerate(cs):
        p = np.cumsum(phi * np.cos(j * c))
        q = np.cumsum(phi * np.sin(j * c))
        M = (msd_increments(p) + msd_increments(q)) / (N - ns)
        V_osc = mean_phi**2 * (1.0 - np.cos(ns * c)) / (1.0 - np.cos(c))
        D = M - V_osc
        sd = D.std()
        ks[ci] = 0.0 if sd == 0 else float(np.corrcoef(ns, D)[0, 1])
    return float(np.clip(np.median(ks), 0.0, 1.0))


def k01_from_trajectory(traj):
    """Pipeline wrapper: max-variance channel, decorrelation-based subsampling.

    Trajectories sampled at ~50 samples per orbit are heavily oversampled for
    the 0-1 test's frequency range and read as regular; striding by the
    autocorrelation time (capped so >= 1000 samples remain) restores the
    diffusive signature.
    """
    X = traj.samples
    ch = X[:, int(np.argmax(X.var(axis=0)))].astype(np.float64)
    N = ch.size
    sd = ch.std()
    if sd == 0:
        raise NumericalError("0-1 test input is constant (zero variance)")
    centered = ch - ch.mean()
    ac = np.correlate(centered, centered, "full")[N - 1 :] / np.arange(N, 0, -1)
    ac = ac / ac[0]
    lag = max(int(np.argmax(ac < 1.0 / np.e)), 1)
    stride = max(1, min(lag, N // 1000))
    return test_01_chaos(ch[::stride])


def test_limit_cycle(traj, epsilon=0.01, n_anchors=64, tau_min=10):
    """Reject trajectories dominated by a single near-recurrence lag.

    Passes (returns True) unless some lag tau makes more than 80% of anchor
    points recur within epsilon * (bounding-box diameter).
    """
    X = traj.samples
    T = X.shape[0]
    if T < 500:
        raise DataError("limit-cycle test needs >= 500 samples")
    diam = float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))
    if diam == 0:
        return False  # constant trajectory recurs at every lag
    anchors = np.linspace(0, T - 1, n_anchors, dtype=int)
    taus = np.arange(tau_min, T // 2)
    idx = anchors[:, None] + taus[None, :]
    valid = idx < T
    idx_clipped = np.minimum(idx, T - 1)
    dist = np.linalg.norm(X[idx_clipped] - X[anchors][:, None, :], axis=2)
    near = (dist < epsilon * diam) & valid
    counts = valid.sum(axis=0)
    enough = counts >= max(8, n_anchors // 4)
    coverage = np.where(enough, near.sum(axis=0) / np.maximum(counts, 1), 0.0)
    return bool(coverage.max(initial=0.0) <= 0.8)


def test_power_spectrum(traj, peak_limit=5):
    """Reject when a handful of periodogram bins dominate every channel.

    Per channel: mean removed, Hann window, power spectrum; the trajectory
    fails when the top peak_limit bins carry > 95% of power in all channels.
    """
    X = traj.samples
    T = X.shape[0]
    if T < 1024:
        raise DataError("spectrum test needs >= 1024 samples")
    window = np.hanning(T)
    concentrated = []
    for v in range(X.shape[1]):
        ch = X[:, v] - X[:, v].mean()
        p = np.abs(np.fft.rfft(ch * window)) ** 2
        total = p.sum()
        if total == 0:
            concentrated.append(True)
            continue
        top = np.sort(p)[-peak_limit:].sum()
        concentrated.append(top > 0.95 * total)
    return not all(concentrated)


def _lyapunov_one_channel(x, dt, m=3, kmax=400):
    sd = x.std()
    if sd == 0:
        return None
    x = (x - x.mean()) / sd
    N = x.size
    centered = np.correlate(x, x, "full")[N - 1 :] / np.arange(N, 0, -1)
    ac = centered / centered[0]
    tau = min(max(int(np.argmax(ac < 1.0 / np.e)), 1), N // 20)
    n_emb = N - (m - 1) * tau
    emb = np.stack([x[i * tau : i * tau + n_emb] for i in range(m)], axis=1)
    theiler = max(10, tau * m)
    kmax = min(kmax, n_emb // 4)
    usable = n_emb - kmax
    if usable < 200:
        return None
    tree = cKDTree(emb)
    _, idx = tree.query(emb[:usable], k=min(2 * theiler + 2, n_emb))
    pairs_i, pairs_j = [], []
    for i in range(usable):
        for j in idx[i]:
            if abs(int(j) - i) > theiler and j < usable:
                pairs_i.append(i)
                pairs_j.append(int(j))
                break
    if len(pairs_i) < 50:
        return None
    I = np.asarray(pairs_i)
    J = np.asarray(pairs_j)
    ks = np.arange(kmax)
    d = np.linalg.norm(emb[I[:, None] + ks] - emb[J[:, None] + ks], axis=2)
    good = d > 0
    logs = np.where(good, np.log(np.maximum(d, 1e-300)), 0.0)
    y = logs.sum(axis=0) / np.maximum(good.sum(axis=0), 1)
    trend = np.corrcoef(ks, y)[0, 1]
    if not np.isfinite(trend) or trend < 0.5:
        # no sustained divergence: slope of the full curve (near zero for regular data)
        return float(np.polyfit(ks.astype(float), y, 1)[0] / dt)
    lo, hi = y.min(), y.max()
    k_lo = max(int(np.argmax(y >= lo + 0.2 * (hi - lo))), tau)
    k_hi = int(np.argmax(y >= lo + 0.8 * (hi - lo)))
    if k_hi - k_lo < 10:
        k_lo, k_hi = 0, max(10, kmax // 4)
    slope = np.polyfit(ks[k_lo:k_hi].astype(float), y[k_lo:k_hi], 1)[0]
    return float(slope / dt)


def estimate_lyapunov(traj, dt_sample=None):
    """Rosenstein largest-Lyapunov estimate, per unit time.

    Each channel is delay-embedded (lag from the 1/e autocorrelation crossing,
    dimension 3); nearest neighbors outside a Theiler window seed mean
    log-divergence curves whose mid-rise slope is the exponent. The median
    over channels is returned.
    """
    if dt_sample is None:
        dt_sample = traj.dt_sample
    X = traj.samples
    if X.shape[0] < 2000:
        raise DataError("Lyapunov estimation needs >= 2000 samples")
    estimates = []
    for v in range(X.shape[1]):
        est = _lyapunov_one_channel(X[:, v].astype(np.float64), dt_sample)
        if est is not None:
            estimates.append(est)
    if not estimates:
        raise NumericalError("Lyapunov estimation found insufficient neighbors")
    return float(np.median(estimates))


# ---------------------------------------------------------------------------
# pipeline


def evaluate_gates(traj, config):
    """Run the 0-1 / limit-cycle / spectrum / Lyapunov gates on a trajectory.

    Gate order is monotone: a failed stage stops evaluation, and later
    statistics stay NaN. Thresholds are recorded in every verdict.
    """
    th = config.thresholds()
    try:
        k01 = k01_from_trajectory(traj)
    except NumericalError:
        return ChaosVerdict(False, float("nan"), float("nan"), "ZeroOne", th)
    if k01 <= config.k01_threshold:
        return ChaosVerdict(False, k01, float("nan"), "ZeroOne", th)
    if not test_limit_cycle(traj, epsilon=config.recurrence_threshold):
        return ChaosVerdict(False, k01, float("nan"), "LimitCycle", th)
    if not test_power_spectrum(traj, peak_limit=config.spectrum_peak_limit):
        return ChaosVerdict(False, k01, float("nan"), "Spectrum", th)
    try:
        lam = estimate_lyapunov(traj)
    except NumericalError:
        return ChaosVerdict(False, k01, float("nan"), "Lyapunov", th)
    if lam <= config.lyapunov_min:
        return ChaosVerdict(False, k01, lam, "Lyapunov", th)
    return ChaosVerdict(True, k01, lam, "None", th)


def _trivial_verdict(config):
    return ChaosVerdict(False, float("nan"), float("nan"), "Trivial", config.thresholds())


def build_candidate(founders, config, index):
    """Deterministically construct candidate `index`: pick parents, mutate, couple."""
    rng = make_rng(config.rng_seed, "candidate", index)
    ia, ib = rng.choice(len(founders), size=2, replace=False)
    pa = mutate(founders[ia], config.jitter_sigma, rng)
    pb = mutate(founders[ib], config.jitter_sigma, rng)
    warm = config.warmup_integrator_config()
    rms_a = _reference_rms(pa, rng, config=warm)
    if isinstance(rms_a, integrator.RejectionVerdict):
        return None
    rms_b = _reference_rms(pb, rng, config=warm)
    if isinstance(rms_b, integrator.RejectionVerdict):
        return None
    try:
        child = recombine(pa, pb, rng, rms_a=rms_a, rms_b=rms_b)
    except NumericalError:
        return None
    return systems.SkewProduct(
        driver=child.driver,
        response=child.response,
        kappa_driver=child.kappa_driver,
        kappa_response=child.kappa_response,
        seed=derive_seed(config.rng_seed, "candidate", index) % (2**31),
    )


def evaluate_candidate(founders, config, index):
    """Full per-candidate pipeline; returns (spec or None, ChaosVerdict).

    A candidate that passes every gate is confirmed from a second
    independently sampled initial condition before acceptance; systems whose
    chaos is transient or basin-dependent are rejected here rather than
    surfacing later as re-validation flakiness.
    """
    child = build_candidate(founders, config, index)
    if child is None:
        return None, _trivial_verdict(config)
    rng = make_rng(config.rng_seed, "candidate-ic", index)
    ic = integrator.sample_initial_condition(child, rng, config=config.warmup_integrator_config())
    if isinstance(ic, integrator.RejectionVerdict):
        return child, _trivial_verdict(config)
    traj = integrator.integrate(
        child,
        ic,
        config.trajectory_length_for_tests,
        systems.default_dt(child),
        config.strict_integrator_config(),
    )
    if isinstance(traj, integrator.RejectionVerdict):
        return child, _trivial_verdict(config)
    verdict = evaluate_gates(traj, config)
    if verdict.accepted:
        confirm = validate_system(
            child, config, derive_seed(config.rng_seed, "confirm", index)
        )
        if not confirm.accepted:
            return child, confirm
    return child, verdict


def validate_system(spec, config, seed):
    """Re-run integration and all gates from a freshly sampled initial condition."""
    rng = make_rng(seed, "revalidate", systems.system_id(spec))
    ic = integrator.sample_initial_condition(spec, rng, config=config.warmup_integrator_config())
    if isinstance(ic, integrator.RejectionVerdict):
        return _trivial_verdict(config)
    traj = integrator.integrate(
        spec,
        ic,
        config.trajectory_length_for_tests,
        systems.default_dt(spec),
        config.strict_integrator_config(),
    )
    if isinstance(traj, integrator.RejectionVerdict):
        return _trivial_verdict(config)
    return evaluate_gates(traj, config)


def run_evolution(founders, config):
    """Generate population_target accepted systems or exhaust the candidate budget.

    Candidates are evaluated in index order (parallelizable in chunks; results
    are assembled by index so the accepted list is deterministic). Returns a
    list of (SystemSpec, ChaosVerdict) pairs.
    """
    if len(founders) < 2:
        raise DataError("evolution needs at least 2 founders")
    if config.population_target <= 0:
        return []
    budget = config.candidate_budget_factor * config.population_target
    accepted = []
    chunk = max(1, thread_count())
    for start in range(0, budget, chunk):
        indices = range(start, min(start + chunk, budget))
        results = parallel_map(lambda i: evaluate_candidate(founders, config, i), indices)
        for spec, verdict in results:
            if verdict.accepted:
                accepted.append((spec, verdict))
                if len(accepted) == config.population_target:
                    return accepted
    if not accepted:
        raise NumericalError(
            f"candidate budget ({budget}) exhausted with zero acceptances"
        )
    return accepted


# ---------------------------------------------------------------------------
# population serialization


def population_to_json(population):
    out = []
    for spec, verdict in population:
        out.append(
            {
                "system": systems.to_json(spec),
                "system_id": systems.system_id(spec),
                "verdict": {
                    "accepted": verdict.accepted,
                    "k01": None if np.isnan(verdict.k01) else verdict.k01,
                    "largest_lyapunov": (
                        None if np.isnan(verdict.largest_lyapunov) else verdict.largest_lyapunov
                    ),
                    "rejection_stage": verdict.rejection_stage,
                    "thresholds": verdict.thresholds,
                },
            }
        )
    return out


def population_from_json(doc):
    if not isinstance(doc, list):
        raise DataError("population document must be a JSON array")
    population = []
    for entry in doc:
        spec = systems.from_json(entry["system"])
        v = entry.get("verdict")
        if v is None:
            verdict = None
        else:
            verdict = ChaosVerdict(
                accepted=bool(v["accepted"]),
                k01=float("nan") if v["k01"] is None else float(v["k01"]),
                largest_lyapunov=(
                    float("nan") if v["largest_lyapunov"] is None else float(v["largest_lyapunov"])
                ),
                rejection_stage=v["rejection_stage"],
                thresholds=v.get("thresholds", {}),
            )
        population.append((spec, verdict))
    return population


def load_population_specs(path):
    """System specs from a population JSON file (verdicts optional)."""
    doc = load_json(path)
    if isinstance(doc, list) and doc and "system" not in doc[0]:
        # bare array of system documents (e.g. a founders file)
        return [systems.from_json(d) for d in doc]
    return [spec for spec, _ in population_from_json(doc)]
