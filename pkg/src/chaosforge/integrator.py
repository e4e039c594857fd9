"""Adaptive Dormand-Prince 5(4) integration with dense output.

Integration failures are verdicts, not exceptions: the discovery pipeline
consumes FixedPoint (step collapse), Divergence (coordinate blowup), and
Timeout (wall-clock limit) as rejection data.
"""

import csv
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import systems
from .util import DataError, atomic_write_bytes, make_rng

# Butcher tableau of the Dormand-Prince 5(4) embedded pair.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4
# Quartic dense-output interpolant (Shampine): y(t0 + s*h) = y0 + h * K^T P [s, s^2, s^3, s^4].
_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-9
    atol: float = 1e-10
    min_step: float = 1e-10
    max_abs_coordinate: float = 1e4
    wall_time_limit: float = 300.0

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0 and self.min_step > 0):
            raise DataError("integrator tolerances and min_step must be positive")


WARMUP_CONFIG = IntegratorConfig(rtol=1e-6, atol=1e-7)


@dataclass
class Trajectory:
    samples: np.ndarray  # (T, V)
    dt_sample: float
    system_id: str
    initial_condition: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise DataError("trajectory samples must be a nonempty T x V array")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("trajectory contains non-finite samples")


@dataclass(frozen=True)
class RejectionVerdict:
    kind: str  # "FixedPoint" | "Divergence" | "Timeout"
    t_reached: float
    detail: str = ""


def _field_of(system):
    if callable(system):
        return system, "custom"
    return systems.compile_field(system), systems.system_id(system)


def _initial_step(f, t0, y0, rtol, atol):
    """Conservative first-step heuristic based on local derivative scale."""
    scale = atol + rtol * np.abs(y0)
    f0 = f(y0, t0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    if d0 < 1e-5 or d1 < 1e-5 or not np.isfinite(d1):
        return 1e-6
    return 0.01 * d0 / d1


def integrate(system, x0, n_samples, dt_sample, config=None):
    """Sample a trajectory every dt_sample via adaptive stepping.

    system is a SystemSpec tree or a raw field f(state, t). Returns a
    Trajectory (row 0 is x0 at t=0) or a RejectionVerdict.
    """
    if config is None:
        config = IntegratorConfig()
    if n_samples < 1 or dt_sample <= 0:
        raise DataError("n_samples >= 1 and dt_sample > 0 required")
    f, sys_id = _field_of(system)
    y = np.asarray(x0, dtype=np.float64).copy()
    t = 0.0
    t_end = (n_samples - 1) * dt_sample
    deadline = time.monotonic() + config.wall_time_limit

    out = np.empty((n_samples, y.size))
    out[0] = y
    next_idx = 1

    if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > config.max_abs_coordinate:
        return RejectionVerdict("Divergence", 0.0, "initial state out of bounds")
    if n_samples == 1:
        return Trajectory(out, dt_sample, sys_id, np.asarray(x0, dtype=np.float64))

    h = min(_initial_step(f, t, y, config.rtol, config.atol), t_end)
    k = np.empty((7, y.size))
    k[0] = f(y, t)

    t_eps = 1e-12 * max(1.0, abs(t_end))
    while t_end - t > t_eps:
        if time.monotonic() > deadline:
            return RejectionVerdict("Timeout", t, "wall time limit exceeded")
        if h < config.min_step:
            return RejectionVerdict("FixedPoint", t, f"step size collapsed to {h:.3e}")
        h = min(h, t_end - t)

        for i in range(1, 7):
            yi = y + h * (k[:i].T @ _A[i])
            k[i] = f(yi, t + _C[i] * h)
        y_new = yi  # stage 7 uses the 5th-order weights: FSAL pair
        err_vec = h * (k.T @ _E)
        if not np.all(np.isfinite(y_new)):
            return RejectionVerdict("Divergence", t, "non-finite state during step")
        scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = np.sqrt(np.mean((err_vec / scale) ** 2))

        if err <= 1.0:
            if np.max(np.abs(y_new)) > config.max_abs_coordinate:
                return RejectionVerdict("Divergence", t + h, "coordinate exceeded bound")
            # dense output over (t, t+h] for every due sample time
            if next_idx < n_samples:
                t_next = next_idx * dt_sample
                if t_next <= t + h + 1e-14 * max(1.0, abs(t + h)):
                    q = k.T @ _P  # (V, 4)
                    while next_idx < n_samples:
                        t_next = next_idx * dt_sample
                        if t_next > t + h + 1e-14 * max(1.0, abs(t + h)):
                            break
                        s = (t_next - t) / h
                        sv = np.array([s, s * s, s**3, s**4])
                        out[next_idx] = y + h * (q @ sv)
                        next_idx += 1
            t += h
            y = y_new
            k[0] = k[6]  # first-same-as-last
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err**-0.2))
            h *= factor
        else:
            h *= max(0.2, 0.9 * err**-0.2)

    out[n_samples - 1] = y  # endpoint exactly; dense loop may have filled it already
    if next_idx < n_samples - 1:
        raise RuntimeError("dense output skipped samples")  # internal invariant
    if np.max(np.abs(out)) > config.max_abs_coordinate:
        return RejectionVerdict("Divergence", t_end, "sampled coordinate exceeded bound")
    if not np.all(np.isfinite(out)):
        return RejectionVerdict("Divergence", t_end, "non-finite sample")
    return Trajectory(out, dt_sample, sys_id, np.asarray(x0, dtype=np.float64))


def sample_initial_condition(spec, rng_or_seed, n_warmup=2048, dt=None, config=None):
    """Point on/near the attractor from a relaxed-tolerance warmup run.

    Integrates from the registered default start, discards the first half,
    and returns a uniformly chosen retained sample. A rejected warmup
    propagates its verdict.
    """
    rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) else make_rng(rng_or_seed, "ic")
    if dt is None:
        dt = systems.default_dt(spec)
    if config is None:
        config = WARMUP_CONFIG
    x0 = systems.default_initial_condition(spec)
    result = integrate(spec, x0, n_warmup, dt, config)
    if isinstance(result, RejectionVerdict):
        return result
    retained = result.samples[n_warmup // 2 :]
    return retained[rng.integers(0, retained.shape[0])].copy()


def flow_rms(system, reference_trajectory):
    """sqrt(mean over samples of |f(x)|^2 / V); its reciprocal scales skew terms."""
    f, _ = _field_of(system)
    X = reference_trajectory.samples
    if X.shape[0] < 1:
        raise DataError("flow_rms requires a nonempty reference trajectory")
    total = 0.0
    for row in X:
        d = f(row, 0.0)
        total += float(d @ d)
    return float(np.sqrt(total / (X.shape[0] * X.shape[1])))


# ---------------------------------------------------------------------------
# trajectory file formats

_MAGIC = b"CHX1"


def write_chx1(path, traj):
    """Binary format: magic, u32 version, u32 V, u64 T, f64 dt, then T*V f64 rows."""
    T, V = traj.samples.shape
    header = _MAGIC + struct.pack("<IIQ", 1, V, T) + struct.pack("<d", traj.dt_sample)
    body = np.ascontiguousarray(traj.samples, dtype="<f8").tobytes()
    atomic_write_bytes(path, header + body)


def read_chx1(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 28 or blob[:4] != _MAGIC:
        raise DataError(f"{path} is not a CHX1 trajectory file")
    version, V, T = struct.unpack("<IIQ", blob[4:20])
    if version != 1:
        raise DataError(f"{path}: unsupported CHX1 version {version}")
    (dt_sample,) = struct.unpack("<d", blob[20:28])
    expected = 28 + 8 * T * V
    if len(blob) != expected:
        raise DataError(f"{path}: truncated CHX1 payload ({len(blob)} bytes, want {expected})")
    samples = np.frombuffer(blob[28:], dtype="<f8").reshape(T, V).copy()
    return Trajectory(samples, dt_sample, path.stem, samples[0].copy())


def write_csv(path, traj):
    path = Path(path)
    rows = [[f"var{i}" for i in range(traj.samples.shape[1])]]
    rows += [[repr(float(v)) for v in row] for row in traj.samples]
    text = "\n".join(",".join(r) for r in rows) + "\n"
    atomic_write_bytes(path, text.encode())


def read_csv(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    if data.shape[1] != len(header):
        raise DataError(f"{path}: column count mismatch")
    return data
