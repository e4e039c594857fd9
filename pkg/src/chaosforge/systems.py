"""Parameterized chaotic ODE vector fields and their composition tree.

A system is described by a tree of nodes: Base (a named registered field with
parameters), Jittered (a Base with additive parameter deltas), or SkewProduct
(an autonomous driver unidirectionally forcing a response). Trees serialize to
JSON and hash to a stable system id.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .util import DataError

# ---------------------------------------------------------------------------
# registered base systems


@dataclass(frozen=True)
class BaseDef:
    name: str
    dim: int
    params: dict
    default_ic: tuple
    default_dt: float
    make_rhs: callable


def _lorenz(p):
    sigma, rho, beta = p["sigma"], p["rho"], p["beta"]

    def rhs(s, t):
        x, y, z = s
        return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])

    return rhs


def _rossler(p):
    a, b, c = p["a"], p["b"], p["c"]

    def rhs(s, t):
        x, y, z = s
        return np.array([-y - z, x + a * y, b + z * (x - c)])

    return rhs


def _thomas(p):
    b = p["b"]

    def rhs(s, t):
        x, y, z = s
        return np.array([np.sin(y) - b * x, np.sin(z) - b * y, np.sin(x) - b * z])

    return rhs


def _chen(p):
    a, b, c = p["a"], p["b"], p["c"]

    def rhs(s, t):
        x, y, z = s
        return np.array([a * (y - x), (c - a) * x - x * z + c * y, x * y - b * z])

    return rhs


def _halvorsen(p):
    a = p["a"]

    def rhs(s, t):
        x, y, z = s
        return np.array(
            [
                -a * x - 4 * y - 4 * z - y * y,
                -a * y - 4 * z - 4 * x - z * z,
                -a * z - 4 * x - 4 * y - x * x,
            ]
        )

    return rhs


def _dadras(p):
    pp, q, r, ss, tt = p["p"], p["q"], p["r"], p["s"], p["t"]

    def rhs(s, t):
        x, y, z = s
        return np.array([y - pp * x + q * y * z, r * y - x * z + z, ss * x * y - tt * z])

    return rhs


def _aizawa(p):
    a, b, c, d, e, f = p["a"], p["b"], p["c"], p["d"], p["e"], p["f"]

    def rhs(s, t):
        x, y, z = s
        return np.array(
            [
                (z - b) * x - d * y,
                d * x + (z - b) * y,
                c + a * z - z**3 / 3 - (x * x + y * y) * (1 + e * z) + f * z * x**3,
            ]
        )

    return rhs


def _sprott_b(p):
    def rhs(s, t):
        x, y, z = s
        return np.array([y * z, x - y, 1 - x * y])

    return rhs


def _sprott_k(p):
    a = p["a"]

    def rhs(s, t):
        x, y, z = s
        return np.array([x * y - z, x - y, x + a * z])

    return rhs


def _rucklidge(p):
    kappa, lam = p["kappa"], p["lambda"]

    def rhs(s, t):
        x, y, z = s
        return np.array([-kappa * x + lam * y - y * z, x, -z + y * y])

    return rhs


def _chua(p):
    alpha, beta, m0, m1 = p["alpha"], p["beta"], p["m0"], p["m1"]

    def rhs(s, t):
        x, y, z = s
        h = m1 * x + 0.5 * (m0 - m1) * (abs(x + 1) - abs(x - 1))
        return np.array([alpha * (y - x - h), x - y + z, -beta * y])

    return rhs


def _duffing(p):
    # periodically forced oscillator in autonomous form: the forcing phase
    # rides along as a point on the unit circle (state = x, v, cos, sin)
    delta, gamma, omega = p["delta"], p["gamma"], p["omega"]

    def rhs(s, t):
        x, v, cw, sw = s
        return np.array([v, -delta * v + x - x**3 + gamma * cw, -omega * sw, omega * cw])

    return rhs


REGISTRY = {
    d.name: d
    for d in [
        BaseDef("lorenz", 3, {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}, (1.0, 1.0, 1.0), 0.015, _lorenz),
        BaseDef("rossler", 3, {"a": 0.2, "b": 0.2, "c": 5.7}, (1.0, 1.0, 0.0), 0.12, _rossler),
        BaseDef("thomas", 3, {"b": 0.208186}, (0.5, 0.5, 0.4), 0.6, _thomas),
        BaseDef("chen", 3, {"a": 35.0, "b": 3.0, "c": 28.0}, (5.0, 5.0, 15.0), 0.011, _chen),
        BaseDef("halvorsen", 3, {"a": 1.4}, (-1.48, -1.51, 2.04), 0.032, _halvorsen),
        BaseDef("dadras", 3, {"p": 3.0, "q": 2.7, "r": 1.7, "s": 2.0, "t": 9.0}, (1.1, 2.1, -2.0), 0.05, _dadras),
        BaseDef(
            "aizawa",
            3,
            {"a": 0.95, "b": 0.7, "c": 0.6, "d": 3.5, "e": 0.25, "f": 0.1},
            (0.1, 0.0, 0.0),
            0.036,
            _aizawa,
        ),
        BaseDef("sprott_b", 3, {}, (0.5, 0.2, 0.3), 0.1, _sprott_b),
        BaseDef("sprott_k", 3, {"a": 0.3}, (1.0, 0.5, 0.3), 0.15, _sprott_k),
        BaseDef("rucklidge", 3, {"kappa": 2.0, "lambda": 6.7}, (1.0, 0.0, 4.5), 0.08, _rucklidge),
        BaseDef("chua", 3, {"alpha": 15.6, "beta": 28.0, "m0": -1.143, "m1": -0.714}, (0.7, 0.0, 0.0), 0.03, _chua),
        BaseDef("duffing", 4, {"delta": 0.3, "gamma": 0.5, "omega": 1.2}, (1.0, 0.0, 1.0, 0.0), 0.1, _duffing),
    ]
}


def founder_names():
    return sorted(REGISTRY)


# ---------------------------------------------------------------------------
# composition tree


@dataclass(frozen=True)
class Base:
    name: str
    params: dict
    seed: int | None = None
    kind: str = field(default="base", init=False)


@dataclass(frozen=True)
class Jittered:
    child: Base
    deltas: dict
    seed: int | None = None
    kind: str = field(default="jittered", init=False)


@dataclass(frozen=True)
class SkewProduct:
    driver: object
    response: object
    kappa_driver: float
    kappa_response: float
    seed: int | None = None
    kind: str = field(default="skew_product", init=False)


def founder(name):
    """Base spec for a registered system at its literature parameters."""
    if name not in REGISTRY:
        raise DataError(f"unknown base system name: {name!r}")
    return Base(name=name, params=dict(REGISTRY[name].params))


def dimension(spec):
    if isinstance(spec, Base):
        return REGISTRY[spec.name].dim
    if isinstance(spec, Jittered):
        return dimension(spec.child)
    if isinstance(spec, SkewProduct):
        return dimension(spec.response) + dimension(spec.driver)
    raise DataError(f"unknown spec node: {spec!r}")


def effective_params(spec):
    """Resolved parameter dict for a Base or Jittered node."""
    if isinstance(spec, Base):
        return dict(spec.params)
    if isinstance(spec, Jittered):
        base = effective_params(spec.child)
        for k, dv in spec.deltas.items():
            if k not in base:
                raise DataError(f"jitter delta for unknown parameter {k!r}")
            base[k] += dv
        return base
    raise DataError("effective_params applies to base/jittered nodes only")


def default_initial_condition(spec):
    """Concatenated registered default starts, response block first."""
    if isinstance(spec, Base):
        return np.array(REGISTRY[spec.name].default_ic, dtype=np.float64)
    if isinstance(spec, Jittered):
        return default_initial_condition(spec.child)
    if isinstance(spec, SkewProduct):
        return np.concatenate(
            [default_initial_condition(spec.response), default_initial_condition(spec.driver)]
        )
    raise DataError(f"unknown spec node: {spec!r}")


def default_dt(spec):
    """Sampling interval: fastest (smallest dt) among the leaves."""
    if isinstance(spec, Base):
        return REGISTRY[spec.name].default_dt
    if isinstance(spec, Jittered):
        return default_dt(spec.child)
    if isinstance(spec, SkewProduct):
        return min(default_dt(spec.response), default_dt(spec.driver))
    raise DataError(f"unknown spec node: {spec!r}")


def compile_field(spec):
    """Build the vector field f(state, t) -> derivative for a spec tree."""
    if isinstance(spec, (Base, Jittered)):
        leaf = spec.child if isinstance(spec, Jittered) else spec
        if leaf.name not in REGISTRY:
            raise DataError(f"unknown base system name: {leaf.name!r}")
        params = effective_params(spec)
        for k, v in params.items():
            if not np.isfinite(v):
                raise DataError(f"non-finite parameter {k!r}")
        return REGISTRY[leaf.name].make_rhs(params)
    if isinstance(spec, SkewProduct):
        f_resp = compile_field(spec.response)
        f_drv = compile_field(spec.driver)
        dr = dimension(spec.response)
        m = min(dr, dimension(spec.driver))
        kr, kd = float(spec.kappa_response), float(spec.kappa_driver)

        def rhs(s, t):
            xr, xd = s[:dr], s[dr:]
            dxd = f_drv(xd, t)
            dxr = kr * f_resp(xr, t)
            dxr[:m] += kd * dxd[:m]
            return np.concatenate([dxr, dxd])

        return rhs
    raise DataError(f"unknown spec node: {spec!r}")


def evaluate_field(spec, state, t=0.0):
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (dimension(spec),):
        raise DataError(f"state length {state.shape} != system dimension {dimension(spec)}")
    return compile_field(spec)(state, t)


# ---------------------------------------------------------------------------
# serialization


def to_json(spec):
    if isinstance(spec, Base):
        return {"kind": "base", "name": spec.name, "params": dict(spec.params), "seed": spec.seed}
    if isinstance(spec, Jittered):
        return {
            "kind": "jittered",
            "child": to_json(spec.child),
            "deltas": dict(spec.deltas),
            "seed": spec.seed,
        }
    if isinstance(spec, SkewProduct):
        return {
            "kind": "skew_product",
            "driver": to_json(spec.driver),
            "response": to_json(spec.response),
            "kappa_driver": spec.kappa_driver,
            "kappa_response": spec.kappa_response,
            "seed": spec.seed,
        }
    raise DataError(f"unknown spec node: {spec!r}")


def from_json(doc):
    if not isinstance(doc, dict) or "kind" not in doc:
        raise DataError("system document must be an object with a 'kind' field")
    kind = doc["kind"]
    seed = doc.get("seed")
    if kind == "base":
        name = doc.get("name")
        if name not in REGISTRY:
            raise DataError(f"unknown base system name: {name!r}")
        params = doc.get("params")
        if params is None:
            params = dict(REGISTRY[name].params)
        return Base(name=name, params={k: float(v) for k, v in params.items()}, seed=seed)
    if kind == "jittered":
        child = from_json(doc["child"])
        if not isinstance(child, Base):
            raise DataError("jittered node requires a base child")
        return Jittered(child=child, deltas={k: float(v) for k, v in doc["deltas"].items()}, seed=seed)
    if kind == "skew_product":
        return SkewProduct(
            driver=from_json(doc["driver"]),
            response=from_json(doc["response"]),
            kappa_driver=float(doc["kappa_driver"]),
            kappa_response=float(doc["kappa_response"]),
            seed=seed,
        )
    raise DataError(f"unknown system kind: {kind!r}")


def system_id(spec):
    """Stable content hash of the canonical JSON document."""
    doc = json.dumps(to_json(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()[:16]
