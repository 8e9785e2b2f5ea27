"""Differentiable numeric primitives with analytic vector-Jacobian products.

Everything here is a pure function over float64 numpy arrays. Each primitive
has a forward evaluation and a matching VJP (reachable through :func:`vjp`),
plus :func:`finite_diff_check` to compare any analytic gradient against
central differences. There is no tape: callers compose the VJPs by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DegenerateNorm, InvalidDistribution, UnknownOp

# Norms at or below this are treated as degenerate rather than normalized.
EPS_NORM = 1e-9
# Floor applied to distribution entries inside logs so KL stays finite.
EPS_PROB = 1e-12

Grad = dict[str, "np.ndarray | float"]


def as_vec(x) -> np.ndarray:
    """Coerce input to a 1-D float64 array, rejecting non-finite entries."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf")
    return v


def normalize(v) -> np.ndarray:
    """Return v / ||v||.

    Raises DegenerateNorm if ||v|| <= EPS_NORM; silently dividing by a
    near-zero norm would poison every downstream similarity.
    """
    v = as_vec(v)
    n = float(np.linalg.norm(v))
    if n <= EPS_NORM:
        raise DegenerateNorm(f"norm {n:.3e} <= {EPS_NORM:.0e}")
    return v / n


def normalize_vjp(v, upstream) -> Grad:
    """VJP of normalize: projects upstream onto the tangent of the sphere."""
    v = as_vec(v)
    u = as_vec(upstream)
    n = float(np.linalg.norm(v))
    if n <= EPS_NORM:
        raise DegenerateNorm(f"norm {n:.3e} <= {EPS_NORM:.0e}")
    vh = v / n
    return {"v": (u - float(u @ vh) * vh) / n}


def cosine_sim(a, b) -> float:
    """Cosine similarity <a,b> / (||a|| ||b||), clipped into [-1, 1]."""
    a = as_vec(a)
    b = as_vec(b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise DegenerateNorm(f"norms {na:.3e}, {nb:.3e}")
    s = float(a @ b / (na * nb))
    # float dust can push |s| past 1 by ~1e-16
    return min(1.0, max(-1.0, s))


def cosine_sim_vjp(a, b, upstream: float) -> Grad:
    """VJP of cosine similarity with respect to both arguments."""
    a = as_vec(a)
    b = as_vec(b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise DegenerateNorm(f"norms {na:.3e}, {nb:.3e}")
    ah = a / na
    bh = b / nb
    s = float(ah @ bh)
    u = float(upstream)
    return {
        "a": u * (bh - s * ah) / na,
        "b": u * (ah - s * bh) / nb,
    }


def softmax(z, temperature: float = 1.0) -> np.ndarray:
    """Softmax of temperature * z, stabilized by max subtraction.

    softmax(z, T)_i = exp(T z_i) / sum_j exp(T z_j)
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_vec(z) * float(temperature)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_vjp(z, temperature: float, upstream) -> Grad:
    """VJP of softmax: dz = T * p * (u - <u, p>)."""
    p = softmax(z, temperature)
    u = as_vec(upstream)
    return {"z": float(temperature) * p * (u - float(u @ p))}


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0):
        raise InvalidDistribution(f"{name} has negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise InvalidDistribution(f"{name} sums to {total!r}, not 1")


def kl_div(p, q) -> float:
    """KL(p || q) = sum p_i log(p_i / q_i), with 0 log 0 := 0.

    q entries are floored at EPS_PROB so a hard assignment in p stays finite.
    Result is clipped at 0 to strip float dust on the p == q diagonal.
    """
    p = as_vec(p)
    q = as_vec(q)
    if p.shape != q.shape:
        raise InvalidDistribution(f"shape mismatch {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    qf = np.maximum(q, EPS_PROB)
    mask = p > 0.0
    val = float(np.sum(p[mask] * np.log(p[mask] / qf[mask])))
    return max(val, 0.0)


def kl_div_vjp(p, q, upstream: float) -> Grad:
    """VJP of kl_div for both arguments (q gradient is 0 on floored entries)."""
    p = as_vec(p)
    q = as_vec(q)
    qf = np.maximum(q, EPS_PROB)
    u = float(upstream)
    dp = np.zeros_like(p)
    mask = p > 0.0
    dp[mask] = u * (np.log(p[mask] / qf[mask]) + 1.0)
    dq = np.where(q > EPS_PROB, -u * p / qf, 0.0)
    return {"p": dp, "q": dq}


def sigmoid(z):
    """Numerically stable logistic function, elementwise."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def softplus(z):
    """log(1 + exp(z)) without overflow; this is -log sigmoid(-z)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


def tempered_sigmoid(z: float, temperature: float, offset: float) -> float:
    """1 / (1 + exp(-(T z - b))): a sigmoid sharpened by T and shifted by b."""
    return float(sigmoid(float(temperature) * float(z) - float(offset)))


def tempered_sigmoid_vjp(z: float, temperature: float, offset: float,
                         upstream: float) -> Grad:
    s = tempered_sigmoid(z, temperature, offset)
    return {"z": float(upstream) * float(temperature) * s * (1.0 - s)}


def tanh(z: float) -> float:
    return float(np.tanh(z))


def tanh_vjp(z: float, upstream: float) -> Grad:
    t = np.tanh(z)
    return {"z": float(upstream) * (1.0 - t * t)}


def log(z: float) -> float:
    if z <= 0:
        raise ValueError(f"log domain error: {z!r}")
    return float(np.log(z))


def log_vjp(z: float, upstream: float) -> Grad:
    return {"z": float(upstream) / float(z)}


_VJP_TABLE: dict[str, Callable[..., Grad]] = {
    "normalize": normalize_vjp,
    "cosine_sim": cosine_sim_vjp,
    "softmax": softmax_vjp,
    "kl_div": kl_div_vjp,
    "tempered_sigmoid": tempered_sigmoid_vjp,
    "tanh": tanh_vjp,
    "log": log_vjp,
}


def vjp(op_tag: str, inputs: Mapping[str, object], upstream) -> Grad:
    """Dispatch to the analytic VJP of a registered primitive.

    Args:
        op_tag: name of one of the primitives in this module.
        inputs: keyword inputs matching the primitive's forward signature.
        upstream: sensitivity of the final scalar to the primitive's output
            (a scalar for scalar-valued primitives, a vector otherwise).

    Returns:
        Mapping from input name to the contracted partial derivative.
    """
    fn = _VJP_TABLE.get(op_tag)
    if fn is None:
        raise UnknownOp(f"no VJP registered for {op_tag!r}")
    return fn(**inputs, upstream=upstream)


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison.

    max_rel_error maps parameter name to the worst relative error over its
    coordinates, where relative error uses a unit floor:
    |a - n| / max(1, |a|, |n|). Without the floor, coordinates whose true
    gradient is ~0 would amplify the ~1e-11 cancellation noise of central
    differences into meaningless large ratios.
    """

    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_param: str = ""
    worst_error: float = 0.0

    def ok(self, tol: float = 1e-4) -> bool:
        return self.worst_error < tol


def rel_error(a: float, n: float) -> float:
    """Relative error with a unit floor (absolute below magnitude 1)."""
    return abs(a - n) / max(1.0, abs(a), abs(n))


def finite_diff_check(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, "np.ndarray | float"],
    analytic: Mapping[str, "np.ndarray | float"],
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    Args:
        f: pure, deterministic scalar function of the parameter dict.
        params: point at which to check; arrays or scalars per name.
        analytic: claimed gradient, same keys and shapes as params.
        h: central difference step, (f(p+h) - f(p-h)) / 2h per coordinate.

    Returns:
        GradCheckReport with per-parameter max relative errors.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    report = GradCheckReport()
    for name, p in work.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"analytic[{name!r}] shape {a.shape} != {p.shape}")
        worst = 0.0
        flat = p.reshape(-1)
        aflat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f(work)
            flat[idx] = orig - h
            fm = f(work)
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, rel_error(float(aflat[idx]), numeric))
        report.max_rel_error[name] = worst
        if worst >= report.worst_error:
            report.worst_error = worst
            report.worst_param = name
    return report
