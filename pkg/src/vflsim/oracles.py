"""Numerical verifiers for the convergence guarantees of the protocol.

Each check replays a recorded run (diagnostics mode) against a closed-form
inequality and returns a BoundReport.  The checks are read-only: they never
touch protocol state, so a single run can feed all of them.

The per-round inequality checks assume the deterministic regime in which the
guarantees are exact: full batch and a deterministic compressor (top-k or
identity).  Stochastic quantization only satisfies the bounds in expectation
and is validated separately through Monte-Carlo compressor properties.

All inequalities carry a relative slack of 1e-9 to absorb floating-point
rounding; the Lyapunov descent check additionally allows an absolute 1e-12
per step because its two sides approach each other at convergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .compressors import alpha as compressor_alpha

REL_SLACK = 1e-9
LYAPUNOV_ABS_SLACK = 1e-12


class TraceIncomplete(ValueError):
    """The trace lacks the diagnostic fields this check needs."""


class RequiresDeterministicCompressor(ValueError):
    """Per-round checks only hold surely for deterministic compressors."""


class StepsizeTooLarge(ValueError):
    """The stepsize violates the precondition of the guarantee being checked."""


@dataclass(frozen=True)
class BoundReport:
    """Per-round sides of one inequality plus the aggregate verdict."""

    name: str
    lhs: tuple
    rhs: tuple
    violated: bool
    max_ratio: float

    @classmethod
    def from_sides(cls, name, lhs, rhs) -> "BoundReport":
        lhs = tuple(float(v) for v in lhs)
        rhs = tuple(float(v) for v in rhs)
        if len(lhs) != len(rhs):
            raise ValueError("side length mismatch")
        violated = False
        max_ratio = 0.0
        for left, right in zip(lhs, rhs):
            if left > right * (1.0 + REL_SLACK):
                violated = True
            if right > 0:
                max_ratio = max(max_ratio, left / right)
            elif left > 0:
                max_ratio = math.inf
        return cls(name, lhs, rhs, violated, max_ratio)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "violated": self.violated,
            "max_ratio": self.max_ratio,
            "rounds": len(self.lhs),
        }


def _require(traces, *fields):
    if not traces:
        raise TraceIncomplete("empty trace")
    for tr in traces:
        for f in fields:
            if getattr(tr, f) is None:
                raise TraceIncomplete(f"trace lacks {f}; rerun with diagnostics")


def _reject_stochastic(compressor):
    if compressor is not None and compressor.kind == "qsgd":
        raise RequiresDeterministicCompressor(
            "per-round bounds hold only in expectation for stochastic quantization")


# ---------------------------------------------------------------------------
# gradient oracle


def check_finite_difference(loss_fn, grad_fn, point, step=1e-5, coords=None) -> float:
    """Worst central-difference error of grad_fn at point, relative to the
    largest analytic gradient magnitude (floored at 1 so flat regions do not
    divide by zero)."""
    point = np.asarray(point, dtype=float)
    analytic = np.asarray(grad_fn(point), dtype=float)
    if analytic.shape != point.shape:
        raise ValueError("gradient shape mismatch")
    scale = max(1.0, float(np.max(np.abs(analytic)))) if analytic.size else 1.0
    if coords is None:
        coords = range(point.size)
    worst = 0.0
    for i in coords:
        probe = np.zeros_like(point)
        probe[i] = step
        fd = (loss_fn(point + probe) - loss_fn(point - probe)) / (2.0 * step)
        worst = max(worst, float(abs(fd - analytic[i])) / scale)
    return worst


# ---------------------------------------------------------------------------
# constants


def effective_alpha(compressor, model, compress_x0=False) -> float:
    """Worst-case contraction factor across the exchanged blocks.

    Full-batch exchanges compress each client's entire representation matrix,
    so the relevant dimension is n_samples * rep_dim per client (plus the
    server block when it is compressed too).
    """
    n = model.n_samples
    dims = [n * m.out_dim for m in model.maps]
    if compress_x0:
        dims.append(model.block_dims()[0])
    return min(compressor_alpha(compressor, d) for d in dims)


def rho_alpha1(K, H, alpha) -> float:
    return K * H ** 4 * ((1.0 + math.sqrt(1.0 - alpha)) / alpha - 1.0) ** 2


def rho_alpha2(K, H, L, alpha) -> float:
    return K * H ** 2 * L ** 2 / (1.0 - math.sqrt(1.0 - alpha))


def theorem1_stepsize(K, H, L, alpha) -> float:
    """Largest stepsize under which the sublinear ergodic bound is guaranteed."""
    return 1.0 / ((math.sqrt(rho_alpha1(K, H, alpha)) + 1.0) * L)


def lemma2_epsilon(alpha) -> float:
    """Weight that makes the distortion recursion contract at rate sqrt(1-alpha)."""
    nu = 1.0 - alpha
    if nu <= 0.0:
        return math.inf
    return 1.0 / math.sqrt(nu) - 1.0


def theorem2_epsilon(alpha) -> float:
    """Young weight for the Lyapunov analysis: alpha below 1/2, else 1-alpha."""
    return alpha if alpha <= 0.5 else 1.0 - alpha


def _theta_beta(alpha, epsilon):
    nu = 1.0 - alpha
    if nu <= 0.0:
        return 1.0, 0.0
    return 1.0 - nu * (1.0 + epsilon), nu * (1.0 + 1.0 / epsilon)


def theorem2_c(eta, K, H, L, mu, alpha, epsilon=None) -> float:
    """Distortion weight of the Lyapunov function: the lower endpoint of the
    admissible window.  Raises StepsizeTooLarge when the window is empty."""
    if epsilon is None:
        epsilon = theorem2_epsilon(alpha)
    theta, beta = _theta_beta(alpha, epsilon)
    denom = theta - eta * mu
    if denom <= 0.0:
        raise StepsizeTooLarge("Lyapunov weight window is empty (theta <= eta*mu)")
    lower = eta * K * H ** 2 * L ** 2 / (2.0 * denom)
    if beta > 0.0:
        if eta * L >= 1.0:
            raise StepsizeTooLarge("Lyapunov weight window is empty (eta*L >= 1)")
        upper = (1.0 - eta * L) / (2.0 * eta * beta * H ** 2)
        if lower > upper * (1.0 + REL_SLACK):
            raise StepsizeTooLarge("Lyapunov weight window is empty")
    return lower


def _positive_root(a, b, c):
    # largest eta with a*eta^2 + b*eta - c <= 0, for b > 0, c > 0
    if a <= 0.0:
        return c / b
    return (-b + math.sqrt(b * b + 4.0 * a * c)) / (2.0 * a)


def theorem2_stepsize(K, H, L, mu, alpha, safety=0.9) -> float:
    """Stepsize for the linear-rate guarantee.

    Takes the most restrictive of: the stated quadratic condition
    eta^2 L (L - mu) + eta mu <= alpha^2, the window-nonemptiness condition at
    the canonical Young weight, and eta < 1/L — then backs off by `safety`.
    The stated condition alone does not keep the weight window nonempty once
    K*H^4 exceeds 1, hence the explicit intersection.
    """
    stated = _positive_root(L * (L - mu), mu, alpha ** 2)
    epsilon = theorem2_epsilon(alpha)
    theta, beta = _theta_beta(alpha, epsilon)
    nonempty = _positive_root(L * (L * beta * K * H ** 4 - mu), L * theta + mu, theta)
    return safety * min(stated, nonempty, 1.0 / L)


# ---------------------------------------------------------------------------
# per-round bound checks


def check_lemma1(traces, constants, private=False) -> BoundReport:
    """Surrogate gradient offset against the distortion bound, per round."""
    _require(traces, "grad_offset_sq", "distortion")
    K = constants["K"] + (1 if private else 0)
    coef = K * constants["H"] ** 2 * constants["L"] ** 2
    lhs = [tr.grad_offset_sq for tr in traces]
    rhs = [coef * tr.distortion for tr in traces]
    return BoundReport.from_sides("lemma1", lhs, rhs)


def check_lemma2(traces, alpha, eta, H, epsilon=None, compressor=None) -> BoundReport:
    """One-step distortion recursion, per consecutive round pair."""
    _reject_stochastic(compressor)
    _require(traces, "distortion")
    if len(traces) < 2:
        raise TraceIncomplete("need at least two rounds")
    if epsilon is None:
        epsilon = lemma2_epsilon(alpha)
    nu = 1.0 - alpha
    if nu <= 0.0:
        decay, forcing = 0.0, 0.0
    else:
        if not epsilon > 0.0:
            raise ValueError("epsilon must be positive")
        decay = nu * (1.0 + epsilon)
        forcing = nu * (1.0 + 1.0 / epsilon) * eta ** 2 * H ** 2
    lhs = [tr.distortion for tr in traces[1:]]
    rhs = [decay * tr.distortion + forcing * tr.surrogate_grad_sq
           for tr in traces[:-1]]
    return BoundReport.from_sides("lemma2", lhs, rhs)


def check_theorem1_bound(traces, constants, alpha, eta, compressor=None) -> BoundReport:
    """Ergodic squared-gradient average against the sublinear bound."""
    _reject_stochastic(compressor)
    _require(traces, "grad_sq", "true_loss", "distortion")
    K, H, L = constants["K"], constants["H"], constants["L"]
    cap = theorem1_stepsize(K, H, L, alpha)
    if eta > cap * (1.0 + REL_SLACK):
        raise StepsizeTooLarge(f"eta {eta:g} exceeds the guarantee's cap {cap:g}")
    T = len(traces)
    delta = traces[0].true_loss - constants["fstar"]
    lhs = sum(tr.grad_sq for tr in traces) / T
    rhs = 2.0 * delta / (eta * T) + rho_alpha2(K, H, L, alpha) * traces[0].distortion / T
    return BoundReport.from_sides("theorem1", [lhs], [rhs])


def check_theorem2_lyapunov(traces, constants, c=None) -> BoundReport:
    """Per-step descent of V_t = f(x^t) - f* + c D^(t) at rate 1 - eta*mu."""
    _require(traces, "true_loss", "distortion")
    if len(traces) < 2:
        raise TraceIncomplete("need at least two rounds")
    K, H, L = constants["K"], constants["H"], constants["L"]
    mu, alpha, eta = constants["mu"], constants["alpha"], constants["eta"]
    if eta ** 2 * L * (L - mu) + eta * mu > alpha ** 2 * (1.0 + REL_SLACK):
        raise StepsizeTooLarge("stated quadratic stepsize condition unmet")
    if c is None:
        c = theorem2_c(eta, K, H, L, mu, alpha)
    values = [tr.true_loss - constants["fstar"] + c * tr.distortion for tr in traces]
    rate = 1.0 - eta * mu
    lhs = values[1:]
    rhs = [rate * v + LYAPUNOV_ABS_SLACK for v in values[:-1]]
    return BoundReport.from_sides("theorem2", lhs, rhs)


def log_slope(values) -> float:
    """Least-squares slope of log(values) against the round index, fitted on
    the leading positive stretch (the tail can cross zero at convergence)."""
    values = np.asarray(values, dtype=float)
    keep = values > 0
    cut = int(np.argmin(keep)) if not keep.all() else len(values)
    if cut < 2:
        raise ValueError("need at least two positive values")
    t = np.arange(cut)
    return float(np.polyfit(t, np.log(values[:cut]), 1)[0])
