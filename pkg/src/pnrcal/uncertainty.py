"""First-order uncertainty propagation and contribution budgets.

Every efficiency estimator is a smooth function of the raw inputs: the
per-photon-number counts of the heralded (ON) and non-heralded (OFF)
spectra plus the herald purity.  This module carries those inputs with
their uncertainties (and optionally a full covariance), differentiates the
estimators both analytically and by central finite differences, and turns
gradients into per-input contribution budgets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalInstabilityError
from .model import CountVector, HeraldPurity

# Central-difference step: h = max(1e-6 * |q|, 1e-10), fixed for
# reproducibility across platforms.
FD_REL_STEP = 1e-6
FD_MIN_STEP = 1e-10
GRADIENT_AGREEMENT_RTOL = 1e-6


@dataclass(frozen=True)
class InputVector:
    """Named input quantities with standard uncertainties.

    `covariance`, when present, must be symmetric positive semidefinite
    with diagonal equal to the squared uncertainties.
    """

    names: tuple[str, ...]
    values: np.ndarray
    uncertainties: np.ndarray
    covariance: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        u = np.asarray(self.uncertainties, dtype=float)
        if len(self.names) != v.size or v.shape != u.shape or v.ndim != 1:
            raise DomainError("names, values and uncertainties must align")
        if np.any(u < 0):
            raise DomainError("uncertainties must be >= 0")
        v.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "uncertainties", u)
        if self.covariance is not None:
            c = np.asarray(self.covariance, dtype=float)
            if c.shape != (v.size, v.size):
                raise DomainError("covariance shape mismatch")
            scale = max(np.abs(c).max(), 1e-300)
            if np.abs(c - c.T).max() > 1e-9 * scale:
                raise DomainError("covariance must be symmetric")
            eig = np.linalg.eigvalsh(0.5 * (c + c.T))
            if eig.min() < -1e-9 * max(eig.max(), 1e-300):
                raise DomainError("covariance must be positive semidefinite")
            if np.any(np.abs(np.diag(c) - u**2) > 1e-9 * np.maximum(u**2, 1e-300)):
                raise DomainError("covariance diagonal must equal u^2")
            c.setflags(write=False)
            object.__setattr__(self, "covariance", c)

    @property
    def size(self) -> int:
        return self.values.size

    def replace_values(self, values: np.ndarray) -> "InputVector":
        return InputVector(self.names, values, self.uncertainties, None)


@dataclass(frozen=True)
class UncertaintyBudget:
    """Signed per-input contributions g_i * u(q_i) and the combined total."""

    target: str
    names: tuple[str, ...]
    contributions: np.ndarray
    combined: float

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.contributions)))


def counting_inputs(
    on: CountVector, off: CountVector, xi: HeraldPurity
) -> InputVector:
    """Pack ON counts, OFF counts and the herald purity into one vector."""
    if on.counts.size != off.counts.size:
        raise DomainError("ON and OFF count vectors must share length")
    k = on.counts.size
    names = (
        [f"C_on_{i}" for i in range(k)]
        + [f"C_off_{i}" for i in range(k)]
        + ["xi"]
    )
    values = np.concatenate([on.counts, off.counts, [xi.xi]])
    u = np.concatenate([on.uncertainties, off.uncertainties, [xi.u_xi]])
    return InputVector(tuple(names), values, u)


def _unpack(iv: InputVector) -> tuple[np.ndarray, np.ndarray, float]:
    if iv.size % 2 != 1 or iv.size < 3:
        raise DomainError("expected 2k counts plus xi")
    k = (iv.size - 1) // 2
    return iv.values[:k], iv.values[k : 2 * k], float(iv.values[-1])


class GammaEstimator:
    """Closed-form per-photon-number estimator as a function of raw counts."""

    def __init__(self, i: int):
        if i < 0:
            raise DomainError("photon-number index must be >= 0")
        self.i = i
        self.name = f"gamma{i}"

    def __call__(self, iv: InputVector) -> float:
        c_on, c_off, xi = _unpack(iv)
        p = c_on / c_on.sum()
        b = c_off / c_off.sum()
        i = self.i
        if i == 0:
            return float((b[0] - p[0]) / (xi * b[0]))
        return float((p[i] - b[i]) / (xi * (b[i - 1] - b[i])))

    def gradient(self, iv: InputVector) -> np.ndarray:
        c_on, c_off, xi = _unpack(iv)
        k = c_on.size
        s, t = c_on.sum(), c_off.sum()
        p = c_on / s
        b = c_off / t
        i = self.i
        grad = np.zeros(iv.size)
        # dP_a/dC_j = (delta_aj - P_a) / S, same for the OFF normalization
        if i == 0:
            denom = xi * b[0]
            for j in range(k):
                dp0 = ((1.0 if j == 0 else 0.0) - p[0]) / s
                grad[j] = -dp0 / denom
            for j in range(k):
                db0 = ((1.0 if j == 0 else 0.0) - b[0]) / t
                grad[k + j] = p[0] / (xi * b[0] ** 2) * db0
        else:
            diff = b[i - 1] - b[i]
            val = (p[i] - b[i]) / (xi * diff)
            for j in range(k):
                dpi = ((1.0 if j == i else 0.0) - p[i]) / s
                grad[j] = dpi / (xi * diff)
            for j in range(k):
                dbi = ((1.0 if j == i else 0.0) - b[i]) / t
                dbim = ((1.0 if j == i - 1 else 0.0) - b[i - 1]) / t
                grad[k + j] = (-dbi * (xi * diff) - (p[i] - b[i]) * xi * (dbim - dbi)) / (
                    xi * diff
                ) ** 2
        grad[-1] = -self(iv) / xi
        return grad


class KlyshkoEstimator:
    """Click/no-click contraction gamma_K = (B(0) - P(0)) / xi."""

    name = "gammaK"

    def __call__(self, iv: InputVector) -> float:
        c_on, c_off, xi = _unpack(iv)
        p0 = c_on[0] / c_on.sum()
        b0 = c_off[0] / c_off.sum()
        return float((b0 - p0) / xi)

    def gradient(self, iv: InputVector) -> np.ndarray:
        c_on, c_off, xi = _unpack(iv)
        k = c_on.size
        s, t = c_on.sum(), c_off.sum()
        p0 = c_on[0] / s
        b0 = c_off[0] / t
        grad = np.zeros(iv.size)
        for j in range(k):
            grad[j] = -(((1.0 if j == 0 else 0.0) - p0) / s) / xi
            grad[k + j] = (((1.0 if j == 0 else 0.0) - b0) / t) / xi
        grad[-1] = -self(iv) / xi
        return grad


def finite_difference_gradient(f, at: InputVector) -> np.ndarray:
    """Central differences with step max(1e-6 |q|, 1e-10) per component."""
    q = at.values
    grad = np.zeros(q.size)
    for j in range(q.size):
        h = max(FD_REL_STEP * abs(q[j]), FD_MIN_STEP)
        qp, qm = q.copy(), q.copy()
        qp[j] += h
        qm[j] -= h
        fp = f(at.replace_values(qp))
        fm = f(at.replace_values(qm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise DomainError(f"estimator undefined at perturbed {at.names[j]}")
        grad[j] = (fp - fm) / (2.0 * h)
    return grad


def jacobian(f, at: InputVector) -> np.ndarray:
    """Gradient of an estimator, computed analytically and cross-checked
    against central finite differences; disagreement beyond 1e-6 relative
    raises NumericalInstabilityError."""
    if not hasattr(f, "gradient"):
        raise TypeError("estimator must expose an analytic .gradient")
    analytic = f.gradient(at)
    fd = finite_difference_gradient(f, at)
    # Two noise floors limit what central differences can certify: components
    # many decades below the gradient norm sit under the cancellation noise
    # of the fixed relative step, and every difference quotient carries an
    # absolute rounding floor of order eps * |f| / h.
    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-300)
    steps = np.maximum(FD_REL_STEP * np.abs(at.values), FD_MIN_STEP)
    f_scale = max(1.0, abs(f(at)))
    rounding_floor = 16.0 * np.finfo(float).eps * f_scale / steps
    tol = (
        GRADIENT_AGREEMENT_RTOL * np.maximum(np.abs(analytic), np.abs(fd))
        + 1e-8 * scale
        + rounding_floor
    )
    bad = np.abs(analytic - fd) > tol
    if bad.any():
        j = int(np.argmax(np.abs(analytic - fd)))
        raise NumericalInstabilityError(
            f"analytic/finite-difference gradients disagree at {at.names[j]}: "
            f"{analytic[j]!r} vs {fd[j]!r}"
        )
    return analytic


def propagate(gradient: np.ndarray, inputs: InputVector, target: str = "") -> UncertaintyBudget:
    """combined^2 = g^T Sigma g (full covariance when present, else the
    diagonal); contributions are the signed g_i * u(q_i)."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != inputs.values.shape:
        raise DomainError("gradient and inputs must share ordering and length")
    contributions = g * inputs.uncertainties
    if inputs.covariance is not None:
        combined = float(math.sqrt(max(g @ inputs.covariance @ g, 0.0)))
    else:
        combined = float(math.sqrt(np.sum(contributions**2)))
    return UncertaintyBudget(target, inputs.names, contributions, combined)


def budget_for(f, inputs: InputVector) -> UncertaintyBudget:
    """Jacobian plus propagation in one step."""
    return propagate(jacobian(f, inputs), inputs, target=getattr(f, "name", ""))


def covariance_from_repeats(runs: list[InputVector]) -> InputVector:
    """Mean values and covariance of the mean from repeated measurements.

    Sample covariance uses 1/(n-1); the returned uncertainties are standard
    uncertainties of the mean (sample std / sqrt(n)) and the covariance is
    scaled accordingly so that its diagonal equals their squares.
    """
    if len(runs) < 2:
        raise DomainError("need at least two runs")
    names = runs[0].names
    if any(r.names != names for r in runs):
        raise DomainError("runs must share quantity ordering")
    data = np.stack([r.values for r in runs])
    n = data.shape[0]
    mean = data.mean(axis=0)
    centered = data - mean
    sample_cov = centered.T @ centered / (n - 1)
    cov_of_mean = sample_cov / n
    u = np.sqrt(np.diag(cov_of_mean))
    return InputVector(names, mean, u, cov_of_mean)
