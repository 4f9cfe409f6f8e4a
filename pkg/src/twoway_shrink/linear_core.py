"""Linear algebra for the marginal covariance of a two-way shrinkage model.

Everything here revolves around the |E| x |E| matrix

    Sigma = lambda_a * Za Za^T + lambda_b * Zb Zb^T + M,

where M is the diagonal matrix of inverse cell counts.  Sigma is "diagonal
plus low rank", so solves and traces are routed through the small
(r+c) x (r+c) capacitance matrix

    C = Lam^T Z^T M^{-1} Z Lam + I,      Lam = diag(sqrt(la) I_r, sqrt(lb) I_c)

via the matrix-inverse (Woodbury) identity

    Sigma^{-1} = M^{-1} - M^{-1} Z Lam C^{-1} Lam^T Z^T M^{-1}.

A dense path (forming Sigma explicitly) is kept alongside for small
problems and as a cross-check oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .tables import DesignSet, HyperParams

__all__ = [
    "SigmaContext",
    "NumericError",
    "sigma_solve",
    "shrink_apply",
    "trace_sigma_inv_msq",
    "trace_blocks",
    "logdet_sigma",
    "dense_sigma",
    "LAMBDA_TILDE_EPS",
    "lam_from_tilde",
]

# lambda = +inf is approximated, where a numeric Sigma is needed, by the
# value corresponding to lambda_tilde = (1+lambda)^{-1/2} = 1e-6.
LAMBDA_TILDE_EPS = 1e-6

# Problems up to this many observed cells default to the dense path.
DENSE_MODE_LIMIT = 512


class NumericError(RuntimeError):
    """A factorization or solve failed beyond recovery."""


def lam_from_tilde(lt: float) -> float:
    """Map the bounded parameter lambda_tilde in [0, 1] to lambda in [0, inf].

    lambda_tilde = 0 maps to the numeric stand-in for +inf.
    """
    if not 0.0 <= lt <= 1.0:
        raise ValueError("lambda_tilde must lie in [0, 1]")
    lt = max(lt, LAMBDA_TILDE_EPS)
    return 1.0 / (lt * lt) - 1.0


def _numeric_lambda(lam: float) -> float:
    if np.isinf(lam):
        return lam_from_tilde(0.0)
    return float(lam)


@dataclass(frozen=True, eq=False)
class SigmaContext:
    """Design + hyper-parameters, with the capacitance factor precomputed.

    ``mode`` selects the computation path: "fast" (Woodbury/capacitance),
    "dense" (explicit Sigma), or "auto" (dense for small problems).
    Infinite lambdas are replaced by the numeric stand-in documented in
    :func:`lam_from_tilde`.
    """

    design: DesignSet
    hp: HyperParams
    mode: str = "auto"
    sigma2: float | None = None
    lam_a: float = field(init=False)
    lam_b: float = field(init=False)

    def __post_init__(self):
        if self.mode not in ("auto", "fast", "dense"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "auto":
            mode = "dense" if self.design.n_obs <= DENSE_MODE_LIMIT else "fast"
            object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "lam_a", _numeric_lambda(self.hp.lambda_a))
        object.__setattr__(self, "lam_b", _numeric_lambda(self.hp.lambda_b))

    @cached_property
    def scale(self) -> np.ndarray:
        """Diagonal of Lam: sqrt(lambda_a) on rows, sqrt(lambda_b) on columns."""
        d = self.design
        return np.concatenate([
            np.full(d.r, np.sqrt(self.lam_a)),
            np.full(d.c, np.sqrt(self.lam_b)),
        ])

    @cached_property
    def capacitance(self) -> np.ndarray:
        s = self.scale
        c = s[:, None] * self.design.gram_weighted * s[None, :]
        c[np.diag_indices_from(c)] += 1.0
        return c

    @cached_property
    def capacitance_factor(self):
        """Cholesky factor of the capacitance matrix (with one jitter retry)."""
        c = self.capacitance
        try:
            return sla.cho_factor(c, lower=True)
        except sla.LinAlgError:
            jittered = c + 1e-12 * np.eye(c.shape[0])
            try:
                return sla.cho_factor(jittered, lower=True)
            except sla.LinAlgError as exc:
                raise NumericError("capacitance factorization failed") from exc

    def cap_solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self.capacitance_factor, b)

    @cached_property
    def cap_inverse(self) -> np.ndarray:
        return self.cap_solve(np.eye(self.design.q))

    @cached_property
    def logdet_capacitance(self) -> float:
        f = self.capacitance_factor[0]
        return float(2.0 * np.sum(np.log(np.diag(f))))


def dense_sigma(ctx: SigmaContext) -> np.ndarray:
    """Form Sigma explicitly (dense oracle path)."""
    d = ctx.design
    za, zb = d.Za, d.Zb
    sig = ctx.lam_a * (za @ za.T) + ctx.lam_b * (zb @ zb.T)
    sig[np.diag_indices_from(sig)] += d.m_diag
    return sig


def _check_len(v: np.ndarray, n: int):
    if v.shape[0] != n:
        raise ValueError(f"vector length {v.shape[0]} does not match |E| = {n}")


def sigma_solve(ctx: SigmaContext, v: np.ndarray) -> np.ndarray:
    """Apply Sigma^{-1} to a vector or to each column of a matrix."""
    v = np.asarray(v, dtype=float)
    d = ctx.design
    _check_len(v, d.n_obs)
    if ctx.mode == "dense":
        return sla.solve(dense_sigma(ctx), v, assume_a="pos")
    kinv = d.k_obs.astype(float)
    minv_v = kinv[:, None] * v if v.ndim == 2 else kinv * v
    s = ctx.scale
    if v.ndim == 2:
        t = np.stack([d.effects_rmatvec(minv_v[:, j]) for j in range(v.shape[1])], axis=1)
        w = ctx.cap_solve(s[:, None] * t)
        corr = np.stack([d.effects_matvec(s * w[:, j]) for j in range(v.shape[1])], axis=1)
        return minv_v - kinv[:, None] * corr
    t = d.effects_rmatvec(minv_v)
    w = ctx.cap_solve(s * t)
    return minv_v - kinv * d.effects_matvec(s * w)


def shrink_apply(ctx: SigmaContext, x: np.ndarray) -> np.ndarray:
    """Apply the shrinkage matrix M Sigma^{-1} to a vector.

    Evaluated right to left as x - Z Lam C^{-1} Lam^T Z^T (M^{-1} x), so the
    cost is O(|E| + (r+c)^2) per call after factorization; no matrix-matrix
    product is formed.
    """
    x = np.asarray(x, dtype=float)
    d = ctx.design
    _check_len(x, d.n_obs)
    if x.ndim != 1:
        raise ValueError("shrink_apply expects a vector")
    if ctx.mode == "dense":
        return d.m_diag * sigma_solve(ctx, x)
    t = d.effects_rmatvec(d.k_obs * x)
    s = ctx.scale
    w = ctx.cap_solve(s * t)
    return x - d.effects_matvec(s * w)


def trace_sigma_inv_msq(ctx: SigmaContext, Q: np.ndarray | None = None) -> float:
    """tr(Sigma^{-1} M^2), or tr(Sigma^{-1} M Q M) when a loss matrix is given.

    Uses M Sigma^{-1} M = M - Z Lam C^{-1} Lam^T Z^T, so only the small
    capacitance inverse is needed.
    """
    d = ctx.design
    tr_m = float(np.sum(d.m_diag)) if Q is None else float(d.m_diag @ np.diag(Q))
    if ctx.mode == "dense":
        msm = d.m_diag[:, None] * np.linalg.inv(dense_sigma(ctx)) * d.m_diag[None, :]
        if Q is None:
            return float(np.trace(msm))
        return float(np.sum(msm * Q.T))
    s = ctx.scale
    if Q is None:
        b = s[:, None] * d.gram_plain * s[None, :]
    else:
        zqz = _effects_quad(d, Q)
        b = s[:, None] * zqz * s[None, :]
    return tr_m - float(np.sum(ctx.cap_inverse * b))


def _effects_quad(d: DesignSet, Q: np.ndarray) -> np.ndarray:
    """[Za Zb]^T Q [Za Zb] for a dense symmetric Q."""
    qz = np.stack([d.effects_rmatvec(Q[:, j]) for j in range(Q.shape[1])], axis=1)
    return np.stack([d.effects_rmatvec(qz[k]) for k in range(d.q)], axis=0).T


def trace_blocks(ctx: SigmaContext):
    """Traces used by the estimating-equation residual checker.

    Returns (tr(S^{-1} Za Za^T), tr(S^{-1} Zb Zb^T),
             tr(S^{-1} Za Za^T S^{-1} M^2), tr(S^{-1} Zb Zb^T S^{-1} M^2))
    computed by solving against the columns of each effect block.
    """
    d = ctx.design
    m = d.m_diag
    out = []
    for block in (d.Za, d.Zb):
        x = sigma_solve(ctx, block)
        out.append(float(np.sum(block * x)))
        out.append(float(np.sum((m[:, None] * x) ** 2)))
    t_a, t_a_m, t_b, t_b_m = out
    return t_a, t_b, t_a_m, t_b_m


def logdet_sigma(ctx: SigmaContext) -> float:
    """log |Sigma| via the determinant companion of the Woodbury identity."""
    d = ctx.design
    if ctx.mode == "dense":
        sign, val = np.linalg.slogdet(dense_sigma(ctx))
        if sign <= 0:
            raise NumericError("dense Sigma is not positive definite")
        return float(val)
    return float(np.sum(np.log(d.m_diag))) + ctx.logdet_capacitance
