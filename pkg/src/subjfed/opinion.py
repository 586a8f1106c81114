"""Multinomial subjective opinions and their Dirichlet counterparts.

An opinion over k classes is ``(belief, uncertainty, prior)`` with a
non-informative prior weight ``W``.  It corresponds one-to-one to a
Dirichlet with ``alpha = evidence + W * prior`` whenever the uncertainty
is positive; dogmatic opinions (``u == 0``) exist only in belief space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .special import DomainError, digamma, lgamma

__all__ = [
    "Opinion",
    "DirichletParams",
    "DegenerateOpinionError",
    "DegenerateFusionError",
    "opinion_from_evidence",
    "dirichlet_from_opinion",
    "opinion_from_dirichlet",
    "expect_prob",
    "fuse",
    "fuse_many",
    "fuse_evidence_batch",
    "kl_dirichlet",
    "kl_dirichlet_batch",
]

_TOL = 1e-9
_FUSE_EPS = 1e-12


class DegenerateOpinionError(ValueError):
    """A dogmatic opinion (u == 0) has no finite Dirichlet counterpart."""


class DegenerateFusionError(ValueError):
    """Fusion of two dogmatic opinions is undefined."""


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _check_simplex(prior: np.ndarray, what: str = "prior") -> None:
    if prior.ndim != 1 or prior.size == 0 or not np.all(np.isfinite(prior)):
        raise DomainError(f"{what} must be a finite non-empty vector")
    if np.any(prior < 0.0) or abs(prior.sum() - 1.0) > _TOL:
        raise DomainError(f"{what} must be a probability vector (sum={prior.sum()!r})")


@dataclass(frozen=True, eq=False)
class Opinion:
    belief: np.ndarray
    uncertainty: float
    prior: np.ndarray
    prior_weight: float

    def __post_init__(self):
        belief = _frozen(self.belief)
        prior = _frozen(self.prior)
        object.__setattr__(self, "belief", belief)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "uncertainty", float(self.uncertainty))
        object.__setattr__(self, "prior_weight", float(self.prior_weight))
        if belief.shape != prior.shape:
            raise DomainError("belief and prior must have the same length")
        _check_simplex(prior)
        if not np.all(np.isfinite(belief)) or np.any(belief < -_TOL) or np.any(belief > 1 + _TOL):
            raise DomainError("belief masses must lie in [0, 1]")
        u = self.uncertainty
        if not (-_TOL <= u <= 1 + _TOL):
            raise DomainError("uncertainty must lie in [0, 1]")
        if abs(u + belief.sum() - 1.0) > _TOL:
            raise DomainError("uncertainty + sum(belief) must equal 1")
        if not (self.prior_weight > 0 and np.isfinite(self.prior_weight)):
            raise DomainError("prior weight must be positive")

    @property
    def k(self) -> int:
        return self.belief.size

    @property
    def evidence(self) -> np.ndarray:
        """Evidence implied by the belief masses (requires u > 0)."""
        if self.uncertainty <= 0.0:
            raise DegenerateOpinionError("dogmatic opinion has unbounded evidence")
        return self.prior_weight * self.belief / self.uncertainty

    def __repr__(self) -> str:
        return (
            f"Opinion(belief={np.array2string(self.belief, precision=4)}, "
            f"u={self.uncertainty:.4g}, prior={np.array2string(self.prior, precision=4)}, "
            f"W={self.prior_weight:g})"
        )


@dataclass(frozen=True, eq=False)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        alpha = _frozen(self.alpha)
        if alpha.ndim != 1 or alpha.size == 0:
            raise DomainError("alpha must be a non-empty vector")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
            raise DomainError("Dirichlet concentration must be finite and positive")
        object.__setattr__(self, "alpha", alpha)

    @property
    def strength(self) -> float:
        return float(self.alpha.sum())

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum()


def opinion_from_evidence(evidence, prior, prior_weight: float) -> Opinion:
    e = np.asarray(evidence, dtype=np.float64)
    if e.ndim != 1 or not np.all(np.isfinite(e)) or np.any(e < 0.0):
        raise DomainError("evidence must be a finite, non-negative vector")
    denom = prior_weight + e.sum()
    return Opinion(e / denom, prior_weight / denom, prior, prior_weight)


def dirichlet_from_opinion(op: Opinion) -> DirichletParams:
    if op.uncertainty <= 0.0:
        raise DegenerateOpinionError("dogmatic opinion has no Dirichlet counterpart")
    return DirichletParams(op.evidence + op.prior_weight * op.prior)


def opinion_from_dirichlet(params: DirichletParams, prior, prior_weight: float) -> Opinion:
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != params.alpha.shape:
        raise DomainError("prior length must match alpha")
    evidence = params.alpha - prior_weight * prior
    if np.any(evidence < -_TOL):
        raise DomainError("alpha implies negative evidence for this prior")
    return opinion_from_evidence(np.maximum(evidence, 0.0), prior, prior_weight)


def expect_prob(op: Opinion) -> np.ndarray:
    """Projected probability b + a * u."""
    return op.belief + op.prior * op.uncertainty


def _check_compatible(ops: Sequence[Opinion]) -> None:
    k, w = ops[0].k, ops[0].prior_weight
    for op in ops[1:]:
        if op.k != k:
            raise DomainError("opinions must cover the same number of classes")
        if op.prior_weight != w:
            raise DomainError("opinions must share the prior weight")


def fuse(a: Opinion, b: Opinion) -> Opinion:
    """Uncertainty-informed fusion of two opinions.

    Each opinion is weighted by the other's uncertainty; the priors are
    averaged with confidence weights ``1 - u``.  Dogmatic inputs follow the
    analytic limits: one dogmatic input wins outright, two are an error.
    Two vacuous inputs give the vacuous opinion with the mean prior.
    """
    _check_compatible([a, b])
    ua, ub = a.uncertainty, b.uncertainty
    if ua == 0.0 and ub == 0.0:
        raise DegenerateFusionError("cannot fuse two dogmatic opinions")
    if ua == 0.0:
        return a
    if ub == 0.0:
        return b
    denom = ua + ub - 2.0 * ua * ub
    if denom < _FUSE_EPS:
        if ua > 0.5 and ub > 0.5:
            return _vacuous(0.5 * (a.prior + b.prior), a.prior_weight)
        raise DegenerateFusionError("fusion denominator vanishes")
    belief = (a.belief * (1.0 - ua) * ub + b.belief * (1.0 - ub) * ua) / denom
    u = (2.0 - ua - ub) * ua * ub / denom
    prior = (a.prior * (1.0 - ua) + b.prior * (1.0 - ub)) / (2.0 - ua - ub)
    return Opinion(belief, u, prior / prior.sum(), a.prior_weight)


def _vacuous(prior, prior_weight: float) -> Opinion:
    prior = np.asarray(prior, dtype=np.float64)
    return Opinion(np.zeros_like(prior), 1.0, prior / prior.sum(), prior_weight)


def fuse_many(ops: Sequence[Opinion]) -> Opinion:
    """n-ary fusion as the confidence-weighted average of evidence and prior.

    For two inputs this coincides with :func:`fuse`.  The weighted-average
    form is used directly because chaining the binary operator is not
    associative.
    """
    ops = list(ops)
    if not ops:
        raise ValueError("fuse_many needs at least one opinion")
    _check_compatible(ops)
    if len(ops) == 1:
        return ops[0]
    dogmatic = [op for op in ops if op.uncertainty == 0.0]
    if len(dogmatic) == 1:
        return dogmatic[0]
    if dogmatic:
        raise DegenerateFusionError("cannot fuse several dogmatic opinions")

    weights = np.array([1.0 - op.uncertainty for op in ops])
    total = weights.sum()
    w = ops[0].prior_weight
    if total <= 0.0:
        return _vacuous(np.mean([op.prior for op in ops], axis=0), w)
    evidence = sum(wi * op.evidence for wi, op in zip(weights, ops)) / total
    prior = sum(wi * op.prior for wi, op in zip(weights, ops)) / total
    return opinion_from_evidence(evidence, prior / prior.sum(), w)


def fuse_evidence_batch(
    evidence: np.ndarray, priors: np.ndarray, prior_weight: float
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`fuse_many` for n sources over a batch of samples.

    ``evidence`` is (n, m, k) and ``priors`` is (n, k); returns the fused
    evidence (m, k) and fused prior (m, k), sample by sample.
    """
    evidence = np.asarray(evidence, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    n, m, k = evidence.shape
    if priors.shape != (n, k):
        raise DomainError("priors must be (n, k) matching the evidence")
    if n == 1:
        return evidence[0].copy(), np.broadcast_to(priors[0], (m, k)).copy()
    u = prior_weight / (prior_weight + evidence.sum(axis=2))
    weights = 1.0 - u  # (n, m)
    total = weights.sum(axis=0)
    safe = np.where(total > 0.0, total, 1.0)
    fused_e = np.einsum("nm,nmk->mk", weights, evidence) / safe[:, None]
    fused_a = np.einsum("nm,nk->mk", weights, priors) / safe[:, None]
    vacuous = total <= 0.0
    if vacuous.any():
        fused_e[vacuous] = 0.0
        fused_a[vacuous] = priors.mean(axis=0)
    return fused_e, fused_a / fused_a.sum(axis=1, keepdims=True)


def kl_dirichlet_batch(alpha_p: np.ndarray, alpha_q: np.ndarray) -> np.ndarray:
    """Row-wise KL(Dir(alpha_p) || Dir(alpha_q)) for (n, k) arrays."""
    alpha_p = np.asarray(alpha_p, dtype=np.float64)
    alpha_q = np.asarray(alpha_q, dtype=np.float64)
    if alpha_p.shape != alpha_q.shape:
        raise DomainError("Dirichlet parameter shapes differ")
    sp = alpha_p.sum(axis=-1)
    sq = alpha_q.sum(axis=-1)
    value = (
        lgamma(sp)
        - lgamma(sq)
        + (lgamma(alpha_q) - lgamma(alpha_p)).sum(axis=-1)
        + ((alpha_p - alpha_q) * (digamma(alpha_p) - np.expand_dims(digamma(sp), -1))).sum(axis=-1)
    )
    return value


def kl_dirichlet(p: DirichletParams, q: DirichletParams) -> float:
    """KL(Dir(p) || Dir(q)) in closed form."""
    if p.alpha.shape != q.alpha.shape:
        raise DomainError("Dirichlet dimensions differ")
    return float(kl_dirichlet_batch(p.alpha, q.alpha))
