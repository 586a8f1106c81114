"""Server-side aggregation with two-stage upload filtering.

Stage 1 rejects uploads whose evidence on the server's holdout set is
non-finite or above ``evidence_cap``.  Stage 2 scores each survivor by the
mean Dirichlet KL between its opinions and the fused opinion of all
survivors, then rejects groups of uploads whose scores nearly coincide.
Only encoder parameters are ever aggregated.

Every reduction over clients runs in ``client_id`` order, so results do
not depend on the order bundles arrive in.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evidential import EvidentialModel, forward
from .opinion import DirichletParams, fuse_evidence_batch, kl_dirichlet_batch

__all__ = [
    "AGGREGATION_RULES",
    "UploadBundle",
    "FilterConfig",
    "Rejection",
    "AuditRecord",
    "AggregationError",
    "holdout_evidence",
    "aggregate_encoders",
    "overflow_filter",
    "model_uncertainty",
    "similarity_filter",
    "robust_aggregate",
    "secure_aggregate",
]

log = logging.getLogger(__name__)

AGGREGATION_RULES = ("fedavg", "median", "trimmed_mean", "krum", "multi_krum", "norm_clip")
DEFAULT_EVIDENCE_CAP = math.exp(20.0)


class AggregationError(ValueError):
    pass


@dataclass
class UploadBundle:
    client_id: int
    model: EvidentialModel
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise AggregationError("sample_count must be positive")


@dataclass
class FilterConfig:
    holdout: np.ndarray
    evidence_cap: float = DEFAULT_EVIDENCE_CAP
    similarity_tau: float = 1e-6
    min_cluster: int = 2
    overflow_enabled: bool = True
    similarity_enabled: bool = True

    def __post_init__(self):
        self.holdout = np.asarray(self.holdout, dtype=np.float64)
        if self.holdout.ndim != 2 or self.holdout.shape[0] == 0:
            raise AggregationError("holdout must be a nonempty (H, d) matrix")
        if not self.evidence_cap > 0 or not self.similarity_tau > 0:
            raise AggregationError("evidence_cap and similarity_tau must be positive")
        if self.min_cluster < 2:
            raise AggregationError("min_cluster must be at least 2")


@dataclass(frozen=True)
class Rejection:
    client_id: int
    stage: str
    reason: str
    uncertainty: float = float("nan")


@dataclass
class AuditRecord:
    rejections: list[Rejection] = field(default_factory=list)
    model_uncertainty: dict[int, float] = field(default_factory=dict)
    kept: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def rejected_ids(self) -> set[int]:
        return {r.client_id for r in self.rejections}


def _ordered(bundles: Sequence[UploadBundle]) -> list[UploadBundle]:
    ids = [b.client_id for b in bundles]
    if len(set(ids)) != len(ids):
        raise AggregationError("duplicate client ids in one round")
    return sorted(bundles, key=lambda b: b.client_id)


def holdout_evidence(bundle: UploadBundle, holdout: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        return forward(bundle.model, holdout)


def aggregate_encoders(bundles: Sequence[UploadBundle]) -> np.ndarray:
    """Sample-count weighted mean of the encoder parameter vectors."""
    if not bundles:
        raise AggregationError("nothing to aggregate")
    bundles = _ordered(bundles)
    vectors = [b.model.encoder_vector() for b in bundles]
    if any(v.shape != vectors[0].shape for v in vectors):
        raise AggregationError("encoder shapes differ")
    if len(vectors) == 1:
        return vectors[0].copy()
    counts = np.array([b.sample_count for b in bundles], dtype=np.float64)
    weights = counts / counts.sum()
    out = np.zeros_like(vectors[0])
    with np.errstate(all="ignore"):
        for w, v in zip(weights, vectors):
            out += w * v
    return out


def overflow_filter(
    bundles: Sequence[UploadBundle],
    cfg: FilterConfig,
    evidence: dict[int, np.ndarray] | None = None,
) -> tuple[list[UploadBundle], list[Rejection]]:
    kept, rejected = [], []
    for b in _ordered(bundles):
        e = evidence[b.client_id] if evidence is not None else holdout_evidence(b, cfg.holdout)
        if not np.all(np.isfinite(e)):
            rejected.append(Rejection(b.client_id, "overflow", "non-finite evidence"))
        elif e.max() > cfg.evidence_cap:
            rejected.append(
                Rejection(b.client_id, "overflow", f"max evidence {e.max():.4g} above cap")
            )
        else:
            kept.append(b)
    return kept, rejected


def _reference_alpha(evidence: list[np.ndarray], priors: list[np.ndarray], prior_weight: float):
    fused_e, fused_a = fuse_evidence_batch(np.stack(evidence), np.stack(priors), prior_weight)
    return fused_e + prior_weight * fused_a


def model_uncertainty(
    bundle: UploadBundle,
    reference: Sequence[DirichletParams] | np.ndarray,
    holdout: np.ndarray,
    evidence: np.ndarray | None = None,
) -> float:
    """Mean KL from the bundle's holdout Dirichlets to the reference ones."""
    ref = (
        np.asarray(reference, dtype=np.float64)
        if isinstance(reference, np.ndarray)
        else np.stack([r.alpha for r in reference])
    )
    if ref.shape[0] != holdout.shape[0]:
        raise AggregationError("reference length must equal the holdout size")
    e = holdout_evidence(bundle, holdout) if evidence is None else evidence
    alpha = e + bundle.model.prior_weight * bundle.model.prior
    return float(np.mean(kl_dirichlet_batch(alpha, ref)))


def _single_linkage(values: np.ndarray, tau: float) -> list[list[int]]:
    order = np.argsort(values, kind="stable")
    groups: list[list[int]] = [[int(order[0])]]
    for prev, cur in zip(order[:-1], order[1:]):
        if values[cur] - values[prev] <= tau:
            groups[-1].append(int(cur))
        else:
            groups.append([int(cur)])
    return groups


def similarity_filter(
    kept: Sequence[UploadBundle],
    cfg: FilterConfig,
    evidence: dict[int, np.ndarray] | None = None,
) -> tuple[list[UploadBundle], list[Rejection], dict[int, float], list[str]]:
    """Reject groups of uploads whose model uncertainties nearly coincide.

    Returns survivors, rejections, the per-client uncertainty scores and any
    warnings.
    """
    if not kept:
        raise AggregationError("similarity filter needs at least one bundle")
    bundles = _ordered(kept)
    ev = [
        evidence[b.client_id] if evidence is not None else holdout_evidence(b, cfg.holdout)
        for b in bundles
    ]
    W = bundles[0].model.prior_weight
    ref = _reference_alpha(ev, [b.model.prior for b in bundles], W)
    scores = np.array(
        [model_uncertainty(b, ref, cfg.holdout, e) for b, e in zip(bundles, ev)]
    )
    by_id = {b.client_id: float(s) for b, s in zip(bundles, scores)}

    flagged: set[int] = set()
    for group in _single_linkage(scores, cfg.similarity_tau):
        if len(group) >= cfg.min_cluster:
            flagged.update(group)
    warnings = []
    if len(flagged) == len(bundles):
        rank = np.argsort(scores, kind="stable")
        spared = int(rank[(len(bundles) - 1) // 2])
        flagged.discard(spared)
        msg = (
            f"similarity filter would reject all {len(bundles)} uploads; "
            f"keeping client {bundles[spared].client_id} (median model uncertainty)"
        )
        log.warning(msg)
        warnings.append(msg)

    survivors, rejected = [], []
    for i, b in enumerate(bundles):
        if i in flagged:
            rejected.append(
                Rejection(b.client_id, "similarity", "model uncertainty within tau of another upload", scores[i])
            )
        else:
            survivors.append(b)
    return survivors, rejected, by_id, warnings


def _encoder_matrix(bundles: Sequence[UploadBundle]) -> np.ndarray:
    vectors = [b.model.encoder_vector() for b in bundles]
    if any(v.shape != vectors[0].shape for v in vectors):
        raise AggregationError("encoder shapes differ")
    return np.stack(vectors)


def _krum_scores(points: np.ndarray, f: int) -> np.ndarray:
    n = points.shape[0]
    sq = np.sum(points * points, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0)
    neighbours = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(dist[i], i)
        scores[i] = np.sort(others)[:neighbours].sum()
    return scores


def robust_aggregate(
    bundles: Sequence[UploadBundle],
    rule: str,
    *,
    num_attackers: int = 0,
    trim: int | None = None,
    multi_krum_m: int | None = None,
    clip_norm: float | None = None,
    reference: np.ndarray | None = None,
) -> np.ndarray:
    """Baseline aggregators over encoder parameters.

    ``num_attackers`` is the assumed attacker count f for the Krum family and
    the default trim count.  ``norm_clip`` clips updates relative to
    ``reference`` (the previous global encoder, zero if omitted) at
    ``clip_norm``, defaulting to the median update norm.
    """
    if rule not in AGGREGATION_RULES:
        raise AggregationError(f"unknown aggregation rule {rule!r}")
    if not bundles:
        raise AggregationError("nothing to aggregate")
    if rule == "fedavg":
        return aggregate_encoders(bundles)
    bundles = _ordered(bundles)
    X = _encoder_matrix(bundles)
    n = X.shape[0]
    with np.errstate(all="ignore"):
        if rule == "median":
            return np.median(X, axis=0)
        if rule == "trimmed_mean":
            t = num_attackers if trim is None else trim
            if n <= 2 * t:
                raise AggregationError(f"cannot trim {t} from each side of {n} updates")
            return np.sort(X, axis=0)[t : n - t].mean(axis=0)
        if rule in ("krum", "multi_krum"):
            f = num_attackers
            if n < 2 * f + 3:
                raise AggregationError(f"krum needs n >= 2f + 3 (n={n}, f={f})")
            scores = _krum_scores(X, f)
            order = np.argsort(scores, kind="stable")
            if rule == "krum":
                return X[order[0]].copy()
            m = n - f if multi_krum_m is None else multi_krum_m
            return X[order[:m]].mean(axis=0)
        # norm_clip
        ref = np.zeros(X.shape[1]) if reference is None else np.asarray(reference, dtype=np.float64)
        deltas = X - ref
        norms = np.linalg.norm(deltas, axis=1)
        c = float(np.median(norms)) if clip_norm is None else clip_norm
        scale = np.where(norms > c, c / np.where(norms > 0, norms, 1.0), 1.0)
        return ref + (deltas * scale[:, None]).mean(axis=0)


def secure_aggregate(
    bundles: Sequence[UploadBundle],
    cfg: FilterConfig,
    fallback: np.ndarray | None = None,
) -> tuple[np.ndarray, AuditRecord]:
    """Overflow filter, then similarity filter, then weighted encoder mean.

    If stage 1 rejects every upload the ``fallback`` encoder (normally the
    previous global one) is returned unchanged.
    """
    if not bundles:
        raise AggregationError("nothing to aggregate")
    audit = AuditRecord()
    bundles = _ordered(bundles)
    evidence = None
    if cfg.overflow_enabled or cfg.similarity_enabled:
        evidence = {b.client_id: holdout_evidence(b, cfg.holdout) for b in bundles}

    kept = list(bundles)
    if cfg.overflow_enabled:
        kept, rejected = overflow_filter(kept, cfg, evidence)
        audit.rejections += rejected
    if not kept:
        msg = "every upload failed the overflow filter; keeping the previous encoder"
        log.warning(msg)
        audit.warnings.append(msg)
        if fallback is None:
            raise AggregationError(msg)
        return np.array(fallback, dtype=np.float64), audit
    if cfg.similarity_enabled:
        kept, rejected, scores, warnings = similarity_filter(kept, cfg, evidence)
        audit.rejections += rejected
        audit.model_uncertainty = scores
        audit.warnings += warnings
    audit.kept = [b.client_id for b in kept]
    return aggregate_encoders(kept), audit
