"""Debiased inference: balance fine-tuning, three-way fusion and rejection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LabeledDataset, rebalance_down, rebalance_up
from .evidential import EvidentialModel, TrainConfig, forward, train_local
from .opinion import Opinion, expect_prob, fuse_evidence_batch, fuse_many, opinion_from_evidence
from .special import RngStream

__all__ = [
    "REJECT",
    "InferenceEnsemble",
    "Verdict",
    "BatchVerdicts",
    "FinetuneTwiceError",
    "ClientMetrics",
    "EvalReport",
    "balance_finetune",
    "predict",
    "predict_with_reject",
    "predict_batch",
    "evaluate",
    "auroc",
]

REJECT = -1


def _rejects(u, threshold: float):
    # threshold 1.0 means "never reject", even for a fully vacuous opinion
    return (np.asarray(u) >= threshold) & (threshold < 1.0)


class FinetuneTwiceError(RuntimeError):
    pass


@dataclass
class InferenceEnsemble:
    personalized: EvidentialModel
    generic_up: EvidentialModel
    generic_down: EvidentialModel

    def __post_init__(self):
        ks = {m.num_classes for m in self.models}
        if len(ks) != 1:
            raise ValueError("all three models must cover the same classes")
        if not np.array_equal(self.generic_up.encoder_vector(), self.generic_down.encoder_vector()):
            raise ValueError("generic models must share one encoder")

    @property
    def models(self) -> tuple[EvidentialModel, EvidentialModel, EvidentialModel]:
        return (self.generic_up, self.generic_down, self.personalized)

    @property
    def num_classes(self) -> int:
        return self.personalized.num_classes


@dataclass(frozen=True)
class Verdict:
    predicted_class: int
    probabilities: np.ndarray
    uncertainty: float
    opinion: Opinion

    @property
    def rejected(self) -> bool:
        return self.predicted_class == REJECT


def balance_finetune(
    model: EvidentialModel,
    global_encoder: np.ndarray,
    data: LabeledDataset,
    cfg: TrainConfig,
    rng: RngStream,
    *,
    filter_no: int = 20,
    epochs: int = 5,
    uniform_prior: bool = False,
    client_id: int | None = None,
    done: set[int] | None = None,
) -> tuple[EvidentialModel, EvidentialModel]:
    """Head-only fine-tuning on up- and down-sampled copies of the client data.

    Both generic models start from ``model``'s head with ``global_encoder``
    installed; the encoder and prior stay fixed.  If no class reaches
    ``filter_no`` samples the threshold drops to 1.  Passing ``client_id``
    and a shared ``done`` set enforces one call per client.
    """
    if done is not None and client_id is not None:
        if client_id in done:
            raise FinetuneTwiceError(f"client {client_id} was already balance-tuned")
        done.add(client_id)
    threshold = filter_no if data.class_counts().max() >= filter_no else 1
    up_data = rebalance_up(data, rng, filter_no=threshold)
    down_data = rebalance_down(data, threshold, rng)

    start = model.copy()
    start.set_encoder_vector(global_encoder)
    if uniform_prior:
        start.prior = np.full(start.num_classes, 1.0 / start.num_classes)
    tune_cfg = dataclasses.replace(cfg, local_epochs=epochs, train_prior=False)
    generic_up, _ = train_local(start, up_data.features, up_data.labels, tune_cfg, rng, freeze_encoder=True)
    generic_down, _ = train_local(
        start, down_data.features, down_data.labels, tune_cfg, rng, freeze_encoder=True
    )
    return generic_up, generic_down


@dataclass
class BatchVerdicts:
    predicted: np.ndarray  # REJECT where rejected
    probabilities: np.ndarray
    uncertainty: np.ndarray
    argmax: np.ndarray  # prediction ignoring the threshold
    invalid: int = 0  # source rows replaced by vacuous evidence


def _source_evidence(model: EvidentialModel, X: np.ndarray) -> tuple[np.ndarray, int]:
    e = forward(model, X)
    bad = ~np.all(np.isfinite(e), axis=1)
    if bad.any():
        e = e.copy()
        e[bad] = 0.0
    return e, int(bad.sum())


def predict_batch(ensemble: InferenceEnsemble, X: np.ndarray, threshold: float = 1.0) -> BatchVerdicts:
    """Fused verdicts for every row of ``X``.

    A source whose evidence is non-finite on a row (a diverged model)
    contributes the vacuous opinion there.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sources = [_source_evidence(m, X) for m in ensemble.models]
    evidence = np.stack([s[0] for s in sources])
    priors = np.stack([m.prior for m in ensemble.models])
    W = ensemble.personalized.prior_weight
    fused_e, fused_a = fuse_evidence_batch(evidence, priors, W)
    denom = W + fused_e.sum(axis=1)
    u = W / denom
    probs = fused_e / denom[:, None] + fused_a * u[:, None]
    arg = probs.argmax(axis=1)
    predicted = np.where(_rejects(u, threshold), REJECT, arg)
    return BatchVerdicts(predicted, probs, u, arg, sum(s[1] for s in sources))


def predict_with_reject(ensemble: InferenceEnsemble, x, threshold: float) -> Verdict:
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    opinions = [
        opinion_from_evidence(_source_evidence(m, x[None, :])[0][0], m.prior, m.prior_weight)
        for m in ensemble.models
    ]
    fused = fuse_many(opinions)
    probs = expect_prob(fused)
    label = REJECT if _rejects(fused.uncertainty, threshold) else int(np.argmax(probs))
    return Verdict(label, probs, fused.uncertainty, fused)


def predict(ensemble: InferenceEnsemble, x) -> Verdict:
    return predict_with_reject(ensemble, x, 1.0)


def auroc(negatives: np.ndarray, positives: np.ndarray) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), from average ranks."""
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    pos = np.asarray(positives, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ValueError("auroc needs both classes")
    scores = np.concatenate([neg, pos])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[neg.size :].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


@dataclass
class ClientMetrics:
    client_id: int
    n_test: int
    accuracy: dict[float, float]  # NaN when nothing is accepted
    coverage: dict[float, float]
    correct: dict[float, int]
    accepted: dict[float, int]


@dataclass
class EvalReport:
    thresholds: list[float]
    clients: list[ClientMetrics]
    mean_accuracy: dict[float, float]
    pooled_accuracy: dict[float, float]
    mean_coverage: dict[float, float]
    auroc: float
    in_uncertainty: np.ndarray
    ood_uncertainty: np.ndarray
    histogram_edges: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 11))
    invalid_predictions: int = 0

    def histograms(self) -> tuple[np.ndarray, np.ndarray]:
        h_in, _ = np.histogram(self.in_uncertainty, bins=self.histogram_edges)
        h_ood, _ = np.histogram(self.ood_uncertainty, bins=self.histogram_edges)
        return h_in, h_ood


def evaluate(
    ensembles: Sequence[InferenceEnsemble],
    tests: Sequence[LabeledDataset],
    thresholds: Sequence[float],
    ood: np.ndarray,
    client_ids: Sequence[int] | None = None,
) -> EvalReport:
    """Accuracy and coverage per threshold, plus in-distribution vs OOD separation.

    ``mean_accuracy`` averages client accuracies over clients with at least
    one accepted sample; ``pooled_accuracy`` counts all accepted samples
    together.  AUROC pools every client's test and OOD uncertainties.
    """
    if len(ensembles) != len(tests) or not tests:
        raise ValueError("need one nonempty test set per ensemble")
    ids = list(range(len(tests))) if client_ids is None else list(client_ids)
    thresholds = [float(t) for t in thresholds]
    clients, u_in, u_ood = [], [], []
    invalid = 0
    for cid, ens, test in zip(ids, ensembles, tests):
        v = predict_batch(ens, test.features)
        invalid += v.invalid
        u_in.append(v.uncertainty)
        correct_all = v.argmax == test.labels
        acc, cov, cor, accd = {}, {}, {}, {}
        for t in thresholds:
            accepted = ~_rejects(v.uncertainty, t)
            n_acc = int(accepted.sum())
            n_cor = int((correct_all & accepted).sum())
            acc[t] = n_cor / n_acc if n_acc else float("nan")
            cov[t] = n_acc / test.n
            cor[t], accd[t] = n_cor, n_acc
        clients.append(ClientMetrics(cid, test.n, acc, cov, cor, accd))
        vo = predict_batch(ens, ood)
        invalid += vo.invalid
        u_ood.append(vo.uncertainty)

    mean_acc, pooled, mean_cov = {}, {}, {}
    for t in thresholds:
        vals = [c.accuracy[t] for c in clients if c.accepted[t]]
        mean_acc[t] = float(np.mean(vals)) if vals else float("nan")
        n_acc = sum(c.accepted[t] for c in clients)
        pooled[t] = sum(c.correct[t] for c in clients) / n_acc if n_acc else float("nan")
        mean_cov[t] = float(np.mean([c.coverage[t] for c in clients]))
    u_in_all = np.concatenate(u_in)
    u_ood_all = np.concatenate(u_ood)
    return EvalReport(
        thresholds,
        clients,
        mean_acc,
        pooled,
        mean_cov,
        auroc(u_in_all, u_ood_all),
        u_in_all,
        u_ood_all,
        invalid_predictions=invalid,
    )
