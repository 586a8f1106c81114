"""Round orchestration for personalized federated training.

Each round: every client takes the global encoder (heads and priors stay
local), honest clients train, malicious clients build attack uploads, the
server aggregates encoders, and a report is recorded.  After the last
round each client balance-tunes two generic heads for inference.

Randomness is drawn from per-client, per-round streams and every
reduction runs in client-id order, so results do not depend on the order
clients are processed in.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import adversary
from .adversary import AttackConfig
from .data import LabeledDataset, train_test_split
from .evidential import (
    EvidentialModel,
    LossBreakdown,
    NonFiniteLossError,
    ShapeMismatchError,
    TrainConfig,
    class_frequency_prior,
    forward,
    train_local,
)
from .inference import InferenceEnsemble, balance_finetune
from .server import (
    AGGREGATION_RULES,
    AuditRecord,
    FilterConfig,
    UploadBundle,
    robust_aggregate,
    secure_aggregate,
)
from .special import RngStream

__all__ = [
    "DEFENSE_RULES",
    "DefenseConfig",
    "FederationConfig",
    "ClientState",
    "RoundReport",
    "TrainingResult",
    "setup_clients",
    "personalize_sync",
    "run_round",
    "run_training",
    "evaluation_inputs",
]

log = logging.getLogger(__name__)

DEFENSE_RULES = ("tpfl",) + AGGREGATION_RULES


@dataclass
class DefenseConfig:
    rule: str = "tpfl"
    num_attackers: int = 0
    trim: int | None = None
    multi_krum_m: int | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.rule not in DEFENSE_RULES:
            raise ValueError(f"unknown defense rule {self.rule!r}")


@dataclass
class FederationConfig:
    seed: int = 0
    rounds: int = 30
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu6"
    prior_weight: float | None = None  # defaults to the class count
    train: TrainConfig = field(default_factory=TrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    test_fraction: float = 0.25
    participation: float = 1.0
    filter_no: int = 20
    finetune_epochs: int = 5
    # Ablation: fixed uniform prior instead of the trainable frequency-initialised one.
    uniform_prior: bool = False
    generic_uniform_prior: bool = False


@dataclass(eq=False)
class ClientState:
    id: int
    dataset: LabeledDataset
    test: LabeledDataset | None
    model: EvidentialModel
    rng: RngStream
    malicious: bool = False
    attack: AttackConfig | None = None
    diverged_rounds: list[int] = field(default_factory=list)

    def stream(self, *purpose) -> RngStream:
        return RngStream.for_purpose(self.rng.seed, "client", self.id, *purpose)


@dataclass
class RoundReport:
    round: int
    losses: dict[int, LossBreakdown]
    audit: AuditRecord
    accuracy: dict[int, float]
    mean_accuracy: float
    mean_uncertainty: float
    participants: list[int]
    malicious: list[int]
    diverged: list[int]
    global_norm: float


@dataclass
class TrainingResult:
    clients: list[ClientState]
    global_encoder: np.ndarray
    reports: list[RoundReport]
    ensembles: dict[int, InferenceEnsemble]
    holdout: np.ndarray


def setup_clients(
    shards: Sequence[LabeledDataset], cfg: FederationConfig
) -> tuple[list[ClientState], np.ndarray]:
    """Split shards into train/test, build models and apply offline attacks.

    All clients start from one shared encoder initialisation; heads are
    initialised per client.  Returns the clients and the initial encoder.
    """
    k = shards[0].k
    dim = shards[0].dim
    sizes = [dim, *cfg.hidden]
    template = EvidentialModel.init(
        sizes,
        k,
        RngStream.for_purpose(cfg.seed, "init-encoder"),
        prior_weight=cfg.prior_weight,
        activation=cfg.activation,
    )
    global_encoder = template.encoder_vector()
    bad = adversary.select_malicious(cfg.seed, len(shards), cfg.attack.malicious_ratio)
    if not cfg.attack.active:
        bad = frozenset()

    clients = []
    for cid, shard in enumerate(shards):
        rng = RngStream.for_purpose(cfg.seed, "client-root", cid)
        state = ClientState(cid, shard, None, template, rng)
        train, test = train_test_split(shard, cfg.test_fraction, state.stream("split"))
        model = EvidentialModel.init(
            sizes, k, state.stream("init-head"), prior_weight=cfg.prior_weight, activation=cfg.activation
        )
        model.set_encoder_vector(global_encoder)
        model.prior = (
            np.full(k, 1.0 / k) if cfg.uniform_prior else class_frequency_prior(train.labels, k)
        )
        malicious = cid in bad
        if malicious and cfg.attack.kind == "label_flip":
            train = adversary.label_flip(train)
        state.dataset, state.test, state.model = train, test, model
        state.malicious = malicious
        state.attack = cfg.attack if malicious else None
        clients.append(state)
    return clients, global_encoder


def personalize_sync(client: ClientState, global_encoder: np.ndarray) -> ClientState:
    """Install the global encoder; head and prior are left untouched."""
    if np.shape(global_encoder) != (client.model.encoder_size,):
        raise ShapeMismatchError("global encoder does not fit the client model")
    model = client.model.copy()
    model.set_encoder_vector(global_encoder)
    return dataclasses.replace(client, model=model)


def _accuracy(model: EvidentialModel, data: LabeledDataset | None) -> tuple[float, float]:
    if data is None:
        return float("nan"), float("nan")
    with np.errstate(all="ignore"):
        e = forward(model, data.features)
    finite = np.all(np.isfinite(e), axis=1)
    pred = np.where(finite, np.argmax(np.where(np.isfinite(e), e, -np.inf), axis=1), -1)
    W = model.prior_weight
    u = np.where(finite, W / (W + np.where(finite, e.sum(axis=1), 0.0)), 1.0)
    return float(np.mean(pred == data.labels)), float(np.mean(u))


def _train_cfg(cfg: FederationConfig) -> TrainConfig:
    if cfg.uniform_prior:
        return dataclasses.replace(cfg.train, train_prior=False)
    return cfg.train


def _attack_vector(
    client: ClientState,
    attack: AttackConfig,
    benign: list[np.ndarray],
    context: "_RoundContext",
) -> np.ndarray:
    own = client.model.parameter_vector()
    kind = attack.kind
    if kind == "random":
        vec = adversary.random_update(own, attack.noise_sigma, client.stream("attack", context.round))
    elif kind == "lie":
        vec = context.shared("lie", lambda: adversary.lie_update(benign, attack.z))
    elif kind == "mpaf":
        base = context.mpaf_base.parameter_vector()
        vec = own + adversary.mpaf_update(own, base, attack.lambda_scale)
    elif kind == "stat_opt":
        vec = context.shared("stat_opt", lambda: context.stat_opt(benign))
    else:
        raise ValueError(f"{kind!r} is not a parameter-space attack")
    if attack.encoder_only:
        vec = np.concatenate([vec[: client.model.encoder_size], own[client.model.encoder_size :]])
    return vec


@dataclass
class _RoundContext:
    round: int
    cfg: FederationConfig
    filters: FilterConfig | None
    honest_bundles: list[UploadBundle]
    colluders: list[ClientState]
    global_encoder: np.ndarray
    mpaf_base: EvidentialModel | None
    cache: dict = field(default_factory=dict)

    def shared(self, key, make):
        if key not in self.cache:
            self.cache[key] = make()
        return self.cache[key]

    def stat_opt(self, benign: list[np.ndarray]) -> np.ndarray:
        attack = self.cfg.attack

        def survives(candidate: np.ndarray) -> bool:
            bundles = list(self.honest_bundles)
            for c in self.colluders:
                m = c.model.copy()
                m.set_parameter_vector(candidate)
                bundles.append(UploadBundle(c.id, m, c.dataset.n))
            kept = _simulate_kept(bundles, self.cfg.defense, self.filters, self.global_encoder)
            return all(c.id in kept for c in self.colluders)

        _, vec = adversary.stat_opt_search(benign, survives, attack.gamma_min, attack.gamma_max)
        return vec


def _simulate_kept(
    bundles: list[UploadBundle],
    defense: DefenseConfig,
    filters: FilterConfig | None,
    reference: np.ndarray,
) -> set[int]:
    """Ids whose uploads would influence the aggregate under ``defense``."""
    ids = {b.client_id for b in bundles}
    if defense.rule == "tpfl" and filters is not None:
        _, audit = secure_aggregate(bundles, filters, fallback=reference)
        return ids - audit.rejected_ids
    if defense.rule == "krum":
        agg = robust_aggregate(bundles, "krum", num_attackers=defense.num_attackers)
        return {b.client_id for b in bundles if np.array_equal(b.model.encoder_vector(), agg)}
    if defense.rule == "multi_krum":
        # a colluder survives multi-krum when it sits among the selected m
        from .server import _krum_scores

        ordered = sorted(bundles, key=lambda b: b.client_id)
        X = np.stack([b.model.encoder_vector() for b in ordered])
        scores = _krum_scores(X, defense.num_attackers)
        m = len(ordered) - defense.num_attackers if defense.multi_krum_m is None else defense.multi_krum_m
        chosen = np.argsort(scores, kind="stable")[:m]
        return {ordered[i].client_id for i in chosen}
    return ids


def _aggregate(
    bundles: list[UploadBundle],
    cfg: FederationConfig,
    filters: FilterConfig | None,
    previous: np.ndarray,
) -> tuple[np.ndarray, AuditRecord]:
    d = cfg.defense
    if d.rule == "tpfl":
        if filters is None:
            raise ValueError("the tpfl rule needs a filter configuration")
        return secure_aggregate(bundles, filters, fallback=previous)
    agg = robust_aggregate(
        bundles,
        d.rule,
        num_attackers=d.num_attackers,
        trim=d.trim,
        multi_krum_m=d.multi_krum_m,
        clip_norm=d.clip_norm,
        reference=previous,
    )
    audit = AuditRecord(kept=sorted(b.client_id for b in bundles))
    return agg, audit


def run_round(
    clients: Sequence[ClientState],
    global_encoder: np.ndarray,
    filters: FilterConfig | None,
    cfg: FederationConfig,
    round_idx: int,
    mpaf_base: EvidentialModel | None = None,
) -> tuple[np.ndarray, list[ClientState], RoundReport]:
    """One communication round; returns the new global encoder, the updated
    clients (same order as given) and the round report."""
    if not clients:
        raise ValueError("no clients")
    ordered = sorted(clients, key=lambda c: c.id)
    participants = _participants(ordered, cfg, round_idx)
    train_cfg = _train_cfg(cfg)

    updated: dict[int, ClientState] = {}
    losses: dict[int, LossBreakdown] = {}
    diverged: list[int] = []
    honest_bundles: list[UploadBundle] = []
    colluders: list[ClientState] = []
    for client in ordered:
        if client.id not in participants:
            updated[client.id] = client
            continue
        synced = personalize_sync(client, global_encoder)
        param_attack = (
            synced.malicious and synced.attack is not None and synced.attack.kind in adversary.PARAMETER_ATTACKS
        )
        if param_attack:
            colluders.append(synced)
            updated[client.id] = synced
            continue
        try:
            model, history = train_local(
                synced.model,
                synced.dataset.features,
                synced.dataset.labels,
                train_cfg,
                synced.stream("train", round_idx),
            )
            if history:
                losses[client.id] = history[-1]
        except NonFiniteLossError as err:
            log.warning("client %d diverged in round %d: %s", client.id, round_idx, err)
            model = synced.model
            diverged.append(client.id)
            synced = dataclasses.replace(synced, diverged_rounds=synced.diverged_rounds + [round_idx])
        synced = dataclasses.replace(synced, model=model)
        updated[client.id] = synced
        if not synced.malicious:
            honest_bundles.append(UploadBundle(synced.id, model, synced.dataset.n))

    bundles = list(honest_bundles)
    # label-flip clients trained like honest ones on corrupted data
    colluder_ids = {c.id for c in colluders}
    bundles += [
        UploadBundle(c.id, c.model, c.dataset.n)
        for c in (updated[i] for i in sorted(participants))
        if c.malicious and c.id not in colluder_ids
    ]
    if colluders:
        benign = [b.model.parameter_vector() for b in honest_bundles]
        context = _RoundContext(
            round_idx, cfg, filters, honest_bundles, colluders, global_encoder, mpaf_base
        )
        for c in colluders:
            vec = _attack_vector(c, c.attack, benign, context)
            m = c.model.copy()
            m.set_parameter_vector(vec)
            bundles.append(UploadBundle(c.id, m, c.dataset.n))

    new_global, audit = _aggregate(bundles, cfg, filters, global_encoder)

    accuracy, uncert = {}, []
    for c in ordered:
        if c.malicious:
            continue
        acc, u = _accuracy(updated[c.id].model, updated[c.id].test)
        accuracy[c.id] = acc
        uncert.append(u)
    report = RoundReport(
        round=round_idx,
        losses=losses,
        audit=audit,
        accuracy=accuracy,
        mean_accuracy=float(np.nanmean(list(accuracy.values()))) if accuracy else float("nan"),
        mean_uncertainty=float(np.nanmean(uncert)) if uncert else float("nan"),
        participants=sorted(participants),
        malicious=sorted(c.id for c in ordered if c.malicious),
        diverged=diverged,
        global_norm=float(np.linalg.norm(new_global)),
    )
    by_id = {c.id: i for i, c in enumerate(clients)}
    result = [None] * len(clients)
    for cid, state in updated.items():
        result[by_id[cid]] = state
    return new_global, result, report


def _participants(ordered: Sequence[ClientState], cfg: FederationConfig, round_idx: int) -> set[int]:
    ids = [c.id for c in ordered]
    if cfg.participation >= 1.0:
        return set(ids)
    count = max(1, int(round(cfg.participation * len(ids))))
    gen = RngStream.for_purpose(cfg.seed, "participation", round_idx).generator
    return {ids[i] for i in gen.choice(len(ids), size=count, replace=False)}


def mpaf_base_model(clients: Sequence[ClientState], cfg: FederationConfig) -> EvidentialModel:
    m = clients[0].model
    sizes = [m.input_dim] + [layer.weight.shape[1] for layer in m.encoder]
    return EvidentialModel.init(
        sizes,
        m.num_classes,
        RngStream.for_purpose(cfg.seed, "mpaf-base"),
        prior_weight=m.prior_weight,
        activation=m.activation,
    )


def run_training(
    shards: Sequence[LabeledDataset],
    holdout: np.ndarray,
    cfg: FederationConfig,
    filters: FilterConfig | None = None,
    on_round=None,
) -> TrainingResult:
    """Run ``cfg.rounds`` rounds, then balance-tune every honest client.

    ``on_round(report)`` is called after each round so callers can persist
    progress even if a later round fails.
    """
    clients, global_encoder = setup_clients(shards, cfg)
    if filters is None and cfg.defense.rule == "tpfl":
        filters = FilterConfig(holdout)
    mpaf_base = mpaf_base_model(clients, cfg) if cfg.attack.kind == "mpaf" else None
    reports = []
    for r in range(cfg.rounds):
        global_encoder, clients, report = run_round(clients, global_encoder, filters, cfg, r, mpaf_base)
        reports.append(report)
        if on_round is not None:
            on_round(report)

    ensembles = {}
    done: set[int] = set()
    for c in clients:
        if c.malicious:
            continue
        up, down = balance_finetune(
            c.model,
            global_encoder,
            c.dataset,
            cfg.train,
            c.stream("balance"),
            filter_no=cfg.filter_no,
            epochs=cfg.finetune_epochs,
            uniform_prior=cfg.generic_uniform_prior,
            client_id=c.id,
            done=done,
        )
        ensembles[c.id] = InferenceEnsemble(c.model, up, down)
    return TrainingResult(clients, global_encoder, reports, ensembles, holdout)


def evaluation_inputs(
    result: TrainingResult,
) -> tuple[list[int], list[InferenceEnsemble], list[LabeledDataset]]:
    """Honest clients that own a nonempty test split, in id order."""
    ids = [cid for cid in sorted(result.ensembles) if result.clients[cid].test is not None]
    return ids, [result.ensembles[i] for i in ids], [result.clients[i].test for i in ids]
