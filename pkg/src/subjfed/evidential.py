"""Evidential MLP classifiers with a trainable class prior.

The network maps features to raw scores ``z``; evidence is ``exp(z)``
with ``z`` clipped to ``[-score_clamp, score_clamp]`` so it stays finite
and strictly positive.  Dirichlet parameters are ``alpha = e + W * prior``.

Training minimises, per sample and averaged over the mini-batch,

    ce + cor + lambda1 * inc + lambda2 * evi        (+ lambda3 * neg once per step)

with hand-derived gradients.  The prior receives gradients from every
term except ``inc``; after each step it is clipped at zero and renormalised.
In ``cor`` the uncertainty u is a per-sample weight without gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .opinion import DirichletParams, Opinion, kl_dirichlet_batch, opinion_from_evidence
from .special import DomainError, RngStream, digamma, trigamma

__all__ = [
    "DEFAULT_SCORE_CLAMP",
    "Dense",
    "EvidentialModel",
    "TrainConfig",
    "LossBreakdown",
    "NonFiniteLossError",
    "ShapeMismatchError",
    "forward",
    "loss_ce",
    "loss_inc",
    "loss_cor",
    "loss_evi",
    "loss_neg",
    "loss_terms",
    "class_frequency_prior",
    "train_local",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_SCORE_CLAMP = math.log(1e12)
COR_FLOOR = 1e-8
PRIOR_FLOOR = 1e-6
TERMS = ("ce", "cor", "inc", "evi", "neg")
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "relu6")


class ShapeMismatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, breakdown: "LossBreakdown"):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {breakdown}")
        self.epoch = epoch
        self.batch = batch
        self.breakdown = breakdown


@dataclass
class Dense:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray

    def copy(self) -> "Dense":
        return Dense(self.weight.copy(), self.bias.copy())


@dataclass
class EvidentialModel:
    encoder: list[Dense]
    head: Dense
    prior: np.ndarray
    prior_weight: float
    score_clamp: float = DEFAULT_SCORE_CLAMP
    activation: str = "relu6"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        num_classes: int,
        rng: RngStream,
        prior=None,
        prior_weight: float | None = None,
        score_clamp: float = DEFAULT_SCORE_CLAMP,
        activation: str = "relu6",
    ) -> "EvidentialModel":
        """He-uniform initialisation; ``sizes`` lists input and encoder widths."""
        if len(sizes) < 2:
            raise ValueError("need an input width and at least one encoder layer")
        gen = rng.generator
        encoder = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / fan_in)
            encoder.append(Dense(gen.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)))
        bound = math.sqrt(3.0 / sizes[-1])
        head = Dense(gen.uniform(-bound, bound, (sizes[-1], num_classes)), np.zeros(num_classes))
        if prior is None:
            prior = np.full(num_classes, 1.0 / num_classes)
        return cls(
            encoder,
            head,
            np.array(prior, dtype=np.float64),
            float(num_classes if prior_weight is None else prior_weight),
            score_clamp,
            activation,
        )

    @property
    def num_classes(self) -> int:
        return self.head.bias.size

    @property
    def input_dim(self) -> int:
        return self.encoder[0].weight.shape[0]

    def copy(self) -> "EvidentialModel":
        return EvidentialModel(
            [layer.copy() for layer in self.encoder],
            self.head.copy(),
            self.prior.copy(),
            self.prior_weight,
            self.score_clamp,
            self.activation,
        )

    # flat views ---------------------------------------------------------

    def encoder_arrays(self) -> list[np.ndarray]:
        return [a for layer in self.encoder for a in (layer.weight, layer.bias)]

    def head_arrays(self) -> list[np.ndarray]:
        return [self.head.weight, self.head.bias]

    def encoder_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.encoder_arrays()])

    def head_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.head_arrays()])

    def parameter_vector(self) -> np.ndarray:
        """Encoder then head parameters, row-major (the prior is not included)."""
        return np.concatenate([self.encoder_vector(), self.head_vector()])

    def set_encoder_vector(self, vec: np.ndarray) -> None:
        _unflatten(self.encoder_arrays(), vec)

    def set_parameter_vector(self, vec: np.ndarray) -> None:
        _unflatten(self.encoder_arrays() + self.head_arrays(), vec)

    @property
    def encoder_size(self) -> int:
        return sum(a.size for a in self.encoder_arrays())

    # inference ----------------------------------------------------------

    def scores(self, x: np.ndarray) -> np.ndarray:
        h = x
        for layer in self.encoder:
            h = _activate(h @ layer.weight + layer.bias, self.activation)
        return h @ self.head.weight + self.head.bias

    def alpha(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x) + self.prior_weight * self.prior

    def opinion(self, x: np.ndarray) -> Opinion:
        return opinion_from_evidence(forward(self, x), self.prior, self.prior_weight)


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    # relu6 saturates, which keeps evidence bounded far from the data
    return np.clip(pre, 0.0, 6.0) if kind == "relu6" else np.maximum(pre, 0.0)


def _activation_grad(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu6":
        return (pre > 0.0) & (pre < 6.0)
    return pre > 0.0


def _unflatten(arrays: list[np.ndarray], vec: np.ndarray) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(a.size for a in arrays)
    if vec.shape != (total,):
        raise ShapeMismatchError(f"expected {total} parameters, got {vec.shape}")
    pos = 0
    for a in arrays:
        a[...] = vec[pos : pos + a.size].reshape(a.shape)
        pos += a.size


def forward(model: EvidentialModel, x) -> np.ndarray:
    """Evidence for one feature vector (k,) or a batch (n, k)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim or x.ndim not in (1, 2):
        raise ShapeMismatchError(f"input of shape {x.shape} for a {model.input_dim}-d model")
    c = model.score_clamp
    with np.errstate(over="ignore", invalid="ignore"):
        z = model.scores(x)
    return np.exp(np.clip(z, -c, c))


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 1.0
    epsilon: float = 1e4
    local_epochs: int = 5
    batch_size: int = 32
    score_clamp: float = DEFAULT_SCORE_CLAMP
    # Terms allowed to move the prior; "inc" is never honoured here.
    prior_terms: tuple[str, ...] = ("ce", "cor", "evi", "neg")
    train_prior: bool = True
    # Global L2 norm cap on each step's network gradient; None disables it.
    max_grad_norm: float | None = 10.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("local_epochs must be >= 0 and batch_size >= 1")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive or None")
        unknown = set(self.prior_terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown prior terms {sorted(unknown)}")
        self.prior_terms = tuple(self.prior_terms)


@dataclass
class LossBreakdown:
    total: float = 0.0
    ce: float = 0.0
    cor: float = 0.0
    inc: float = 0.0
    evi: float = 0.0
    neg: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# --- per-sample losses ------------------------------------------------------


def _onehot(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        out = np.zeros(k)
        out[int(y)] = 1.0
        return out
    return np.asarray(y, dtype=np.float64)


def _alpha_of(alpha) -> np.ndarray:
    return alpha.alpha if isinstance(alpha, DirichletParams) else np.asarray(alpha, dtype=np.float64)


def loss_ce(alpha, y) -> float:
    """Expected cross-entropy under the Dirichlet: sum_j y_j (psi(S) - psi(alpha_j))."""
    a = _alpha_of(alpha)
    yv = _onehot(y, a.size)
    return float(np.sum(yv * (digamma(a.sum()) - digamma(a))))


def loss_inc(alpha, y, prior, prior_weight: float) -> float:
    """KL from the label-trimmed Dirichlet to Dir(W * prior)."""
    a = _alpha_of(alpha)
    yv = _onehot(y, a.size)
    ref = np.maximum(prior_weight * np.asarray(prior, dtype=np.float64), PRIOR_FLOOR)
    trimmed = (1.0 - yv) * a + yv * ref
    return float(kl_dirichlet_batch(trimmed, ref))


def loss_cor(alpha, y, prior, u: float) -> float:
    """-u * ln(alpha_gt - a_gt), argument floored at 1e-8."""
    a = _alpha_of(alpha)
    yv = _onehot(y, a.size)
    gap = float(np.sum(yv * (a - np.asarray(prior, dtype=np.float64))))
    return float(-u * math.log(max(gap, COR_FLOOR)))


def loss_evi(evidence, epsilon: float) -> float:
    excess = np.maximum(np.asarray(evidence, dtype=np.float64) - epsilon, 0.0)
    return float(np.sum(excess * excess))


def loss_neg(prior_raw) -> float:
    return float(np.sum(np.maximum(-np.asarray(prior_raw, dtype=np.float64), 0.0)))


# --- batched values and gradients -------------------------------------------


def loss_terms(
    z: np.ndarray,
    labels: np.ndarray,
    prior: np.ndarray,
    prior_weight: float,
    epsilon: float,
    score_clamp: float = DEFAULT_SCORE_CLAMP,
) -> dict[str, tuple[float, np.ndarray, np.ndarray]]:
    """Batch-mean value of each term with its gradients w.r.t. ``z`` and the prior.

    Returns ``{term: (value, d_value/d_z, d_value/d_prior)}``.  The prior
    gradient of ``inc`` is the true derivative; callers decide whether to use it.
    """
    z = np.asarray(z, dtype=np.float64)
    B, k = z.shape
    W = float(prior_weight)
    prior = np.asarray(prior, dtype=np.float64)
    Y = np.zeros((B, k))
    Y[np.arange(B), labels] = 1.0

    active = (z > -score_clamp) & (z < score_clamp)
    e = np.exp(np.clip(z, -score_clamp, score_clamp))
    wa = W * prior
    alpha = e + wa
    S = alpha.sum(axis=1)
    E = e.sum(axis=1)

    # Shared special-function evaluations, batched into one call each.
    ref = np.maximum(wa, PRIOR_FLOOR)
    ref_live = wa > PRIOR_FLOOR
    trimmed = alpha * (1.0 - Y) + Y * ref
    S_t = trimmed.sum(axis=1)
    S_ref = ref.sum()
    stack = np.concatenate([S, alpha.ravel(), S_t, trimmed.ravel(), ref, [S_ref]])
    psi = digamma(stack)
    tri = trigamma(stack[: 2 * B + 2 * B * k])
    o = 0
    psi_S, tri_S = psi[o : o + B], tri[o : o + B]
    o += B
    psi_a, tri_a = psi[o : o + B * k].reshape(B, k), tri[o : o + B * k].reshape(B, k)
    o += B * k
    psi_St, tri_St = psi[o : o + B], tri[o : o + B]
    o += B
    psi_t, tri_t = psi[o : o + B * k].reshape(B, k), tri[o : o + B * k].reshape(B, k)
    o += B * k
    psi_ref, psi_Sref = psi[o : o + k], psi[o + k]

    out: dict[str, tuple[float, np.ndarray, np.ndarray]] = {}
    dz_scale = e * active / B

    # ce = psi(S) - psi(alpha_y)
    ce = psi_S - (psi_a * Y).sum(axis=1)
    g_alpha = tri_S[:, None] - Y * tri_a
    out["ce"] = (ce.mean(), g_alpha * dz_scale, W * g_alpha.mean(axis=0))

    # cor = -u ln(x), x = e_y + (W - 1) a_y; u = W / (W + E) acts as a
    # per-sample weight and is not differentiated
    u = W / (W + E)
    gap = (e * Y).sum(axis=1) + (W - 1.0) * (prior * Y).sum(axis=1)
    live = gap > COR_FLOOR
    x = np.where(live, gap, COR_FLOOR)
    logx = np.log(x)
    cor = -u * logx
    de = -Y * (live * u / x)[:, None]
    da = -(Y * (live * u * (W - 1.0) / x)[:, None]).mean(axis=0)
    out["cor"] = (cor.mean(), de * dz_scale, da)

    # inc = KL(Dir(trimmed) || Dir(ref))
    inc = kl_dirichlet_batch(trimmed, np.broadcast_to(ref, trimmed.shape))
    d_t = (trimmed - ref) * tri_t - (tri_St * (S_t - S_ref))[:, None]
    d_ref = -psi_Sref + psi_ref - (psi_t - psi_St[:, None])
    de = d_t * (1.0 - Y)
    da_rows = W * ((1.0 - Y) * d_t + (Y * d_t + d_ref) * ref_live)
    out["inc"] = (inc.mean(), de * dz_scale, da_rows.mean(axis=0))

    # evi = || max(0, e - eps) ||^2
    excess = np.maximum(e - epsilon, 0.0)
    out["evi"] = (
        (excess * excess).sum(axis=1).mean(),
        2.0 * excess * dz_scale,
        np.zeros(k),
    )

    # neg = || a - max(0, a) ||_1, on the raw prior (not per sample)
    out["neg"] = (
        float(np.maximum(-prior, 0.0).sum()),
        np.zeros_like(z),
        -(prior < 0.0).astype(np.float64),
    )
    return out


def class_frequency_prior(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Empirical class frequencies with one pseudo-count per class."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes) + 1.0
    return counts / counts.sum()


def _coefficients(cfg: TrainConfig) -> dict[str, float]:
    return {"ce": 1.0, "cor": 1.0, "inc": cfg.lambda1, "evi": cfg.lambda2, "neg": cfg.lambda3}


def _step(
    model: EvidentialModel,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    freeze_encoder: bool,
) -> tuple[LossBreakdown, list[np.ndarray], list[np.ndarray], np.ndarray]:
    """One forward/backward pass; returns breakdown, params, grads, prior grad."""
    acts = [x]
    pres = []
    h = x
    for layer in model.encoder:
        pre = h @ layer.weight + layer.bias
        h = _activate(pre, model.activation)
        pres.append(pre)
        acts.append(h)
    z = h @ model.head.weight + model.head.bias

    terms = loss_terms(z, labels, model.prior, model.prior_weight, cfg.epsilon, cfg.score_clamp)
    coef = _coefficients(cfg)
    values = {t: float(terms[t][0]) for t in TERMS}
    total = sum(coef[t] * values[t] for t in TERMS)
    breakdown = LossBreakdown(total=total, **values)

    dz = sum(coef[t] * terms[t][1] for t in TERMS)
    g_prior = np.zeros_like(model.prior)
    for t in cfg.prior_terms:
        if t != "inc":
            g_prior = g_prior + coef[t] * terms[t][2]

    params = [model.head.weight, model.head.bias]
    grads = [acts[-1].T @ dz, dz.sum(axis=0)]
    if not freeze_encoder:
        dh = dz @ model.head.weight.T
        for i in range(len(model.encoder) - 1, -1, -1):
            layer = model.encoder[i]
            dpre = dh * _activation_grad(pres[i], model.activation)
            params += [layer.weight, layer.bias]
            grads += [acts[i].T @ dpre, dpre.sum(axis=0)]
            if i:
                dh = dpre @ layer.weight.T
    return breakdown, params, grads, g_prior


def _clip_scale(grads: list[np.ndarray], max_norm: float | None) -> float:
    if max_norm is None:
        return 1.0
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    return max_norm / norm if norm > max_norm else 1.0


def _project_simplex(prior: np.ndarray) -> np.ndarray:
    clipped = np.maximum(prior, 0.0)
    total = clipped.sum()
    if total <= 0.0:
        return np.full_like(prior, 1.0 / prior.size)
    return clipped / total


def train_local(
    model: EvidentialModel,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    rng: RngStream,
    freeze_encoder: bool = False,
) -> tuple[EvidentialModel, list[LossBreakdown]]:
    """Mini-batch SGD on a copy of ``model``; returns it with per-epoch mean losses.

    With ``freeze_encoder`` only the head (and prior) move.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("labels outside [0, k)")
    if features.shape != (n, model.input_dim):
        raise ShapeMismatchError(f"features {features.shape} for a {model.input_dim}-d model")

    model = model.copy()
    lr = cfg.learning_rate
    history = []
    for epoch in range(cfg.local_epochs):
        order = rng.generator.permutation(n)
        sums = dict.fromkeys(TERMS + ("total",), 0.0)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                try:
                    breakdown, params, grads, g_prior = _step(
                        model, features[idx], labels[idx], cfg, freeze_encoder
                    )
                except DomainError:  # NaN scores reach the special functions
                    raise NonFiniteLossError(epoch, b, LossBreakdown(total=math.nan)) from None
            if not math.isfinite(breakdown.total):
                raise NonFiniteLossError(epoch, b, breakdown)
            scale = _clip_scale(grads, cfg.max_grad_norm)
            for p, g in zip(params, grads):
                p -= (lr * scale) * g
            if cfg.train_prior:
                moved = model.prior - lr * g_prior
                if not np.array_equal(moved, model.prior):
                    model.prior = _project_simplex(moved)
            for key, val in breakdown.as_dict().items():
                sums[key] += val * idx.size
        history.append(LossBreakdown(**{key: val / n for key, val in sums.items()}))
    return model, history


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(model: EvidentialModel, path: str | Path) -> None:
    """Write a versioned ``.npz`` record; every array round-trips bit-exactly."""
    arrays = {
        "format_version": np.array([CHECKPOINT_VERSION]),
        "num_encoder_layers": np.array([len(model.encoder)]),
        "prior": model.prior,
        "scalars": np.array([model.prior_weight, model.score_clamp]),
        "activation": np.array([ACTIVATIONS.index(model.activation)]),
        "head_weight": model.head.weight,
        "head_bias": model.head.bias,
    }
    for i, layer in enumerate(model.encoder):
        arrays[f"enc{i}_weight"] = layer.weight
        arrays[f"enc{i}_bias"] = layer.bias
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> EvidentialModel:
    with np.load(path) as data:
        version = int(data["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        layers = int(data["num_encoder_layers"][0])
        encoder = [
            Dense(data[f"enc{i}_weight"].copy(), data[f"enc{i}_bias"].copy()) for i in range(layers)
        ]
        prior_weight, score_clamp = (float(v) for v in data["scalars"])
        return EvidentialModel(
            encoder,
            Dense(data["head_weight"].copy(), data["head_bias"].copy()),
            data["prior"].copy(),
            prior_weight,
            score_clamp,
            ACTIVATIONS[int(data["activation"][0])],
        )
