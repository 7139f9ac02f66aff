"""Triplet training for the projection head.

Covers the hinge triplet loss and its Matryoshka variant (the loss summed
over re-normalized nested prefixes), online random and semi-hard mining on
current head outputs, bias-corrected Adam, and a linear-warmup +
cosine-annealing schedule. Loss reduction is the mean over mined triplets
so the learning rate is decoupled from the mined count.

Every random draw comes from one PCG64 generator consumed in a fixed
order, so training histories are bitwise reproducible per seed.
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .head import (
    NORM_EPS,
    ForwardTrace,
    HeadConfig,
    HeadGrads,
    HeadParams,
    backward_batch,
    forward_batch,
    init_params,
    make_dropout_mask,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    batch_size: int = 200
    epochs: int = 100
    learning_rate: float = 5e-4
    warmup_epochs: int = 10
    mining: str = "semi_hard"  # random | semi_hard
    loss: str = "triplet"  # triplet | matryoshka
    matryoshka_dims: tuple[int, ...] | None = None  # ascending, last == output_dim
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sampler: str = "balanced"  # balanced | shuffle
    images_per_individual: int = 4  # Q for the balanced P x Q sampler
    max_random_triplets: int | None = None  # default: batch_size
    val_triplets: int = 1000
    seed: int = 0

    def validate(self, output_dim: int) -> None:
        if self.margin <= 0:
            raise ValidationError(f"margin must be > 0, got {self.margin}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError(
                f"warmup_epochs={self.warmup_epochs} must be < epochs={self.epochs}"
            )
        if self.mining not in ("random", "semi_hard"):
            raise ValidationError(f"unknown mining {self.mining!r}")
        if self.loss not in ("triplet", "matryoshka"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.sampler not in ("balanced", "shuffle"):
            raise ValidationError(f"unknown sampler {self.sampler!r}")
        if self.loss == "matryoshka":
            dims = self.resolved_dims(output_dim)
            if list(dims) != sorted(set(dims)) or dims[-1] != output_dim or dims[0] < 1:
                raise ValidationError(
                    f"matryoshka_dims {dims} must be ascending and end at {output_dim}"
                )

    def resolved_dims(self, output_dim: int) -> tuple[int, ...]:
        if self.matryoshka_dims is not None:
            return tuple(self.matryoshka_dims)
        dims = []
        m = output_dim
        while m >= 8:
            dims.append(m)
            m //= 2
        if not dims:
            dims = [output_dim]
        return tuple(sorted(dims))


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    mined_triplets: int
    learning_rate: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "mined_triplets", "learning_rate"])
            for rec in self.records:
                writer.writerow(
                    [
                        rec.epoch,
                        repr(rec.train_loss),
                        repr(rec.val_loss),
                        rec.mined_triplets,
                        repr(rec.learning_rate),
                    ]
                )


# ---------------------------------------------------------------------------
# losses


def triplet_loss(e_a, e_p, e_n, alpha: float) -> float:
    """Hinge loss max(d(a,p) - d(a,n) + alpha, 0) with L2 distances."""
    e_a, e_p, e_n = (np.asarray(v, dtype=np.float64) for v in (e_a, e_p, e_n))
    d_ap = float(np.linalg.norm(e_a - e_p))
    d_an = float(np.linalg.norm(e_a - e_n))
    return max(d_ap - d_an + alpha, 0.0)


def _triplet_grads(e_a, e_p, e_n, alpha: float):
    """Loss and its gradients w.r.t. the three output vectors."""
    diff_ap = e_a - e_p
    diff_an = e_a - e_n
    d_ap = float(np.linalg.norm(diff_ap))
    d_an = float(np.linalg.norm(diff_an))
    loss = d_ap - d_an + alpha
    if loss <= 0.0:
        zero = np.zeros_like(e_a)
        return 0.0, zero, zero.copy(), zero.copy()
    u_ap = diff_ap / d_ap if d_ap > NORM_EPS else np.zeros_like(diff_ap)
    u_an = diff_an / d_an if d_an > NORM_EPS else np.zeros_like(diff_an)
    return loss, u_ap - u_an, -u_ap, u_an


def matryoshka_triplet_loss(e_a, e_p, e_n, alpha: float, dims) -> float:
    """Sum of triplet losses over re-L2-normalized prefixes of the outputs."""
    e_a, e_p, e_n = (np.asarray(v, dtype=np.float64) for v in (e_a, e_p, e_n))
    total = 0.0
    for m in dims:
        wa, wp, wn = (_renorm_prefix(v, m)[0] for v in (e_a, e_p, e_n))
        total += triplet_loss(wa, wp, wn, alpha)
    return total


def _renorm_prefix(v: np.ndarray, m: int):
    prefix = v[:m]
    norm = float(np.linalg.norm(prefix))
    denom = norm if norm >= NORM_EPS else NORM_EPS
    return prefix / denom, norm, denom


def _matryoshka_grads(e_a, e_p, e_n, alpha: float, dims):
    """Loss and full-width output gradients for the nested-prefix loss."""
    vecs = (e_a, e_p, e_n)
    grads = [np.zeros_like(v) for v in vecs]
    total = 0.0
    for m in dims:
        normed = [_renorm_prefix(v, m) for v in vecs]
        loss, *prefix_grads = _triplet_grads(normed[0][0], normed[1][0], normed[2][0], alpha)
        total += loss
        if loss <= 0.0:
            continue
        for (w, norm, denom), g_w, g_full in zip(normed, prefix_grads, grads):
            if norm >= NORM_EPS:
                g_v = (g_w - w * float(w @ g_w)) / denom
            else:
                g_v = g_w / denom
            g_full[:m] += g_v
    return total, grads[0], grads[1], grads[2]


def batch_loss_and_output_grads(
    outputs: np.ndarray, triplets: list[Triplet], config: TrainConfig
) -> tuple[float, np.ndarray]:
    """Mean loss over mined triplets plus dLoss/dOutput per batch row."""
    if not triplets:
        return 0.0, np.zeros_like(outputs)
    dims = config.resolved_dims(outputs.shape[1]) if config.loss == "matryoshka" else None
    grad_y = np.zeros_like(outputs)
    total = 0.0
    for t in triplets:
        e_a, e_p, e_n = outputs[t.anchor], outputs[t.positive], outputs[t.negative]
        if dims is None:
            loss, g_a, g_p, g_n = _triplet_grads(e_a, e_p, e_n, config.margin)
        else:
            loss, g_a, g_p, g_n = _matryoshka_grads(e_a, e_p, e_n, config.margin, dims)
        total += loss
        grad_y[t.anchor] += g_a
        grad_y[t.positive] += g_p
        grad_y[t.negative] += g_n
    n = len(triplets)
    return total / n, grad_y / n


# ---------------------------------------------------------------------------
# mining


def mine_random(
    batch_embeddings: np.ndarray,
    labels,
    rng: np.random.Generator,
    max_triplets: int,
) -> list[Triplet]:
    """Uniform draws from the set of valid (anchor, positive, negative) triples.

    Anchor-positive ordered pairs are weighted by their negative count so
    every valid triplet is equally likely.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    pairs: list[tuple[int, int]] = []
    weights: list[int] = []
    neg_count = {lab: int((labels != lab).sum()) for lab in set(labels.tolist())}
    for a in range(n):
        for p in range(n):
            if a != p and labels[a] == labels[p] and neg_count[labels[a]] > 0:
                pairs.append((a, p))
                weights.append(neg_count[labels[a]])
    if not pairs:
        return []
    w = np.asarray(weights, dtype=np.float64)
    total_valid = int(w.sum())
    draws = min(max_triplets, total_valid)
    pair_idx = rng.choice(len(pairs), size=draws, p=w / w.sum())
    out = []
    for i in pair_idx:
        a, p = pairs[int(i)]
        negatives = np.flatnonzero(labels != labels[a])
        nidx = int(negatives[rng.integers(len(negatives))])
        out.append(Triplet(anchor=a, positive=p, negative=nidx))
    return out


def mine_semi_hard(batch_embeddings: np.ndarray, labels, alpha: float) -> list[Triplet]:
    """All triplets with d(a,p) < d(a,n) < d(a,p) + alpha on current outputs."""
    X = np.asarray(batch_embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = X.shape[0]
    sq = (X * X).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
    dist = np.sqrt(d2)
    out: list[Triplet] = []
    for a in range(n):
        same = labels == labels[a]
        diff = ~same
        for p in np.flatnonzero(same):
            if p == a:
                continue
            d_ap = dist[a, p]
            mask = diff & (dist[a] > d_ap) & (dist[a] < d_ap + alpha)
            for nidx in np.flatnonzero(mask):
                out.append(Triplet(anchor=a, positive=int(p), negative=int(nidx)))
    return out


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: HeadParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in params.arrays()],
            v=[np.zeros_like(a) for a in params.arrays()],
        )


def adam_step(
    params: HeadParams,
    grads: HeadGrads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for arr, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if not np.isfinite(g).all():
            raise ValidationError(f"non-finite gradient at Adam step {t}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        arr -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear warmup from peak/warmup to peak, then cosine annealing to ~0."""
    if not 0 <= epoch < config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs})")
    peak = config.learning_rate
    w = config.warmup_epochs
    if epoch < w:
        start = peak / w
        return start + (peak - start) * (epoch / w)
    span = config.epochs - w
    return peak * 0.5 * (1.0 + np.cos(np.pi * (epoch - w) / span))


# ---------------------------------------------------------------------------
# batch sampling and the epoch loop


def _group_by_label(labels) -> "OrderedDict[str, list[int]]":
    groups: OrderedDict[str, list[int]] = OrderedDict()
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return groups


def _balanced_batches(
    groups: "OrderedDict[str, list[int]]", config: TrainConfig, rng: np.random.Generator
) -> list[list[int]]:
    """Class-balanced P x Q batches: P individuals, Q images each."""
    q = config.images_per_individual
    p = max(2, config.batch_size // q)
    names = list(groups)
    order = [names[i] for i in rng.permutation(len(names))]
    batches = []
    for start in range(0, len(order), p):
        chunk = order[start : start + p]
        if len(chunk) < 2:
            continue  # a single individual cannot yield a triplet
        batch: list[int] = []
        for name in chunk:
            rows = groups[name]
            if len(rows) >= q:
                picks = rng.choice(len(rows), size=q, replace=False)
            else:
                picks = rng.integers(len(rows), size=q)
            batch.extend(rows[int(j)] for j in picks)
        batches.append(batch)
    return batches


def _shuffle_batches(n: int, config: TrainConfig, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(n)
    return [
        order[start : start + config.batch_size].tolist()
        for start in range(0, n, config.batch_size)
    ]


def _make_val_triplets(labels, config: TrainConfig, seed: int) -> list[Triplet]:
    rng = np.random.Generator(np.random.PCG64(seed))
    return mine_random(None, labels, rng, config.val_triplets)


def _val_loss(
    params: HeadParams,
    head_config: HeadConfig,
    val_x: np.ndarray,
    triplets: list[Triplet],
    config: TrainConfig,
) -> float:
    if not triplets:
        return 0.0
    outputs, _ = forward_batch(params, head_config, val_x, train_mode=False)
    dims = config.resolved_dims(outputs.shape[1]) if config.loss == "matryoshka" else None
    total = 0.0
    for t in triplets:
        e_a, e_p, e_n = outputs[t.anchor], outputs[t.positive], outputs[t.negative]
        if dims is None:
            total += triplet_loss(e_a, e_p, e_n, config.margin)
        else:
            total += matryoshka_triplet_loss(e_a, e_p, e_n, config.margin, dims)
    return total / len(triplets)


def train(
    train_x: np.ndarray,
    train_labels,
    val_x: np.ndarray,
    val_labels,
    head_config: HeadConfig,
    config: TrainConfig,
    on_epoch=None,
) -> tuple[HeadParams, TrainingHistory]:
    """Run the epoch loop; return the minimum-val-loss parameters and history.

    `on_epoch(epoch, params)`, when given, is invoked after every completed
    epoch (used for periodic checkpointing).
    """
    config.validate(head_config.output_dim)
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_labels = list(train_labels)
    val_labels = list(val_labels)
    overlap = set(train_labels) & set(val_labels)
    if overlap:
        raise ValidationError(
            f"train and val individual sets must be disjoint; shared: {sorted(overlap)[:5]}"
        )

    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = init_params(head_config, config.seed)
    state = AdamState.for_params(params)
    groups = _group_by_label(train_labels)
    val_triplets = _make_val_triplets(val_labels, config, seed=config.seed + 1)
    if not val_triplets:
        warnings.warn("no valid validation triplets; val_loss will be 0", stacklevel=2)

    history = TrainingHistory()
    best_params = params.copy()
    best_val = np.inf
    max_random = config.max_random_triplets or config.batch_size

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        if config.sampler == "balanced":
            batches = _balanced_batches(groups, config, rng)
        else:
            batches = _shuffle_batches(train_x.shape[0], config, rng)

        batch_losses = []
        mined_total = 0
        for batch in batches:
            x_batch = train_x[batch]
            labels_batch = [train_labels[i] for i in batch]
            mask = make_dropout_mask(head_config, len(batch), rng)
            outputs, trace = forward_batch(
                params, head_config, x_batch, train_mode=True, dropout_mask=mask
            )
            if config.mining == "random":
                triplets = mine_random(outputs, labels_batch, rng, max_random)
            else:
                triplets = mine_semi_hard(outputs, labels_batch, config.margin)
            mined_total += len(triplets)
            if not triplets:
                continue
            loss, grad_y = batch_loss_and_output_grads(outputs, triplets, config)
            grads = backward_batch(trace, params, head_config, grad_y)
            adam_step(
                params, grads, state, lr,
                beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
            )
            batch_losses.append(loss)

        if batch_losses:
            train_loss = float(np.mean(batch_losses))
        else:
            train_loss = 0.0
            logger.warning("epoch %d mined zero triplets; parameters unchanged", epoch)

        val_loss = _val_loss(params, head_config, val_x, val_triplets, config)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                mined_triplets=mined_total,
                learning_rate=float(lr),
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
        if on_epoch is not None:
            on_epoch(epoch, params)

    return best_params, history
