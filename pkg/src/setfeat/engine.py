"""Episodic few-shot machinery.

Covers the full lifecycle: N-way K-shot episode sampling, softmax inference
over negated set distances, batch pretraining with one linear head per
mapper, episodic meta-training, evaluation with 95% confidence intervals,
and the mapper-selection frequency ablation.

Evaluation may fan episodes out over a thread pool; every episode draws from
its own derived RNG stream (stream id = episode index), so serial and
parallel runs produce identical reports.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mappers import SetFeatExtractor
from .metrics import METRIC_KINDS, pairwise, set_distance_batch, set_distance_batch_t
from .nn import cross_entropy_logits, kaiming_uniform, linear
from .optim import SGD, Adam
from .rng import Rng
from .tensor import (
    Tensor,
    backward,
    concat_axis,
    mean_axis,
    no_grad,
    reshape,
    scale,
    slice_axis,
    zero_grads,
)


class CapacityError(ValueError):
    """A split cannot supply the classes or examples an episode needs."""


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task: global example ids plus the sampled class ids.

    Row r of `support` and `query` holds examples of episode-local class r;
    `classes[r]` is the corresponding global class id.
    """

    support: np.ndarray  # (N, K) example ids
    query: np.ndarray  # (N, Q) example ids
    classes: tuple[int, ...]

    def __post_init__(self):
        if self.support.ndim != 2 or self.query.ndim != 2:
            raise ValueError("episode index arrays must be 2-D")
        if not (self.support.shape[0] == self.query.shape[0] == len(self.classes)):
            raise ValueError("support, query, and classes disagree on way count")

    @property
    def way(self) -> int:
        return self.support.shape[0]

    @property
    def shot(self) -> int:
        return self.support.shape[1]

    @property
    def queries(self) -> int:
        return self.query.shape[1]

    def query_labels(self) -> np.ndarray:
        """Episode-local labels (0..N-1) for the flattened query block."""
        return np.repeat(np.arange(self.way), self.queries)


@dataclass
class EvalReport:
    """Per-episode accuracies (percent) with the 1.96-sigma/sqrt(E) interval."""

    accuracies: np.ndarray

    def __post_init__(self):
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)

    @property
    def episodes(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def ci95(self) -> float:
        if self.episodes < 2:
            return 0.0
        sigma = float(self.accuracies.std(ddof=1))
        return 1.96 * sigma / np.sqrt(self.episodes)

    def record(self) -> str:
        return f"mean={self.mean:.4f} ci95={self.ci95:.4f} episodes={self.episodes}"


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for either training stage; unused fields are ignored by the other."""

    stage: str  # "pretrain" | "meta"
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 5e-4
    batch_size: int = 64  # pretrain
    steps: int = 300  # pretrain
    episodes: int = 2000  # meta
    way: int = 5
    shot: int = 1
    queries: int = 15
    seed: int = 0
    metric: str = "sum-min"
    metric_m: int | None = None
    logit_scale: float = 1.0
    decay_every: int = 500  # meta: multiply lr by decay_factor this often
    decay_factor: float = 0.5
    mean_over_mappers: bool = False  # pretrain loss / M instead of the plain sum
    bn_mode: str = "train"  # batch-stat handling inside episodes

    def __post_init__(self):
        if self.stage not in ("pretrain", "meta"):
            raise ValueError(f"stage must be pretrain or meta, got {self.stage!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.metric not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.metric!r}")
        if self.bn_mode not in ("train", "eval"):
            raise ValueError(f"bn_mode must be train or eval, got {self.bn_mode!r}")
        for name in ("batch_size", "steps", "episodes", "way", "shot", "queries"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def make_optimizer(self, params: list[Tensor]):
        if self.optimizer == "adam":
            return Adam(params, lr=self.lr, weight_decay=self.weight_decay)
        return SGD(
            params,
            lr=self.lr,
            momentum=self.momentum,
            nesterov=self.nesterov,
            weight_decay=self.weight_decay,
        )


# ----------------------------------------------------------------- sampling


def sample_episode(
    split: dict[int, np.ndarray], n_way: int, k_shot: int, q_queries: int, rng: Rng
) -> Episode:
    """Uniformly sample N classes, then K+Q examples per class (first K = support)."""
    class_ids = sorted(split)
    if len(class_ids) < n_way:
        raise CapacityError(f"episode needs {n_way} classes, split has {len(class_ids)}")
    need = k_shot + q_queries
    chosen = [class_ids[i] for i in rng.choice(len(class_ids), n_way)]
    support = np.empty((n_way, k_shot), dtype=np.int64)
    query = np.empty((n_way, q_queries), dtype=np.int64)
    for row, cid in enumerate(chosen):
        pool = np.asarray(split[cid])
        if len(pool) < need:
            raise CapacityError(
                f"class {cid} has {len(pool)} examples, episode needs {need}"
            )
        picks = pool[rng.choice(len(pool), need)]
        support[row] = picks[:k_shot]
        query[row] = picks[k_shot:]
    return Episode(support=support, query=query, classes=tuple(chosen))


# ---------------------------------------------------------------- inference


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def infer_batch(
    query_sets: np.ndarray,
    centroids: np.ndarray,
    kind: str,
    m: int | None = None,
    logit_scale: float = 1.0,
) -> np.ndarray:
    """(B, M, D) query sets + (N, M, D) centroids -> (B, N) class probabilities."""
    query_sets = np.asarray(query_sets, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    dists = np.stack(
        [set_distance_batch(kind, query_sets, centroids[n], m) for n in range(len(centroids))],
        axis=1,
    )
    return _softmax_np(-logit_scale * dists, axis=1)


def infer(
    query_set, centroids: np.ndarray, kind: str, m: int | None = None, logit_scale: float = 1.0
) -> np.ndarray:
    """Probability vector over the N classes for a single query feature set."""
    vectors = getattr(query_set, "vectors", query_set)
    return infer_batch(np.asarray(vectors)[None], centroids, kind, m, logit_scale)[0]


# --------------------------------------------------------------- pretraining


class PretrainHeads:
    """One linear classification head per mapper; discarded after stage one."""

    def __init__(self, n_mappers: int, feat_dim: int, n_classes: int, seed: int = 0):
        if n_mappers < 1 or feat_dim < 1 or n_classes < 2:
            raise ValueError("heads need >=1 mapper, >=1 feature dim, >=2 classes")
        self.n_mappers = n_mappers
        self.n_classes = n_classes
        rng = Rng(seed)
        self.params: dict[str, Tensor] = {}
        for mi in range(1, n_mappers + 1):
            w = kaiming_uniform(rng, (n_classes, feat_dim), fan_in=feat_dim)
            self.params[f"head{mi}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"head{mi}.bias"] = Tensor(
                np.zeros(n_classes), requires_grad=True
            )

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def logits(self, feature_sets: Tensor) -> list[Tensor]:
        """Per-mapper (B, C) logits from a (B, M, D) feature-set batch."""
        out = []
        for mi in range(1, self.n_mappers + 1):
            feats = reshape(
                slice_axis(feature_sets, 1, mi - 1, mi),
                (feature_sets.shape[0], feature_sets.shape[2]),
            )
            out.append(
                linear(feats, self.params[f"head{mi}.weight"], self.params[f"head{mi}.bias"])
            )
        return out


def pretrain_loss(
    extractor: SetFeatExtractor,
    heads: PretrainHeads,
    x: np.ndarray,
    labels: np.ndarray,
    mean_over_mappers: bool = False,
) -> Tensor:
    """Sum over mappers of each head's cross-entropy (optionally averaged)."""
    feats = extractor.extract_set(Tensor(x), mode="train")
    total = None
    for lg in heads.logits(feats):
        ce = cross_entropy_logits(lg, labels)
        total = ce if total is None else total + ce
    if mean_over_mappers:
        total = scale(total, 1.0 / heads.n_mappers)
    return total


def pretrain_step(
    extractor: SetFeatExtractor,
    heads: PretrainHeads,
    x: np.ndarray,
    labels: np.ndarray,
    opt,
    mean_over_mappers: bool = False,
) -> float:
    loss = pretrain_loss(extractor, heads, x, labels, mean_over_mappers)
    zero_grads(extractor.trainable() + heads.trainable())
    backward(loss)
    opt.step()
    return loss.item()


def pretrain(
    extractor: SetFeatExtractor,
    split: dict[int, np.ndarray],
    images: np.ndarray,
    cfg: TrainConfig,
) -> tuple[PretrainHeads, list[float]]:
    """Stage one: plain batch classification over the base classes."""
    class_ids = sorted(split)
    example_ids = np.concatenate([np.asarray(split[c]) for c in class_ids])
    labels_all = np.concatenate(
        [np.full(len(split[c]), i, dtype=np.int64) for i, c in enumerate(class_ids)]
    )
    heads = PretrainHeads(
        extractor.n_mappers, extractor.out_dim, len(class_ids), seed=cfg.seed + 1
    )
    opt = cfg.make_optimizer(extractor.trainable() + heads.trainable())
    rng = Rng(cfg.seed)
    losses = []
    take = min(cfg.batch_size, len(example_ids))
    for _ in range(cfg.steps):
        picks = rng.choice(len(example_ids), take)
        x = images[example_ids[picks]]
        losses.append(
            pretrain_step(extractor, heads, x, labels_all[picks], opt, cfg.mean_over_mappers)
        )
    return heads, losses


# -------------------------------------------------------------- meta-training


def episode_forward(
    extractor: SetFeatExtractor,
    x_support: np.ndarray,
    x_query: np.ndarray,
    way: int,
    kind: str,
    m: int | None = None,
    logit_scale: float = 1.0,
    mode: str = "train",
) -> tuple[Tensor, float]:
    """Differentiable episode loss (mean CE over the N*Q queries) and accuracy.

    Support and query go through the extractor as one batch so batch-norm
    statistics are shared across the episode.
    """
    n_support = x_support.shape[0]
    x_all = np.concatenate([x_support, x_query], axis=0)
    feats = extractor.extract_set(Tensor(x_all), mode=mode)
    sup = slice_axis(feats, 0, 0, n_support)
    qry = slice_axis(feats, 0, n_support, feats.shape[0])
    shot = n_support // way
    centroids = mean_axis(
        reshape(sup, (way, shot, extractor.n_mappers, extractor.out_dim)), 1
    )
    logits_cols = []
    for n in range(way):
        cent = reshape(
            slice_axis(centroids, 0, n, n + 1), (extractor.n_mappers, extractor.out_dim)
        )
        d = set_distance_batch_t(kind, qry, cent, m)
        logits_cols.append(reshape(d, (x_query.shape[0], 1)))
    logits = scale(concat_axis(logits_cols, axis=1), -logit_scale)
    labels = np.repeat(np.arange(way), x_query.shape[0] // way)
    loss = cross_entropy_logits(logits, labels)
    accuracy = float((logits.data.argmax(axis=1) == labels).mean())
    return loss, accuracy


def decayed_lr(cfg: TrainConfig, episode: int) -> float:
    """Step-decay schedule: lr shrinks by decay_factor every decay_every episodes."""
    return cfg.lr * cfg.decay_factor ** ((episode - 1) // cfg.decay_every)


def meta_train(
    extractor: SetFeatExtractor,
    split: dict[int, np.ndarray],
    images: np.ndarray,
    cfg: TrainConfig,
    log_path: str | None = None,
) -> list[tuple[int, float, float]]:
    """Algorithm: sample episode, episode loss, one optimizer step; CSV log."""
    _check_capacity(split, cfg.way, cfg.shot, cfg.queries)
    opt = cfg.make_optimizer(extractor.trainable())
    root = Rng(cfg.seed)
    rows: list[tuple[int, float, float]] = []
    for ep in range(1, cfg.episodes + 1):
        opt.lr = decayed_lr(cfg, ep)
        episode = sample_episode(split, cfg.way, cfg.shot, cfg.queries, root.split(ep))
        loss, acc = episode_forward(
            extractor,
            images[episode.support.reshape(-1)],
            images[episode.query.reshape(-1)],
            cfg.way,
            cfg.metric,
            cfg.metric_m,
            cfg.logit_scale,
            mode=cfg.bn_mode,
        )
        zero_grads(extractor.trainable())
        backward(loss)
        opt.step()
        rows.append((ep, loss.item(), acc))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "loss", "accuracy"])
            for ep, loss_v, acc in rows:
                w.writerow([ep, f"{loss_v:.6f}", f"{acc:.6f}"])
    return rows


def _check_capacity(split: dict[int, np.ndarray], way: int, shot: int, queries: int):
    if len(split) < way:
        raise CapacityError(f"episode needs {way} classes, split has {len(split)}")
    smallest = min(len(v) for v in split.values())
    if shot + queries > smallest:
        raise CapacityError(
            f"smallest class has {smallest} examples, episode needs {shot + queries}"
        )


# ---------------------------------------------------------------- evaluation


def _eval_episode(
    extractor: SetFeatExtractor,
    split: dict[int, np.ndarray],
    images: np.ndarray,
    kind: str,
    way: int,
    shot: int,
    queries: int,
    rng: Rng,
    m: int | None,
    logit_scale: float,
) -> float:
    episode = sample_episode(split, way, shot, queries, rng)
    with no_grad():
        sup = extractor.extract_set(
            Tensor(images[episode.support.reshape(-1)]), mode="eval"
        ).data
        qry = extractor.extract_set(
            Tensor(images[episode.query.reshape(-1)]), mode="eval"
        ).data
    centroids = sup.reshape(way, shot, *sup.shape[1:]).mean(axis=1)
    probs = infer_batch(qry, centroids, kind, m, logit_scale)
    return float((probs.argmax(axis=1) == episode.query_labels()).mean()) * 100.0


def evaluate(
    extractor: SetFeatExtractor,
    split: dict[int, np.ndarray],
    images: np.ndarray,
    kind: str = "sum-min",
    episodes: int = 600,
    way: int = 5,
    shot: int = 1,
    queries: int = 15,
    seed: int = 0,
    m: int | None = None,
    logit_scale: float = 1.0,
    threads: int = 1,
) -> EvalReport:
    """E independently seeded eval episodes; identical serial or threaded."""
    _check_capacity(split, way, shot, queries)
    root = Rng(seed)
    streams = [root.split(i) for i in range(episodes)]

    def run(i: int) -> float:
        return _eval_episode(
            extractor, split, images, kind, way, shot, queries, streams[i], m, logit_scale
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            acc = list(pool.map(run, range(episodes)))
    else:
        acc = [run(i) for i in range(episodes)]
    return EvalReport(np.asarray(acc))


# ------------------------------------------------------- mapper activations


def activation_counts(query_sets: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """How often each centroid row is the row-min match, over all query rows.

    Mirrors the sum-min selection rule: for every row of every query set the
    nearest centroid row (negative cosine) is counted as "selected".
    """
    counts = np.zeros(centroid.shape[0], dtype=np.int64)
    for q in np.asarray(query_sets, dtype=np.float64):
        for j in pairwise(q, centroid).argmin(axis=1):
            counts[j] += 1
    return counts


def mapper_activation_stats(
    extractor: SetFeatExtractor,
    split: dict[int, np.ndarray],
    images: np.ndarray,
    episodes: int = 100,
    way: int = 5,
    shot: int = 1,
    queries: int = 15,
    seed: int = 0,
) -> tuple[np.ndarray, list[int]]:
    """(M, n_classes) percentage matrix of per-mapper selection frequency.

    Each column aggregates queries whose true class is that column's class;
    columns sum to 100.
    """
    _check_capacity(split, way, shot, queries)
    class_ids = sorted(split)
    col = {cid: j for j, cid in enumerate(class_ids)}
    counts = np.zeros((extractor.n_mappers, len(class_ids)), dtype=np.int64)
    root = Rng(seed)
    for i in range(episodes):
        episode = sample_episode(split, way, shot, queries, root.split(i))
        with no_grad():
            sup = extractor.extract_set(
                Tensor(images[episode.support.reshape(-1)]), mode="eval"
            ).data
            qry = extractor.extract_set(
                Tensor(images[episode.query.reshape(-1)]), mode="eval"
            ).data
        centroids = sup.reshape(way, shot, *sup.shape[1:]).mean(axis=1)
        qry = qry.reshape(way, queries, *qry.shape[1:])
        for n, cid in enumerate(episode.classes):
            counts[:, col[cid]] += activation_counts(qry[n], centroids[n])
    totals = counts.sum(axis=0, keepdims=True)
    with np.errstate(invalid="ignore"):
        pct = np.where(totals > 0, 100.0 * counts / totals, 0.0)
    return pct, class_ids
