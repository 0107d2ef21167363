"""Cross-entropy + contrastive training with Adam."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingDiverged
from .gabor import softplus
from .network import NetConfig, init_network, net_forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 50
    contrastive_margin: float = 0.5
    loss_weights: tuple = (1.0, 1.0)
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for pairwise losses, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        w_ce, w_con = self.loss_weights
        if w_ce < 0 or w_con < 0 or (w_ce == 0 and w_con == 0):
            raise ConfigError(f"loss weights must be >= 0 and not both zero, got {self.loss_weights}")
        if self.contrastive_margin < 0:
            raise ConfigError(f"contrastive_margin must be >= 0, got {self.contrastive_margin}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy needs a non-empty batch")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {n} integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean())
    probs = np.exp(z - lse[:, None])

    def _bw(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return T._result(loss.astype(logits.dtype), (logits,), _bw, "cross_entropy")


def contrastive_loss(embeddings, labels, margin):
    """Mean over pairs i < j of d^2 (same label) or max(0, margin - d)^2."""
    emb = T.as_tensor(embeddings)
    labels = np.asarray(labels)
    n = emb.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least two embeddings")
    diff = emb.data[:, None, :] - emb.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    hinge = np.maximum(0.0, margin - dist)
    terms = np.where(same, dist ** 2, hinge ** 2)
    pairs = n * (n - 1) / 2
    loss = np.asarray(terms[upper].sum() / pairs)

    def _bw(g):
        # d(term_ij)/d(e_i) as a coefficient on (e_i - e_j)
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(same, 2.0, np.where(dist > 0, -2.0 * hinge / safe, 0.0))
        coef = np.where(upper, coef, 0.0)
        coef = coef + coef.T
        grad = (coef[:, :, None] * diff).sum(axis=1)
        return (grad * (g / pairs),)

    return T._result(loss.astype(emb.dtype), (emb,), _bw, "contrastive")


def total_loss(logits, embeddings, labels, cfg: TrainConfig):
    """Weighted sum of the two losses; returns (total, ce, con) tensors."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    w_ce, w_con = cfg.loss_weights
    ce = cross_entropy(logits, labels)
    con = contrastive_loss(embeddings, labels, cfg.contrastive_margin)
    return T.add(T.scale(ce, w_ce), T.scale(con, w_con)), ce, con


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    first_moment: dict
    second_moment: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()})


def adam_step(params, grads, opt_state: OptimizerState, cfg: TrainConfig):
    """In-place Adam update of every tensor in ``params``.

    All gradients are checked before anything is touched, so a rejected step
    leaves parameters and moments as they were.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise TrainingDiverged(f"parameter {name!r} received no gradient")
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter is {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
    b1, b2 = cfg.betas
    lr, eps = cfg.learning_rate, cfg.epsilon
    opt_state.step += 1
    t = opt_state.step
    for name, p in params.items():
        g = grads[name]
        m = opt_state.first_moment[name] = b1 * opt_state.first_moment[name] + (1 - b1) * g
        v = opt_state.second_moment[name] = b2 * opt_state.second_moment[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return params


def check_gabor_positive(params):
    for name, p in params.items():
        if name.endswith("_raw") and not np.all(softplus(p.data) > 0):
            raise TrainingDiverged(f"Gabor parameter {name!r} lost positivity")


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    ce_loss: float
    con_loss: float
    train_acc: float
    wall_seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainResult:
    state: object
    metrics: list
    opt_state: OptimizerState


def make_batches(order, batch_size):
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train(images, labels, net_cfg: NetConfig, train_cfg: TrainConfig, on_epoch=None):
    """Train from scratch on ``images`` (N, 1, H, W) with integer ``labels``."""
    train_cfg.validate()
    net_cfg.validate()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ConfigError("training needs at least two classes")
    if labels.max() >= net_cfg.num_classes:
        raise ConfigError(f"label {labels.max()} out of range for {net_cfg.num_classes} classes")

    rng = np.random.default_rng(train_cfg.seed)
    state = init_network(net_cfg, train_cfg.seed)
    params = state.parameters()
    opt = OptimizerState.zeros(params)
    metrics = []
    for epoch in range(1, train_cfg.epochs + 1):
        start = time.perf_counter()
        sums = np.zeros(3)
        correct = 0
        for idx in make_batches(rng.permutation(len(labels)), train_cfg.batch_size):
            y = labels[idx]
            state.zero_grad()
            emb, logits = net_forward(images[idx], net_cfg, state)
            loss, ce, con = total_loss(logits, emb, y, train_cfg)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", state.copy())
            T.backward(loss)
            try:
                adam_step(params, {n: p.grad for n, p in params.items()}, opt, train_cfg)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", state.copy()) from exc
            check_gabor_positive(params)
            sums += len(idx) * np.array([loss.item(), ce.item(), con.item()])
            correct += int((logits.data.argmax(axis=1) == y).sum())
        n = len(labels)
        m = EpochMetrics(epoch, sums[0] / n, sums[1] / n, sums[2] / n, correct / n,
                         time.perf_counter() - start)
        metrics.append(m)
        log.info("epoch %d loss %.4f ce %.4f con %.4f acc %.3f (%.1fs)", m.epoch, m.mean_loss,
                 m.ce_loss, m.con_loss, m.train_acc, m.wall_seconds)
        if on_epoch is not None:
            on_epoch(m, state)
    return TrainResult(state, metrics, opt)


METRIC_COLUMNS = ("epoch", "mean_loss", "ce_loss", "con_loss", "train_acc", "wall_seconds")


def write_metrics_csv(metrics, path, include_timing=False):
    """Write the per-epoch log; timing is opt-in so reruns give identical bytes."""
    columns = METRIC_COLUMNS if include_timing else METRIC_COLUMNS[:-1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for m in metrics:
            row = [m.epoch] + [f"{getattr(m, c):.10g}" for c in columns[1:]]
            writer.writerow(row)
