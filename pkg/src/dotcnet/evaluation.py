"""Verification metrics: pair scoring, EER, ROC, and ablation tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .dtcm import MECHANISMS
from .errors import ConfigError, ProtocolError, ShapeError
from .network import BRANCH_NAMES, embed
from .training import train


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()

    def validate(self):
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ValueError("EER needs at least one genuine and one impostor score")
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise ValueError("scores must be finite")
        return self


@dataclass
class RocPoint:
    threshold: float
    far: float
    frr: float

    @property
    def gar(self):
        return 1.0 - self.frr


def match_score(e1, e2):
    """Cosine similarity of two already-normalized embeddings."""
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ShapeError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    return float(np.dot(e1, e2))


@dataclass
class ScoredPairs:
    """Every unordered pair of a labelled set, with its score."""

    index_a: np.ndarray
    index_b: np.ndarray
    label_a: np.ndarray
    label_b: np.ndarray
    score: np.ndarray

    @property
    def is_genuine(self):
        return self.label_a == self.label_b

    def score_set(self):
        g = self.is_genuine
        return ScoreSet(self.score[g], self.score[~g])

    def write_csv(self, path, class_names=None):
        name = (lambda i: class_names[i]) if class_names is not None else (lambda i: i)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["label_a", "label_b", "score", "is_genuine"])
            for la, lb, s, g in zip(self.label_a, self.label_b, self.score, self.is_genuine):
                writer.writerow([name(la), name(lb), repr(float(s)), int(g)])


def build_scores(embeddings, labels) -> ScoredPairs:
    """Score all C(n, 2) unordered pairs of an embedding set."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ProtocolError("verification needs at least two classes in the test set")
    ia, ib = np.triu_indices(len(labels), k=1)
    sims = emb @ emb.T
    return ScoredPairs(ia, ib, labels[ia], labels[ib], sims[ia, ib])


def read_scores_csv(path) -> ScoreSet:
    gen, imp = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            (gen if row["is_genuine"] == "1" else imp).append(float(row["score"]))
    return ScoreSet(gen, imp)


def error_rates(s: ScoreSet, thresholds):
    """FAR(t) = P(impostor >= t), FRR(t) = P(genuine < t) for each threshold."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    imp = np.sort(s.impostor)
    gen = np.sort(s.genuine)
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    frr = np.searchsorted(gen, thresholds, side="left") / gen.size
    return far, frr


def compute_eer(s: ScoreSet):
    """Equal error rate and the threshold where it occurs.

    Every distinct score is a candidate threshold, plus one just above the
    maximum where everything is rejected. FAR - FRR falls monotonically
    along the sweep; at the first threshold where it reaches zero the common
    value is returned, otherwise both rates are interpolated linearly
    between the two thresholds that bracket the sign change.
    """
    s.validate()
    thresholds = np.unique(np.concatenate([s.genuine, s.impostor]))
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    far, frr = error_rates(s, thresholds)
    diff = far - frr
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return float(far[i]), float(thresholds[i])
    alpha = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + alpha * (far[i] - far[i - 1])
    threshold = thresholds[i - 1] + alpha * (thresholds[i] - thresholds[i - 1])
    return float(eer), float(threshold)


def roc_curve(s: ScoreSet, n_points=100):
    s.validate()
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    lo = min(s.genuine.min(), s.impostor.min())
    hi = max(s.genuine.max(), s.impostor.max())
    thresholds = np.linspace(lo, hi, n_points)
    far, frr = error_rates(s, thresholds)
    return [RocPoint(float(t), float(a), float(r)) for t, a, r in zip(thresholds, far, frr)]


def write_roc_csv(points, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "far", "frr", "gar"])
        for p in points:
            writer.writerow([repr(p.threshold), repr(p.far), repr(p.frr), repr(p.gar)])


def plot_roc(points, path, label="DOTCNet", log_far=False):
    """Render GAR against FAR as a vector image (SVG/PDF by suffix)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dotcnet"
    fig, ax = plt.subplots(figsize=(4.5, 4))
    far = np.array([p.far for p in points])
    gar = np.array([p.gar for p in points])
    order = np.argsort(far, kind="stable")
    ax.plot(far[order], gar[order], label=label)
    if log_far:
        ax.set_xscale("symlog", linthresh=1e-4)
    ax.set_xlabel("FAR")
    ax.set_ylabel("GAR")
    ax.set_ylim(0, 1.01)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


def classification_accuracy(logits, labels):
    return float((np.asarray(logits).argmax(axis=1) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationRow:
    """A labelled change to the base network configuration."""

    label: str
    enabled_branches: tuple | None = None
    first_order_mechanism: str | None = None
    second_order_mechanism: str | None = None
    second_order_enabled: bool | None = None

    def apply(self, base):
        if self.enabled_branches is not None:
            unknown = set(self.enabled_branches) - set(BRANCH_NAMES)
            if unknown or not self.enabled_branches:
                raise ConfigError(f"row {self.label!r}: invalid branch set {self.enabled_branches}")
        for mech in (self.first_order_mechanism, self.second_order_mechanism):
            if mech is not None and mech not in MECHANISMS:
                raise ConfigError(f"row {self.label!r}: unknown mechanism {mech!r}")
        branches = []
        for b in base.branches:
            changes = {}
            if self.first_order_mechanism is not None:
                changes["first_order_mechanism"] = self.first_order_mechanism
            if self.second_order_mechanism is not None:
                changes["second_order_mechanism"] = self.second_order_mechanism
            if self.second_order_enabled is not None:
                changes["second_order_enabled"] = self.second_order_enabled
            branches.append(replace(b, **changes))
        enabled = self.enabled_branches if self.enabled_branches is not None else base.enabled_branches
        return base.with_changes(branches=branches, enabled_branches=tuple(enabled)).validate()


# Branch subsets and per-order mechanism choices, one row per ablation setting.
BRANCH_ROWS = (
    AblationRow("large", enabled_branches=("large",)),
    AblationRow("medium", enabled_branches=("medium",)),
    AblationRow("tiny", enabled_branches=("tiny",)),
    AblationRow("large+medium", enabled_branches=("large", "medium")),
    AblationRow("medium+tiny", enabled_branches=("medium", "tiny")),
    AblationRow("large+medium+tiny", enabled_branches=("large", "medium", "tiny")),
)

MECHANISM_ROWS = (
    AblationRow("1st:TAM+CM 2nd:off", first_order_mechanism="tam+cm", second_order_enabled=False),
    AblationRow("1st:TAM+CM 2nd:TAM+CM", first_order_mechanism="tam+cm", second_order_mechanism="tam+cm",
                second_order_enabled=True),
    AblationRow("1st:TAM 2nd:TAM", first_order_mechanism="tam", second_order_mechanism="tam",
                second_order_enabled=True),
    AblationRow("1st:CM 2nd:CM", first_order_mechanism="cm", second_order_mechanism="cm",
                second_order_enabled=True),
    AblationRow("1st:CM 2nd:TAM", first_order_mechanism="cm", second_order_mechanism="tam",
                second_order_enabled=True),
    AblationRow("1st:TAM 2nd:CM", first_order_mechanism="tam", second_order_mechanism="cm",
                second_order_enabled=True),
)


@dataclass
class AblationResult:
    label: str
    acc_percent: float
    eer_percent: float


def evaluate_split(cfg, state, test_images, test_labels):
    """(classification accuracy, EER) on a held-out set."""
    emb, logits = embed(test_images, cfg, state)
    eer, _ = compute_eer(build_scores(emb, test_labels).score_set())
    return classification_accuracy(logits, test_labels), eer


def ablation_run(dataset, base_cfg, rows, train_cfg, on_row=None):
    """Train and evaluate one network per row with a shared seed and split.

    ``dataset`` must already be split. All row configs are resolved before
    any training starts, so a bad row fails fast.
    """
    resolved = [(row, row.apply(base_cfg)) for row in rows]
    xtr, ytr = dataset.subset("train")
    xte, yte = dataset.subset("test")
    results = []
    for row, cfg in resolved:
        state = train(xtr, ytr, cfg, train_cfg).state
        acc, eer = evaluate_split(cfg, state, xte, yte)
        res = AblationResult(row.label, 100.0 * acc, 100.0 * eer)
        results.append(res)
        if on_row is not None:
            on_row(res)
    return results


def write_ablation_csv(results, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "acc_percent", "eer_percent"])
        for r in results:
            writer.writerow([r.label, f"{r.acc_percent:.3f}", f"{r.eer_percent:.3f}"])
