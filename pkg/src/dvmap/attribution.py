"""Which demographic attributes drive each answer: forests + MDI.

Trees split one-vs-rest on a single categorical value (value == v goes
left, everything else right), chosen to maximize the weighted Gini
decrease. Mean decrease in impurity, averaged over trees and normalized
per question, fills one row of the importance matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .archetype import (
    ConsensusRecord,
    DemographicProfile,
    Histogram,
    derive_profile,
    discretize_response,
)
from .artifacts import stable_u64
from .survey import ATTRIBUTES, Codebook, Respondent


class AttributionError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 5
    features_per_split: str | int = "sqrt"   # "sqrt", "all", or an explicit count
    bootstrap: bool = True
    seed: int = 0
    # Matrix assembly options.
    min_samples_per_question: int = 50
    include_country: bool = True

    def validate(self) -> None:
        if self.n_trees < 1:
            raise AttributionError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise AttributionError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise AttributionError("min_samples_leaf must be >= 1")
        if isinstance(self.features_per_split, str):
            if self.features_per_split not in ("sqrt", "all"):
                raise AttributionError(f"unknown features_per_split: {self.features_per_split!r}")
        elif self.features_per_split < 1:
            raise AttributionError("features_per_split must be >= 1")

    def to_json(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_samples_leaf": self.min_samples_leaf,
            "features_per_split": self.features_per_split,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
            "min_samples_per_question": self.min_samples_per_question,
            "include_country": self.include_country,
        }


def gini(histogram: Histogram) -> float:
    """Gini impurity 1 - sum(p_i^2) of a label histogram."""
    return 1.0 - sum(p * p for p in histogram.probabilities())


def _gini_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.dot(p, p))


@dataclass
class Node:
    n: int
    impurity: float
    prediction: int
    feature: int | None = None
    value: int | None = None
    decrease: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class Forest:
    trees: list[Node]
    attribute_names: tuple[str, ...]
    n_labels: int
    n_samples: int
    config: ForestConfig


def _n_features(cfg: ForestConfig, p: int) -> int:
    if cfg.features_per_split == "sqrt":
        return max(1, int(math.sqrt(p)))
    if cfg.features_per_split == "all":
        return p
    return min(int(cfg.features_per_split), p)


def _best_split(
    x: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    features: Sequence[int],
    n_labels: int,
    node_gini: float,
    min_leaf: int,
) -> tuple[float, int, int] | None:
    """Best (decrease, feature, value) over one-vs-rest candidate splits."""
    n = len(idx)
    total_counts = np.bincount(y[idx], minlength=n_labels).astype(np.float64)
    best: tuple[float, int, int] | None = None
    for f in features:
        vals = x[idx, f]
        uniq, inv = np.unique(vals, return_inverse=True)
        if len(uniq) < 2:
            continue
        # Contingency table (value x label) in one pass.
        cont = np.bincount(inv * n_labels + y[idx], minlength=len(uniq) * n_labels)
        cont = cont.reshape(len(uniq), n_labels).astype(np.float64)
        nl = cont.sum(axis=1)
        nr = n - nl
        valid = (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        right = total_counts - cont
        with np.errstate(invalid="ignore", divide="ignore"):
            gl = 1.0 - (cont * cont).sum(axis=1) / (nl * nl)
            gr = 1.0 - (right * right).sum(axis=1) / (nr * nr)
        decrease = node_gini - (nl / n) * gl - (nr / n) * gr
        decrease[~valid] = -np.inf
        j = int(np.argmax(decrease))  # ties: lowest value wins (uniq is sorted)
        if decrease[j] > 0.0 and (best is None or decrease[j] > best[0]):
            best = (float(decrease[j]), f, int(uniq[j]))
    return best


def _build_tree(
    x: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    depth: int,
    cfg: ForestConfig,
    n_labels: int,
    rng: np.random.Generator,
) -> Node:
    counts = np.bincount(y[idx], minlength=n_labels)
    node = Node(
        n=len(idx),
        impurity=_gini_counts(counts.astype(np.float64)),
        prediction=int(np.argmax(counts)),
    )
    if depth >= cfg.max_depth or node.impurity == 0.0 or len(idx) < 2 * cfg.min_samples_leaf:
        return node
    p = x.shape[1]
    m = _n_features(cfg, p)
    features = rng.choice(p, size=m, replace=False) if m < p else np.arange(p)
    found = _best_split(x, y, idx, list(features), n_labels, node.impurity, cfg.min_samples_leaf)
    if found is None:
        return node
    node.decrease, node.feature, node.value = found
    mask = x[idx, node.feature] == node.value
    node.left = _build_tree(x, y, idx[mask], depth + 1, cfg, n_labels, rng)
    node.right = _build_tree(x, y, idx[~mask], depth + 1, cfg, n_labels, rng)
    return node


def fit_forest(
    x: np.ndarray,
    y: np.ndarray,
    attribute_names: Sequence[str],
    cfg: ForestConfig,
    n_labels: int | None = None,
) -> Forest:
    """Fit a forest on integer-encoded categorical features.

    Samples are re-sorted into a canonical (content) order before any
    randomness is consumed and per-tree streams are keyed by (seed, tree),
    so the result is invariant to input row order.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise AttributionError("feature matrix and labels disagree in shape")
    if len(y) == 0:
        raise AttributionError("no training samples")
    if x.shape[1] != len(attribute_names):
        raise AttributionError("attribute_names length does not match feature columns")
    if n_labels is None:
        n_labels = int(y.max()) + 1

    order = np.lexsort(tuple(x[:, j] for j in reversed(range(x.shape[1]))) + (y,))
    x = x[order]
    y = y[order]

    n = len(y)
    trees: list[Node] = []
    for t in range(cfg.n_trees):
        rng = np.random.Generator(np.random.Philox(key=stable_u64("forest_tree", cfg.seed, t)))
        idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        trees.append(_build_tree(x, y, np.asarray(idx), 0, cfg, n_labels, rng))
    return Forest(
        trees=trees,
        attribute_names=tuple(attribute_names),
        n_labels=n_labels,
        n_samples=n,
        config=cfg,
    )


def _tree_importance(root: Node, p: int) -> np.ndarray:
    imp = np.zeros(p, dtype=np.float64)
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            continue
        imp[node.feature] += (node.n / root.n) * node.decrease
        stack.append(node.left)
        stack.append(node.right)
    return imp


def mdi_importance(forest: Forest) -> tuple[np.ndarray, bool]:
    """Mean decrease in impurity per attribute, normalized to sum 1.

    Returns (vector, degenerate) where degenerate marks the all-zero case
    (no tree found a useful split), left unnormalized at zero.
    """
    p = len(forest.attribute_names)
    acc = np.zeros(p, dtype=np.float64)
    for root in forest.trees:
        acc += _tree_importance(root, p)
    acc /= len(forest.trees)
    total = acc.sum()
    if total <= 0.0:
        return acc, True
    return acc / total, False


def predict(forest: Forest, x: np.ndarray) -> np.ndarray:
    """Majority vote over trees; mainly for sanity checks in tests."""
    x = np.asarray(x, dtype=np.int64)
    votes = np.zeros((len(x), forest.n_labels), dtype=np.int64)
    for root in forest.trees:
        for i, row in enumerate(x):
            node = root
            while not node.is_leaf:
                node = node.left if row[node.feature] == node.value else node.right
            votes[i, node.prediction] += 1
    return votes.argmax(axis=1)


@dataclass
class ImportanceMatrix:
    questions: tuple[str, ...]
    attributes: tuple[str, ...]
    values: list[list[float]]              # rows align with questions
    n_per_question: dict[str, int]
    skipped: dict[str, int] = field(default_factory=dict)   # qid -> sample count below minimum
    degenerate: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "questions": list(self.questions),
            "attributes": list(self.attributes),
            "values": self.values,
            "n_per_question": self.n_per_question,
            "skipped": self.skipped,
            "degenerate": self.degenerate,
        }

    def to_csv_text(self) -> str:
        lines = ["question," + ",".join(self.attributes)]
        for qid, row in zip(self.questions, self.values):
            lines.append(qid + "," + ",".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"


LabeledAnswer = tuple[DemographicProfile, str, int]   # (profile, question id, answer index)


def labeled_from_records(records: Iterable[ConsensusRecord]) -> Iterator[LabeledAnswer]:
    for r in records:
        yield r.profile, r.question_id, r.answer_index


def labeled_from_respondents(
    respondents: Iterable[Respondent],
    codebook: Codebook,
) -> Iterator[LabeledAnswer]:
    """One labeled row per (respondent, answered question); incomplete
    demographics are skipped, mirroring archetype extraction."""
    for resp in respondents:
        profile = derive_profile(resp, codebook)
        if profile is None:
            continue
        for qid, code in resp.answers.items():
            spec = codebook.questions.get(qid)
            if spec is None:
                continue
            label = discretize_response(spec, code)
            yield profile, qid, spec.options.index(label)


def encode_profiles(
    profiles: Sequence[DemographicProfile],
    attributes: Sequence[str],
) -> np.ndarray:
    """Integer-encode profile attributes with sorted-category codes, so the
    encoding is independent of sample order."""
    columns = []
    for attr in attributes:
        values = [getattr(p, attr) for p in profiles]
        cats = {v: i for i, v in enumerate(sorted(set(values)))}
        columns.append([cats[v] for v in values])
    return np.asarray(columns, dtype=np.int64).T


def importance_matrix(
    labeled: Iterable[LabeledAnswer],
    codebook: Codebook,
    cfg: ForestConfig,
) -> ImportanceMatrix:
    """One forest per question; rows are that forest's normalized MDI.

    Questions with fewer samples than cfg.min_samples_per_question are
    skipped and reported rather than fit on vapor.
    """
    cfg.validate()
    attributes = tuple(a for a in ATTRIBUTES if cfg.include_country or a != "country")

    per_question: dict[str, list[tuple[DemographicProfile, int]]] = {}
    for profile, qid, answer in labeled:
        per_question.setdefault(qid, []).append((profile, answer))

    questions: list[str] = []
    rows: list[list[float]] = []
    n_per_question: dict[str, int] = {}
    skipped: dict[str, int] = {}
    degenerate: list[str] = []

    # Codebook order keeps the matrix stable across runs and sources.
    ordered = [qid for qid in codebook.questions if qid in per_question]
    ordered += [qid for qid in sorted(per_question) if qid not in codebook.questions]
    for qid in ordered:
        pairs = per_question[qid]
        if len(pairs) < cfg.min_samples_per_question:
            skipped[qid] = len(pairs)
            continue
        profiles = [p for p, _ in pairs]
        y = np.asarray([a for _, a in pairs], dtype=np.int64)
        x = encode_profiles(profiles, attributes)
        k = codebook.questions[qid].K if qid in codebook.questions else int(y.max()) + 1
        forest = fit_forest(
            x, y, attributes,
            ForestConfig(**{**cfg.to_json(), "seed": stable_u64("forest_question", cfg.seed, qid)}),
            n_labels=k,
        )
        vector, is_degenerate = mdi_importance(forest)
        if is_degenerate:
            degenerate.append(qid)
        questions.append(qid)
        rows.append([float(v) for v in vector])
        n_per_question[qid] = len(pairs)

    return ImportanceMatrix(
        questions=tuple(questions),
        attributes=attributes,
        values=rows,
        n_per_question=n_per_question,
        skipped=skipped,
        degenerate=degenerate,
    )
