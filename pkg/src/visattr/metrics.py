"""Downstream evaluation: compatibility scoring, FITB, retrieval, kNN probe,
and the frozen-feature linear probe with triplet loss.

All rankings are deterministic: ties resolve to the stable lowest input
index and emit a TieWarning. AUC uses exact pair counting via average
ranks, not curve integration.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (DegeneracyWarning, DimensionError, TieWarning,
                     UndefinedMetricError)
from .optim import Adam

COSINE_EPS = 1e-12


@dataclass
class EmbeddingSet:
    """Item id -> feature vector, with optional per-item category labels."""

    vectors: dict[str, np.ndarray]
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise DimensionError(f"inconsistent embedding shapes: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def require(self, item_id: str) -> np.ndarray:
        if item_id not in self.vectors:
            raise KeyError(f"no embedding for item {item_id!r}")
        return self.vectors[item_id]


def write_embeddings(path: str | Path, embeddings: EmbeddingSet) -> None:
    """Text format: header ``id<TAB>dim``, then ``item_id<TAB>v1,v2,...``."""
    lines = [f"id\t{embeddings.dim}"]
    for item_id, vec in embeddings.vectors.items():
        lines.append(f"{item_id}\t" + ",".join(f"{v:.9g}" for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embeddings(path: str | Path) -> EmbeddingSet:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ValueError(f"{path}: empty embedding file")
    head = text[0].split("\t")
    if len(head) != 2 or head[0] != "id":
        raise ValueError(f"{path}: malformed header {text[0]!r}")
    dim = int(head[1])
    vectors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        item_id, payload = line.split("\t")
        vec = np.array([float(v) for v in payload.split(",")])
        if vec.shape[0] != dim:
            raise ValueError(f"{path}:{lineno}: expected {dim} values, got {vec.shape[0]}")
        vectors[item_id] = vec
    return EmbeddingSet(vectors)


# -- similarity primitives ---------------------------------------------------------


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm <= COSINE_EPS:
        warnings.warn("zero vector in cosine similarity; using epsilon norm",
                      DegeneracyWarning, stacklevel=3)
    return vec / max(norm, COSINE_EPS)


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms <= COSINE_EPS):
        warnings.warn("zero vector in cosine similarity; using epsilon norm",
                      DegeneracyWarning, stacklevel=3)
    return mat / np.maximum(norms, COSINE_EPS)


def compatibility_score(vectors: list[np.ndarray]) -> float:
    """Mean pairwise cosine similarity over all unordered pairs."""
    n = len(vectors)
    if n < 2:
        raise DimensionError("compatibility needs at least two items")
    units = _unit_rows(np.stack(vectors))
    sims = units @ units.T
    index_upper = np.triu_indices(n, k=1)
    return float(sims[index_upper].mean())


# -- ranking metrics ------------------------------------------------------------------


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group's average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    sorted_scores = scores[order]
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    return ranks


def auc(scores, labels) -> float:
    """Exact pairwise AUC: P(score_pos > score_neg) + 0.5 * P(equal)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Non-interpolated AP; ties keep stable input order in the ranking."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    cum_pos = np.cumsum(hits)
    precisions = cum_pos[hits] / (np.flatnonzero(hits) + 1.0)
    # fsum keeps the mean exactly rounded, independent of summation order
    return math.fsum(precisions) / int(labels.sum())


def _argmax_stable(values: np.ndarray) -> tuple[int, bool]:
    best = int(np.argmax(values))  # argmax returns the first maximum
    tie = bool(np.sum(values == values[best]) > 1)
    return best, tie


def fitb_answer(question, embeddings: EmbeddingSet) -> int:
    """Index of the candidate with the highest mean cosine similarity to the
    partial outfit; exact ties pick the lowest index and warn."""
    partial = _unit_rows(np.stack([embeddings.require(i) for i in question.partial]))
    cands = _unit_rows(np.stack([embeddings.require(i) for i in question.candidates]))
    scores = (cands @ partial.T).mean(axis=1)
    best, tie = _argmax_stable(scores)
    if tie:
        warnings.warn(f"FITB tie resolved to candidate {best}", TieWarning, stacklevel=2)
    return best


def recall_at_k(queries: dict[str, np.ndarray], gallery: dict[str, np.ndarray],
                ground_truth: dict[str, list[str]], k: int) -> float:
    """Fraction of queries whose top-k cosine neighbors contain a true item."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gallery_ids = list(gallery)
    if k > len(gallery_ids):
        warnings.warn(f"k={k} exceeds gallery size {len(gallery_ids)}; clamping",
                      UserWarning, stacklevel=2)
        k = len(gallery_ids)
    gallery_mat = _unit_rows(np.stack([gallery[g] for g in gallery_ids]))
    hits = 0
    for qid, qvec in queries.items():
        truth = set(ground_truth.get(qid, ()))
        if not truth:
            raise UndefinedMetricError(f"query {qid!r} has no ground-truth items")
        sims = gallery_mat @ _unit(qvec)
        top = np.argsort(-sims, kind="stable")[:k]
        if any(gallery_ids[i] in truth for i in top):
            hits += 1
    return hits / len(queries)


def knn_category_accuracy(embeddings: EmbeddingSet, k: int, tau: float = 0.07,
                          weighted: bool = True) -> float:
    """Leave-one-out kNN accuracy on category labels.

    Votes are weighted by exp(similarity / tau) by default; plain majority
    voting is available with ``weighted=False``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = [i for i in embeddings.vectors if i in embeddings.labels]
    if len(set(embeddings.labels[i] for i in ids)) < 2:
        raise UndefinedMetricError("kNN probe needs at least two classes")
    if k >= len(ids):
        warnings.warn(f"k={k} >= dataset size {len(ids)}; clamping", UserWarning, stacklevel=2)
        k = len(ids) - 1
    mat = _unit_rows(np.stack([embeddings.vectors[i] for i in ids]))
    classes = sorted(set(embeddings.labels[i] for i in ids))
    class_index = {c: j for j, c in enumerate(classes)}
    y = np.array([class_index[embeddings.labels[i]] for i in ids])
    sims = mat @ mat.T
    np.fill_diagonal(sims, -np.inf)
    correct = 0
    for row in range(len(ids)):
        neighbors = np.argsort(-sims[row], kind="stable")[:k]
        votes = np.zeros(len(classes))
        for nb in neighbors:
            w = np.exp(sims[row, nb] / tau) if weighted else 1.0
            votes[y[nb]] += w
        predicted, _ = _argmax_stable(votes)
        correct += int(predicted == y[row])
    return correct / len(ids)


# -- linear probe ----------------------------------------------------------------------


@dataclass
class ProbeResult:
    weight: np.ndarray  # [out_dim, n_feat]
    mapped: EmbeddingSet
    losses: list[float]


def linear_probe(embeddings: EmbeddingSet, triplets: list[tuple[str, str, str]],
                 epochs: int = 100, margin: float = 0.2, out_dim: int = 64,
                 lr: float = 1e-2, seed: int = 0,
                 init_weight: np.ndarray | None = None) -> ProbeResult:
    """Train one linear map on frozen features with a triplet hinge loss.

    The loss is max(0, d(a,p) - d(a,n) + margin) with d the Euclidean
    distance between unit-normalized mapped features, full-batch Adam.
    """
    if not triplets:
        raise ValueError("linear probe needs at least one triplet")
    dim = embeddings.dim
    anchors = np.stack([embeddings.require(a) for a, _, _ in triplets])
    positives = np.stack([embeddings.require(p) for _, p, _ in triplets])
    negatives = np.stack([embeddings.require(n) for _, _, n in triplets])

    rng = np.random.default_rng(seed)
    if init_weight is None:
        init_weight = rng.standard_normal((out_dim, dim)) / np.sqrt(dim)
    weight = Tensor(init_weight, requires_grad=True)
    optimizer = Adam({"probe/w": weight}, lr=lr)

    def distances(lhs: np.ndarray, rhs: np.ndarray) -> Tensor:
        ml = ad.l2_normalize(ad.matmul(Tensor(lhs), ad.transpose2d(weight)))
        mr = ad.l2_normalize(ad.matmul(Tensor(rhs), ad.transpose2d(weight)))
        diff = ad.add(ml, ad.mul(mr, -1.0))
        return (ad.sum_(ad.mul(diff, diff), axis=-1) + 1e-12) ** 0.5

    losses = []
    for _ in range(epochs):
        gap = ad.add(distances(anchors, positives),
                     ad.mul(distances(anchors, negatives), -1.0))
        loss = ad.mean(ad.relu(ad.add(gap, margin)))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())

    mapped_w = weight.data
    mapped = {}
    for item_id, vec in embeddings.vectors.items():
        out = mapped_w @ vec
        mapped[item_id] = out / max(np.linalg.norm(out), COSINE_EPS)
    return ProbeResult(mapped_w.copy(), EmbeddingSet(mapped, dict(embeddings.labels)), losses)


def triplets_from_manifest(manifest, rng: np.random.Generator,
                           count: int) -> list[tuple[str, str, str]]:
    """Sample (anchor, positive, negative): anchor/positive share an outfit,
    the negative comes from elsewhere."""
    outfit_ids = [oid for oid, items in manifest.outfits.items() if len(items) >= 2]
    if not outfit_ids:
        raise ValueError("no outfits with at least two items")
    all_items = list(manifest.items)
    triplets = []
    for _ in range(count):
        oid = outfit_ids[rng.integers(0, len(outfit_ids))]
        members = manifest.outfits[oid]
        a, p = rng.choice(len(members), size=2, replace=False)
        while True:
            neg = all_items[rng.integers(0, len(all_items))]
            if neg not in members:
                break
        triplets.append((members[a], members[p], neg))
    return triplets
