"""Top-K ranking evaluation: recall and NDCG over full item rankings
with training items masked out.

Ranking is deterministic: scores sort descending and ties break on the
ascending item index. A user counts toward a domain's averages only if
their ground-truth set for the evaluated split is non-empty.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import batch_rows
from .errors import ParameterError
from .model import ModelConfig, ModelParams, forward

EVAL_BATCH_USERS = 1024


def top_k(scores: np.ndarray, train_items: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest-scoring items outside the training set.

    Equal scores rank by ascending item index. If fewer than k items are
    eligible the list is just shorter.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    order = np.argsort(-scores, kind="stable")
    if len(train_items):
        banned = np.zeros(scores.shape[0], dtype=bool)
        banned[train_items] = True
        order = order[~banned[order]]
    return order[:k]


def recall_at_k(ranked: np.ndarray, truth: set[int], k: int) -> float:
    """Fraction of the truth set that appears in the top k. Truth must be non-empty."""
    if not truth:
        raise ParameterError("recall is undefined for an empty truth set")
    hits = sum(1 for item in ranked[:k] if int(item) in truth)
    return hits / len(truth)


def ndcg_at_k(ranked: np.ndarray, truth: set[int], k: int) -> float:
    """Binary-gain NDCG: DCG over hit positions, ideal DCG over min(k, |truth|)."""
    if not truth:
        raise ParameterError("ndcg is undefined for an empty truth set")
    dcg = 0.0
    for pos, item in enumerate(ranked[:k], start=1):
        if int(item) in truth:
            dcg += 1.0 / math.log2(pos + 1)
    idcg = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(k, len(truth)) + 1))
    return dcg / idcg


def score_matrix_metrics(scores: np.ndarray, train_lists: list[np.ndarray],
                         truth_lists: list[np.ndarray], k: int) -> tuple[float, float, int]:
    """Mean recall and NDCG over the users with non-empty truth.

    scores is (n_users, n_items); train_lists/truth_lists give each
    user's training and ground-truth item indices. Returns
    (mean recall, mean ndcg, users evaluated); means are 0.0 when no
    user qualifies.
    """
    recall_sum = 0.0
    ndcg_sum = 0.0
    n_eval = 0
    for u in range(scores.shape[0]):
        if truth_lists[u].size == 0:
            continue
        truth = {int(i) for i in truth_lists[u]}
        ranked = top_k(scores[u], train_lists[u], k)
        recall_sum += recall_at_k(ranked, truth, k)
        ndcg_sum += ndcg_at_k(ranked, truth, k)
        n_eval += 1
    if n_eval == 0:
        return 0.0, 0.0, 0
    return recall_sum / n_eval, ndcg_sum / n_eval, n_eval


@dataclass
class MetricsReport:
    """Per-domain ranking metrics of one model state on one split."""

    split: str
    cutoff: int
    domains: dict[str, dict] = field(default_factory=dict)
    seed: int | None = None
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "cutoff": self.cutoff,
            "domains": self.domains,
            "seed": self.seed,
            "checkpoint": self.checkpoint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def model_scores(params: ModelParams, config: ModelConfig, dataset,
                 batch_users: int = EVAL_BATCH_USERS) -> dict[str, np.ndarray]:
    """Evaluation-mode reconstruction scores for every user, per domain.

    Model input is each user's training row over both domains.
    """
    n_users = dataset.n_users
    out = {
        "s": np.zeros((n_users, dataset.n_items("s"))),
        "t": np.zeros((n_users, dataset.n_items("t"))),
    }
    for start in range(0, n_users, batch_users):
        idx = np.arange(start, min(start + batch_users, n_users))
        rows = batch_rows(dataset, idx, "train")
        trace = forward(params, config, rows, training=False)
        out["s"][idx] = trace.recon_s
        out["t"][idx] = trace.recon_t
    return out


def evaluate(params: ModelParams, config: ModelConfig, dataset, split: str,
             k: int = 20, batch_users: int = EVAL_BATCH_USERS,
             seed: int | None = None, checkpoint: str | None = None) -> MetricsReport:
    """Rank every non-training item for every user and score one split.

    Deterministic: evaluating the same params twice gives bit-identical
    reports.
    """
    if split not in ("train", "valid", "test"):
        raise ParameterError(f"unknown split {split!r}")
    scores = model_scores(params, config, dataset, batch_users)
    report = MetricsReport(split=split, cutoff=k, seed=seed, checkpoint=checkpoint)
    for domain in ("s", "t"):
        train_lists = dataset.user_item_arrays(domain, "train")
        truth_lists = dataset.user_item_arrays(domain, split)
        recall, ndcg, n_eval = score_matrix_metrics(scores[domain], train_lists, truth_lists, k)
        report.domains[domain] = {
            "recall": recall, "ndcg": ndcg, "n_users_evaluated": n_eval}
    return report
