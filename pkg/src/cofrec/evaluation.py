"""Top-N evaluation: Recall@R, NDCG over the full ranking, global diversity.

Every method is a *scorer*: it has ``items`` (the candidate columns),
``fit(train_log)`` and ``score(users) -> (n_users, n_items)``. All scorers go
through :func:`evaluate`, so metric code never depends on the method.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .cof import ConformativeFilter, item_rank, ranking
from .hlta import HierarchyConfig, build_hierarchy
from .ingest import ConfigurationError, EventLog, binarize, merge

log = logging.getLogger(__name__)

DEFAULT_TOP = (5, 10, 20)
SELECTION_R = 10


def recall_at(recommended: Sequence[str], test_items: Iterable[str]) -> float:
    test_items = set(test_items)
    if not test_items:
        raise ValueError("recall needs at least one test item")
    return len(test_items.intersection(recommended)) / len(test_items)


def _dcg_positions(positions: Iterable[int]) -> float:
    return sum(1.0 / math.log2(p + 1) for p in positions)


def ndcg(full_list: Sequence[str], test_items: Iterable[str]) -> float:
    """NDCG of a complete ranking; positions are 1-based, relevance binary."""
    test_items = set(test_items)
    if not test_items:
        raise ValueError("NDCG needs at least one test item")
    dcg = _dcg_positions(k for k, it in enumerate(full_list, start=1) if it in test_items)
    ideal = _dcg_positions(range(1, min(len(test_items), len(full_list)) + 1))
    return dcg / ideal if ideal > 0 else 0.0


def diversity_at(lists: Iterable[Sequence[str]]) -> int:
    """Number of distinct items across all recommendation lists."""
    seen: set[str] = set()
    for lst in lists:
        seen.update(lst)
    return len(seen)


@dataclass
class EvalReport:
    method: str
    params: dict
    recall_at: dict[int, float]
    ndcg: float
    diversity_at: dict[int, int]
    evaluated_users: int
    skipped_users: int
    dropped_cold_items: int = 0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "params": self.params,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "ndcg": self.ndcg,
            "diversity_at": {str(k): v for k, v in self.diversity_at.items()},
            "evaluated_users": self.evaluated_users,
            "skipped_users": self.skipped_users,
            "dropped_cold_items": self.dropped_cold_items,
        }


# --- baselines ----------------------------------------------------------------------

def _train_matrix(train: EventLog):
    tr = train.compact()
    m = binarize(tr).csr.astype(np.float64)
    return tr.users, tr.items, m


class Popularity:
    """Scores an item by the number of training users who consumed it."""

    name = "pop"

    def __init__(self):
        self.params: dict = {}

    def fit(self, train: EventLog) -> "Popularity":
        _, self.items, X = _train_matrix(train)
        self.counts = np.asarray(X.sum(axis=0)).ravel()
        return self

    def score(self, users: Sequence[str]) -> np.ndarray:
        return np.tile(self.counts, (len(users), 1))


def _cosine_rows(A: sparse.csr_matrix, B: sparse.csr_matrix) -> np.ndarray:
    na = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    nb = np.sqrt(np.asarray(B.multiply(B).sum(axis=1)).ravel())
    dots = np.asarray((A @ B.T).todense())
    denom = np.outer(na, nb)
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def _top_k_mask(sim: np.ndarray, k: int) -> np.ndarray:
    """Keep each row's k largest entries (ties to the lower column); zero the rest."""
    n_cols = sim.shape[1]
    k = min(k, n_cols)
    out = np.zeros_like(sim)
    cols = np.arange(n_cols)
    for r in range(sim.shape[0]):
        order = np.lexsort((cols, -sim[r]))[:k]
        out[r, order] = sim[r, order]
    return out


class UserKNN:
    """Cosine user-kNN: score(u, i) = sum over u's k nearest users v of sim(u, v) * I(i | v)."""

    name = "uknn"

    def __init__(self, k: int = 80):
        if k < 1:
            raise ConfigurationError("k must be >= 1")
        self.k = k
        self.params = {"k": k}

    def fit(self, train: EventLog) -> "UserKNN":
        users, self.items, self.X = _train_matrix(train)
        self.user_index = {u: j for j, u in enumerate(users)}
        self.pop = Popularity().fit(train)
        return self

    def similarities(self, rows: np.ndarray) -> np.ndarray:
        sim = _cosine_rows(self.X[rows], self.X)
        sim[np.arange(len(rows)), rows] = 0.0
        return sim

    def score(self, users: Sequence[str]) -> np.ndarray:
        out = self.pop.score(users).astype(float)
        known = [(k, self.user_index[u]) for k, u in enumerate(users) if u in self.user_index]
        if known:
            pos, rows = map(np.array, zip(*known))
            sim = _top_k_mask(self.similarities(rows), self.k)
            out[pos] = (self.X.T @ sim.T).T
        return out


class ItemKNN:
    """Cosine item-kNN: score(u, i) = sum over i's k nearest items j consumed by u of sim(i, j)."""

    name = "iknn"

    def __init__(self, k: int = 80):
        if k < 1:
            raise ConfigurationError("k must be >= 1")
        self.k = k
        self.params = {"k": k}

    def fit(self, train: EventLog) -> "ItemKNN":
        users, self.items, self.X = _train_matrix(train)
        self.user_index = {u: j for j, u in enumerate(users)}
        Xt = self.X.T.tocsr()
        sim = _cosine_rows(Xt, Xt)
        np.fill_diagonal(sim, 0.0)
        self.neighbors = sparse.csr_matrix(_top_k_mask(sim, self.k))   # row i: i's k nearest items
        self.pop = Popularity().fit(train)
        return self

    def score(self, users: Sequence[str]) -> np.ndarray:
        out = self.pop.score(users).astype(float)
        known = [(k, self.user_index[u]) for k, u in enumerate(users) if u in self.user_index]
        if known:
            pos, rows = map(np.array, zip(*known))
            out[pos] = np.asarray((self.X[rows] @ self.neighbors.T).todense())
        return out


# --- shared evaluation path -----------------------------------------------------------

@dataclass
class UserResult:
    user: str
    ranked: list[str]
    relevant: set[str]


def _test_targets(items: Sequence[str], train: EventLog, test: EventLog):
    """Per evaluated user: indices of consumed training items and of new relevant test items."""
    col = {it: k for k, it in enumerate(items)}
    consumed = {u: {col[i] for i in its if i in col} for u, its in train.per_user_items().items()}
    targets, skipped, cold = {}, 0, 0
    for u, its in sorted(test.per_user_items().items()):
        if u not in consumed:
            skipped += 1
            continue
        known = {col[i] for i in its if i in col}
        cold += len(its) - len(known)
        rel = known - consumed[u]
        if rel:
            targets[u] = rel
        else:
            skipped += 1
    return consumed, targets, skipped, cold


def evaluate(scorer, train: EventLog, test: EventLog, top: Sequence[int] = DEFAULT_TOP,
             batch: int = 256, keep_rankings: bool = False):
    """Evaluate a fitted scorer on ``test``.

    A user is evaluated when present in training and having at least one test
    item that has a leaf/column and was not consumed in training. Candidates
    are all items the user did not consume in training.
    """
    items = tuple(scorer.items)
    ties = item_rank(items)
    consumed, targets, skipped, cold = _test_targets(items, train, test)
    users = list(targets)
    recall = {R: 0.0 for R in top}
    lists: dict[int, set[int]] = {R: set() for R in top}
    ndcg_sum = 0.0
    max_R = max(top) if top else 0
    rankings = []
    for a in range(0, len(users), batch):
        chunk = users[a:a + batch]
        S = scorer.score(chunk)
        for row, u in enumerate(chunk):
            excluded = np.zeros(len(items), dtype=bool)
            excluded[list(consumed[u])] = True
            order = ranking(S[row], excluded, ties)
            rel = targets[u]
            relmask = np.zeros(len(items), dtype=bool)
            relmask[list(rel)] = True
            hit = relmask[order]
            positions = np.flatnonzero(hit) + 1
            ndcg_sum += (1.0 / np.log2(positions + 1)).sum() / (1.0 / np.log2(np.arange(2, len(rel) + 2))).sum()
            for R in top:
                recall[R] += hit[:R].sum() / len(rel)
                lists[R].update(order[:R].tolist())
            if keep_rankings:
                rankings.append(UserResult(u, [items[k] for k in order[:max_R]], {items[k] for k in rel}))
    n = len(users)
    report = EvalReport(
        method=getattr(scorer, "name", type(scorer).__name__),
        params=dict(getattr(scorer, "params", {})),
        recall_at={R: (recall[R] / n if n else 0.0) for R in top},
        ndcg=ndcg_sum / n if n else 0.0,
        diversity_at={R: len(lists[R]) for R in top},
        evaluated_users=n,
        skipped_users=skipped,
        dropped_cold_items=cold,
    )
    return (report, rankings) if keep_rankings else report


# --- model selection ---------------------------------------------------------------------

def _h_key(H: int | None) -> float:
    return math.inf if H is None else H


@dataclass
class GridResult:
    best_level: int
    best_H: int | None
    points: list[tuple[int, int | None, EvalReport]] = field(default_factory=list)

    def curves(self, R: int) -> list[tuple[str, str, float, int]]:
        """(series, parameter value, Recall@R, Diversity@R): H at the best l, l at the best H."""
        rows = []
        for lvl, H, rep in self.points:
            if lvl == self.best_level:
                rows.append(("H", "full" if H is None else str(H), rep.recall_at[R], rep.diversity_at[R]))
        for lvl, H, rep in self.points:
            if H == self.best_H:
                rows.append(("l", str(lvl), rep.recall_at[R], rep.diversity_at[R]))
        return rows


def grid_search(model, train: EventLog, valid: EventLog, H_grid: Sequence[int | None],
                levels: Sequence[int], top: Sequence[int] = DEFAULT_TOP,
                select_R: int = SELECTION_R) -> GridResult:
    """Pick (l, H) maximizing validation Recall@select_R; ties prefer smaller l, then smaller H."""
    if not H_grid or not levels:
        raise ConfigurationError("empty grid")
    top = tuple(sorted(set(top) | {select_R}))
    cache: dict = {}
    points = []
    for lvl in sorted(levels):
        for H in sorted(H_grid, key=_h_key):
            rep = evaluate(ConformativeFilter(model, lvl, H, cache).fit(train), train, valid, top)
            log.info("grid l=%s H=%s recall@%d=%.5f", lvl, H, select_R, rep.recall_at[select_R])
            points.append((lvl, H, rep))
    best = min(points, key=lambda p: (-p[2].recall_at[select_R], p[0], _h_key(p[1])))
    return GridResult(best[0], best[1], points)


def select_k(factory, train: EventLog, valid: EventLog, ks: Sequence[int],
             select_R: int = SELECTION_R) -> int:
    """Validation choice of k for a kNN baseline; ties prefer smaller k."""
    scores = []
    for k in sorted(ks):
        rep = evaluate(factory(k).fit(train), train, valid, (select_R,))
        scores.append((-rep.recall_at[select_R], k))
    return min(scores)[1]


@dataclass
class ProtocolResult:
    report: EvalReport
    grid: GridResult | None = None
    model: object = None


def run_protocol(method: str, train: EventLog, valid: EventLog | None, test: EventLog,
                 top: Sequence[int] = DEFAULT_TOP, cfg: HierarchyConfig | None = None,
                 H_grid: Sequence[int | None] = (None,), levels: Sequence[int] | None = None,
                 ks: Sequence[int] = (80,), retrain: bool = True, model=None) -> ProtocolResult:
    """Tune on validation, retrain on train+validation, evaluate on test.

    For CoF, a given ``model`` is used as is for both tuning and testing
    instead of building hierarchies from the data.
    """
    cfg = cfg or HierarchyConfig()
    final_train = merge(train, valid) if (valid is not None and retrain) else train
    if method == "cof":
        grid = None
        best_l, best_H = (levels or [1])[0], H_grid[0]
        given = model
        if valid is not None and len(valid):
            model = given or build_hierarchy(binarize(train.compact()), cfg)
            grid = grid_search(model, train, valid, H_grid, levels or range(1, model.max_level + 1), top)
            best_l, best_H = grid.best_level, grid.best_H
        model = given or build_hierarchy(binarize(final_train.compact()), cfg)
        best_l = min(best_l, model.max_level)
        scorer = ConformativeFilter(model, best_l, best_H).fit(final_train)
        return ProtocolResult(evaluate(scorer, final_train, test, top), grid, model)
    if method == "pop":
        return ProtocolResult(evaluate(Popularity().fit(final_train), final_train, test, top))
    if method in ("uknn", "iknn"):
        factory = UserKNN if method == "uknn" else ItemKNN
        k = ks[0]
        if valid is not None and len(valid) and len(ks) > 1:
            k = select_k(factory, train, valid, ks)
        return ProtocolResult(evaluate(factory(k).fit(final_train), final_train, test, top))
    raise ConfigurationError(f"unknown method {method!r}")
