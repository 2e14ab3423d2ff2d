"""Conformative filtering: group profiles, user memberships, scoring, coverage bound.

A level-l latent Z_k defines the soft taste group G_k = {Z_k = s1}. A group's
preference for an item is the membership-weighted fraction of users who
consumed it within their latest H events; a user's score for an item is the
inner product of the user's membership vector with the item's column of
group preferences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from . import ltm
from .ingest import ConfigurationError, EventLog, truncate_history
from .ltm import LatentTreeModel


class CoverageDomainError(ValueError):
    """The coverage bound is vacuous for the requested (q, p, N)."""


@dataclass(frozen=True, eq=False)
class GroupProfiles:
    level: int
    H: int | None
    latents: tuple[str, ...]
    items: tuple[str, ...]
    matrix: np.ndarray  # (K, n_items): p(item | group, latest-H data)

    @property
    def K(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ScoredList:
    user: str | None
    items: tuple[str, ...]
    scores: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.items)


def _indicator(model: LatentTreeModel, log: EventLog, users: Sequence[str],
               strict: bool = True) -> sparse.csr_matrix:
    """Users x model-items 0/1 matrix from ``log``; items without a leaf are dropped.

    With ``strict``, an event by a user outside ``users`` is an error;
    otherwise such events are ignored.
    """
    col = {it: k for k, it in enumerate(model.items)}
    row = {u: k for k, u in enumerate(users)}
    item_col = np.array([col.get(it, -1) for it in log.items], dtype=np.int64)
    user_row = np.array([row.get(u, -1) for u in log.users], dtype=np.int64)
    r = user_row[log.user_codes] if len(log) else np.empty(0, dtype=np.int64)
    c = item_col[log.item_codes] if len(log) else np.empty(0, dtype=np.int64)
    if strict and np.any(r < 0):
        missing = log.users[int(log.user_codes[np.flatnonzero(r < 0)[0]])]
        raise ConfigurationError(f"user {missing!r} is not among the training users")
    keep = (c >= 0) & (r >= 0)
    m = sparse.csr_matrix((np.ones(keep.sum()), (r[keep], c[keep])), shape=(len(users), len(model.items)))
    m.sum_duplicates()
    m.data[:] = 1.0
    return m


def memberships(model: LatentTreeModel, level: int, log: EventLog,
                users: Sequence[str] | None = None) -> tuple[tuple[str, ...], np.ndarray]:
    """Membership vectors for users, each inferred from all of that user's events in ``log``.

    Users without events get the prior marginals (closed-world evidence of no
    consumption is *not* asserted for them).
    """
    users = tuple(log.active_users() if users is None else users)
    latents = [z.id for z in model.latents_at(level)]
    known = set(log.active_users())
    has = [u for u in users if u in known]
    out = np.empty((len(users), len(latents)))
    if has:
        X = _indicator(model, log, has, strict=False).toarray().astype(np.int8)
        post = ltm.latent_posteriors(model, X, latents)
        pos = {u: k for k, u in enumerate(has)}
        for k, u in enumerate(users):
            if u in pos:
                out[k] = post[pos[u]]
    if len(has) < len(users):
        prior = prior_vector(model, level)
        for k, u in enumerate(users):
            if u not in known:
                out[k] = prior
    return users, out


def prior_vector(model: LatentTreeModel, level: int) -> np.ndarray:
    marg = ltm.prior_marginals(model)
    return np.array([marg[z.id][1] for z in model.latents_at(level)])


def group_profiles(model: LatentTreeModel, level: int, history: EventLog, full_train: EventLog,
                   H: int | None = None, member_matrix: tuple[Sequence[str], np.ndarray] | None = None) -> GroupProfiles:
    """Group preference for every (level-``level`` latent, item).

    ``history`` supplies the consumption indicators (typically the latest-H
    truncation of ``full_train``); memberships come from ``full_train``. The
    sums run over every training user.
    """
    users, M = member_matrix if member_matrix is not None else memberships(model, level, full_train)
    ind = _indicator(model, history, users)
    den = M.sum(axis=0)
    if np.any(den <= 0):
        raise ValueError("a taste group has zero total membership")
    num = np.asarray(ind.T @ M).T            # (K, items)
    latents = tuple(z.id for z in model.latents_at(level))
    return GroupProfiles(level, H, latents, model.items, num / den[:, None])


def user_vector(model: LatentTreeModel, level: int, history: Iterable[str]) -> np.ndarray:
    """Membership vector of one user from the set of items the user consumed."""
    latents = [z.id for z in model.latents_at(level)]
    x = ltm.closed_world_evidence(model, history)
    return ltm.latent_posteriors(model, x[None, :], latents)[0]


def score_all(u: np.ndarray, profiles: GroupProfiles) -> np.ndarray:
    """Score of every item: inner product of memberships and group preferences."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != profiles.K:
        raise ValueError(f"membership vector has {u.shape[-1]} entries, profiles have {profiles.K} groups")
    return u @ profiles.matrix


def item_rank(items: Sequence[str]) -> np.ndarray:
    """Position of each item in id order; used to break score ties."""
    order = sorted(range(len(items)), key=items.__getitem__)
    rank = np.empty(len(items), dtype=np.int64)
    rank[order] = np.arange(len(items))
    return rank


def ranking(scores: np.ndarray, excluded: np.ndarray, tie_rank: np.ndarray) -> np.ndarray:
    """Indices of non-excluded items by descending score, ties by ``tie_rank``."""
    cand = np.flatnonzero(~excluded)
    order = np.lexsort((tie_rank[cand], -scores[cand]))
    return cand[order]


def recommend(scores: np.ndarray, consumed: Iterable[str], R: int, items: Sequence[str],
              user: str | None = None) -> ScoredList:
    """Top-``R`` items the user has not consumed."""
    if R < 1:
        raise ConfigurationError("R must be >= 1")
    scores = np.asarray(scores, dtype=float)
    if len(scores) != len(items):
        raise ValueError("one score per item required")
    consumed = set(consumed)
    excluded = np.fromiter((it in consumed for it in items), dtype=bool, count=len(items))
    top = ranking(scores, excluded, item_rank(items))[:R]
    return ScoredList(user, tuple(items[k] for k in top), tuple(float(scores[k]) for k in top))


class ConformativeFilter:
    """CoF scorer over a trained model, for one (level, H) setting.

    Memberships are cached per level in ``member_cache`` so several H values
    can share them; pass the same dict to sibling instances.
    """

    name = "cof"

    def __init__(self, model: LatentTreeModel, level: int = 1, H: int | None = None,
                 member_cache: dict | None = None):
        model.latents_at(level)
        if H is not None and H < 1:
            raise ConfigurationError("H must be >= 1")
        self.model, self.level, self.H = model, level, H
        self.member_cache = {} if member_cache is None else member_cache
        self.profiles: GroupProfiles | None = None
        self._train_users: dict[str, int] = {}

    @property
    def params(self) -> dict:
        return {"l": self.level, "H": "full" if self.H is None else self.H, "K": len(self.model.latents_at(self.level))}

    @property
    def items(self) -> tuple[str, ...]:
        return self.model.items

    def fit(self, train: EventLog) -> "ConformativeFilter":
        key = (self.level, id(train))
        cached = self.member_cache.get(key)
        if cached is None or cached[0] is not train:
            cached = self.member_cache[key] = (train, *memberships(self.model, self.level, train))
        _, users, M = cached
        history = truncate_history(train, self.H)
        self.profiles = group_profiles(self.model, self.level, history, train, self.H, (users, M))
        self._users, self._M = users, M
        self._train_users = {u: k for k, u in enumerate(users)}
        self._prior = prior_vector(self.model, self.level)
        return self

    def user_vectors(self, users: Sequence[str]) -> np.ndarray:
        out = np.empty((len(users), self.profiles.K))
        for k, u in enumerate(users):
            j = self._train_users.get(u)
            out[k] = self._prior if j is None else self._M[j]
        return out

    def score(self, users: Sequence[str]) -> np.ndarray:
        return score_all(self.user_vectors(users), self.profiles)


# --- coverage bound ---------------------------------------------------------------

@dataclass(frozen=True)
class CoverageQuery:
    N: int
    n: int
    q: float
    p: float

    def __post_init__(self):
        if self.N < 1 or self.n < 1:
            raise ValueError("N and n must be >= 1")
        if not (0 <= self.q < 1 and 0 <= self.p < 1):
            raise ValueError("q and p must lie in [0, 1)")


def coverage_bound(query: CoverageQuery) -> int:
    """Smallest group size m with P(distinct items seen >= qN) >= p.

    m = ceil( ln(1 - q - sqrt(-ln(1-p) / 2N)) / (n ln(1 - 1/N)) ), natural logs.
    """
    N, n, q, p = query.N, query.n, query.q, query.p
    slack = 1.0 - q - math.sqrt(-math.log1p(-p) / (2.0 * N))
    if slack <= 0:
        raise CoverageDomainError(f"bound is vacuous: 1 - q - sqrt(-ln(1-p)/2N) = {slack:.6g} <= 0")
    num = math.log(slack)
    if num == 0.0:
        return 0
    return max(0, math.ceil(num / (n * math.log1p(-1.0 / N))))


@dataclass(frozen=True)
class CoverageSimulation:
    probability: float      # fraction of trials with X >= qN
    mean_distinct: float
    std_error: float        # standard error of mean_distinct
    expected_distinct: float  # N (1 - (1 - 1/N)^(m n))
    trials: int


def coverage_simulate(N: int, n: int, m: int, q: float, trials: int, seed: int | None = None,
                      batch: int = 2000) -> CoverageSimulation:
    """Monte-Carlo estimate of P(X >= qN) for m people each picking n of N items with replacement."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    picks = m * n
    distinct = np.empty(trials)
    for a in range(0, trials, batch):
        b = min(trials, a + batch)
        if picks == 0:
            distinct[a:b] = 0
            continue
        draws = rng.integers(0, N, size=(b - a, picks))
        seen = np.zeros((b - a, N), dtype=bool)
        seen[np.arange(b - a)[:, None], draws] = True
        distinct[a:b] = seen.sum(axis=1)
    threshold = q * N
    return CoverageSimulation(
        probability=float(np.mean(distinct >= threshold - 1e-9)),
        mean_distinct=float(distinct.mean()),
        std_error=float(distinct.std(ddof=1) / math.sqrt(trials)) if trials > 1 else float("nan"),
        expected_distinct=N * (1.0 - (1.0 - 1.0 / N) ** picks),
        trials=trials,
    )
