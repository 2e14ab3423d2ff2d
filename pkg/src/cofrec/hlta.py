"""Hierarchy construction over item co-consumption patterns.

Level by level: cluster the current variables by pairwise mutual information,
fit a two-state latent class model per cluster, and hard-assign each record
to its most probable latent state to obtain the binary data for the next
level. Stop once a level has few enough latents, link those into a tree with
a maximum spanning tree, and refresh all parameters with one EM sweep.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import ltm
from .ingest import InteractionMatrix
from .ltm import LATENT, OBSERVED, LatentTreeModel, ModelVariable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HierarchyConfig:
    max_cluster_size: int = 5
    top_level_max: int = 15
    em_restarts: int = 5
    em_tol: float = 1e-4
    em_max_iters: int = 200
    seed: int = 0
    # A variable joins a growing cluster only while its mean MI to the members
    # is at least this fraction of the seed pair's MI. 0 disables the check.
    min_growth_ratio: float = 0.5
    refresh: bool = True

    def __post_init__(self):
        if self.max_cluster_size < 2:
            raise ValueError("max_cluster_size must be >= 2")
        if self.top_level_max < 1:
            raise ValueError("top_level_max must be >= 1")
        if not 0.0 <= self.min_growth_ratio <= 1.0:
            raise ValueError("min_growth_ratio must be in [0, 1]")


@dataclass
class Level:
    """One level of the hierarchy as built (before the final refresh)."""

    level: int
    latents: list[str]
    clusters: list[list[str]]
    members: list[list[int]]
    fits: list[ltm.LCMFit]
    completed: np.ndarray = field(repr=False)


def _as_matrix(data) -> sparse.csc_matrix:
    if isinstance(data, InteractionMatrix):
        return data.csr.tocsc().astype(np.float64)
    return sparse.csc_matrix((np.asarray(data) != 0).astype(np.float64))


def pairwise_mi(data) -> np.ndarray:
    """Empirical mutual information (nats) between binary columns, add-one smoothed."""
    X = _as_matrix(data)
    n = X.shape[0]
    n11 = np.asarray((X.T @ X).todense())
    ones = np.diag(n11).copy()
    n10 = ones[:, None] - n11
    n01 = ones[None, :] - n11
    n00 = n - n11 - n10 - n01
    total = n + 4.0
    cells = [(n11 + 1) / total, (n10 + 1) / total, (n01 + 1) / total, (n00 + 1) / total]
    pa1 = (ones + 2) / total
    pa = [pa1[:, None], pa1[:, None], 1 - pa1[:, None], 1 - pa1[:, None]]
    pb = [pa1[None, :], 1 - pa1[None, :], pa1[None, :], 1 - pa1[None, :]]
    mi = sum(p * np.log(p / (a * b)) for p, a, b in zip(cells, pa, pb))
    mi = np.maximum(mi, 0.0)
    mi = (mi + mi.T) / 2
    np.fill_diagonal(mi, 0.0)
    return mi


def sibling_clusters(mi: np.ndarray, max_cluster_size: int, min_growth_ratio: float = 0.0) -> list[list[int]]:
    """Greedy partition of variables (by index) into sibling groups.

    Each cluster is seeded with the highest-MI pair among unassigned
    variables and grown with the unassigned variable of highest mean MI to the
    members. Ties go to the lower index. A lone leftover variable joins the
    cluster of its highest-MI partner.
    """
    V = mi.shape[0]
    if V < 2:
        raise ValueError("need at least two variables")
    iu, ju = np.triu_indices(V, k=1)
    weights = mi[iu, ju]
    pair_order = np.lexsort((ju, iu, -weights))
    assigned = np.zeros(V, dtype=bool)
    clusters: list[list[int]] = []
    ptr = 0
    while (~assigned).sum() >= 2:
        while assigned[iu[pair_order[ptr]]] or assigned[ju[pair_order[ptr]]]:
            ptr += 1
        k = pair_order[ptr]
        a, b = int(iu[k]), int(ju[k])
        seed_mi = mi[a, b]
        members = [a, b]
        assigned[[a, b]] = True
        total = mi[a] + mi[b]
        while len(members) < max_cluster_size and not assigned.all():
            score = np.where(assigned, -np.inf, total / len(members))
            c = int(np.argmax(score))
            if score[c] < min_growth_ratio * seed_mi:
                break
            members.append(c)
            assigned[c] = True
            total = total + mi[c]
        clusters.append(members)
    if not assigned.all():
        lone = int(np.flatnonzero(~assigned)[0])
        owner = {v: k for k, cl in enumerate(clusters) for v in cl}
        partners = [v for v in range(V) if v != lone]
        best = max(partners, key=lambda v: (mi[lone, v], -v))
        clusters[owner[best]].append(lone)
    return clusters


def mst_connect(mi: np.ndarray, ids: list[str]) -> list[tuple[str, str]]:
    """Maximum-weight spanning tree (Kruskal); equal weights resolved by index order."""
    V = len(ids)
    if V <= 1:
        return []
    iu, ju = np.triu_indices(V, k=1)
    order = np.lexsort((ju, iu, -mi[iu, ju]))
    parent = list(range(V))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = []
    for k in order:
        a, b = int(iu[k]), int(ju[k])
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            edges.append((ids[a], ids[b]))
            if len(edges) == V - 1:
                break
    return edges


def build_level(data: np.ndarray, names: list[str], level: int, cfg: HierarchyConfig,
                rng: np.random.Generator) -> Level:
    """Cluster the columns of ``data``, fit one LCM per cluster, and complete the data."""
    data = np.asarray(data, dtype=np.int8)
    if data.shape[1] != len(names):
        raise ValueError("one name per column required")
    if data.shape[1] < 2:
        raise ValueError("need at least two variables")
    clusters = sibling_clusters(pairwise_mi(data), cfg.max_cluster_size, cfg.min_growth_ratio)
    fits, completed = [], np.empty((data.shape[0], len(clusters)), dtype=np.int8)
    for k, members in enumerate(clusters):
        fit = ltm.fit_lcm(data[:, members], cfg.em_restarts, cfg.em_max_iters, cfg.em_tol, rng)
        fits.append(fit)
        completed[:, k] = fit.posterior(data[:, members]) > 0.5
    latents = [f"Z{level}_{k + 1}" for k in range(len(clusters))]
    log.info("level %d: %d variables -> %d latents", level, data.shape[1], len(latents))
    return Level(level, latents, [[names[m] for m in cl] for cl in clusters], clusters, fits, completed)


def _smoothed_conditional(parent_col: np.ndarray, child_col: np.ndarray) -> np.ndarray:
    table = np.ones((2, 2))
    np.add.at(table, (parent_col.astype(int), child_col.astype(int)), 1)
    return table / table.sum(axis=1, keepdims=True)


def build_hierarchy(data: InteractionMatrix, cfg: HierarchyConfig | None = None) -> LatentTreeModel:
    """Learn a hierarchical latent tree model whose leaves are the matrix columns."""
    cfg = cfg or HierarchyConfig()
    items = tuple(data.items) if data.items else tuple(str(j) for j in range(data.cols))
    if len(items) < 2:
        raise ValueError("need at least two items")
    rng = np.random.default_rng(cfg.seed)
    X = data.to_dense()
    names = list(items)
    variables = [ModelVariable(it, OBSERVED, 0, it) for it in items]
    edges: list[tuple[str, str]] = []
    cpts: dict[str, np.ndarray] = {}
    current, level_no = X, 1
    levels: list[Level] = []
    while True:
        lv = build_level(current, names, level_no, cfg, rng)
        levels.append(lv)
        for z, members, fit in zip(lv.latents, lv.clusters, lv.fits):
            variables.append(ModelVariable(z, LATENT, level_no))
            child_cpts = fit.child_cpts()
            for j, child in enumerate(members):
                edges.append((z, child))
                cpts[child] = child_cpts[j]
        if len(lv.latents) <= cfg.top_level_max:
            break
        names, current, level_no = lv.latents, lv.completed, level_no + 1
    top = levels[-1]
    root = top.latents[0]
    cpts[root] = top.fits[0].prior
    if len(top.latents) > 1:
        top_edges = mst_connect(pairwise_mi(top.completed), top.latents)
        edges.extend(top_edges)
        # orient away from the root and estimate P(child | parent) from completed data
        col = {z: k for k, z in enumerate(top.latents)}
        adj: dict[str, list[str]] = {z: [] for z in top.latents}
        for a, b in top_edges:
            adj[a].append(b)
            adj[b].append(a)
        stack, seen = [root], {root}
        while stack:
            p = stack.pop()
            for c in adj[p]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
                    cpts[c] = _smoothed_conditional(top.completed[:, col[p]], top.completed[:, col[c]])
    model = LatentTreeModel(tuple(variables), tuple(edges), root, cpts)
    if cfg.refresh:
        model = ltm.em_sweep(model, X)
    return model


def hierarchy_report(model: LatentTreeModel) -> list[tuple[str, int, str, float, float]]:
    """Rows (latent, level, child, P(child=1 | s1), P(child=1 | s0)), children by contrast."""
    rows = []
    for z in sorted(model.latents, key=lambda v: (v.level, _latent_key(v.id))):
        kids = [model.variable(c) for c in model.neighbors(z.id)]
        kids = [c for c in kids if c.level < z.level]
        entries = []
        for c in kids:
            joint = ltm.pair_marginal(model, z.id, c.id)
            cond = joint[:, 1] / joint.sum(axis=1)
            entries.append((c.item or c.id, float(cond[1]), float(cond[0])))
        entries.sort(key=lambda e: (-(e[1] - e[2]), e[0]))
        rows.extend((z.id, z.level, name, p1, p0) for name, p1, p0 in entries)
    return rows


def _latent_key(zid: str):
    try:
        lvl, k = zid[1:].split("_")
        return (int(lvl), int(k))
    except ValueError:
        return (0, zid)
