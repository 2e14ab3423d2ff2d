"""Shared fixtures: random small latent trees and an exhaustive-enumeration oracle."""

import itertools
import sys

import numpy as np
import pytest

from cofrec.ltm import LATENT, OBSERVED, LatentTreeModel, ModelVariable


def random_tree_model(rng: np.random.Generator, n_latent: int | None = None, n_leaves: int | None = None,
                      extreme: bool = False) -> LatentTreeModel:
    """Random binary latent tree: latents wired into a random tree, leaves hung on random latents.

    Latent levels are 1 or 2 (chosen at random, at least one of each when
    there are two or more latents). With ``extreme``, some CPT cells are
    close to 0 or 1.
    """
    n_latent = n_latent or int(rng.integers(1, 5))
    n_leaves = n_leaves or int(rng.integers(2, 13 - n_latent))
    latents = [f"Z{k}" for k in range(n_latent)]
    levels = [1] * n_latent
    if n_latent >= 2:
        levels = [2] + [int(rng.integers(1, 3)) for _ in range(n_latent - 2)] + [1]
    variables = [ModelVariable(z, LATENT, lv) for z, lv in zip(latents, levels)]
    edges = []
    for k in range(1, n_latent):
        edges.append((latents[int(rng.integers(0, k))], latents[k]))
    for j in range(n_leaves):
        it = f"x{j}"
        variables.append(ModelVariable(it, OBSERVED, 0, it))
        edges.append((latents[int(rng.integers(0, n_latent))], it))

    def row():
        p = rng.uniform(0.001, 0.02) if extreme and rng.random() < 0.3 else rng.uniform(0.05, 0.95)
        return [1 - p, p]

    root = latents[int(rng.integers(0, n_latent))]
    cpts = {v.id: np.array([row(), row()]) for v in variables if v.id != root}
    cpts[root] = np.array(row())
    return LatentTreeModel(tuple(variables), tuple(edges), root, cpts)


def rooted_parents(model: LatentTreeModel) -> dict[str, str | None]:
    adj = {v.id: [] for v in model.variables}
    for a, b in model.edges:
        adj[a].append(b)
        adj[b].append(a)
    parent = {model.root: None}
    stack = [model.root]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in parent:
                parent[w] = v
                stack.append(w)
    return parent


def enumerate_joint(model: LatentTreeModel):
    """All 2^V configurations and their joint probabilities, computed independently of the library."""
    ids = [v.id for v in model.variables]
    parent = rooted_parents(model)
    configs = np.array(list(itertools.product([0, 1], repeat=len(ids))), dtype=np.int8)
    prob = np.ones(len(configs))
    col = {vid: k for k, vid in enumerate(ids)}
    for vid in ids:
        t = np.asarray(model.cpts[vid])
        if parent[vid] is None:
            prob *= t[configs[:, col[vid]]]
        else:
            prob *= t[configs[:, col[parent[vid]]], configs[:, col[vid]]]
    return ids, configs, prob


def brute_posterior(model: LatentTreeModel, evidence: dict[str, int], latent_ids) -> np.ndarray:
    ids, configs, prob = enumerate_joint(model)
    col = {vid: k for k, vid in enumerate(ids)}
    mask = np.ones(len(configs), dtype=bool)
    for vid, s in evidence.items():
        mask &= configs[:, col[vid]] == s
    z = prob[mask].sum()
    return np.array([prob[mask & (configs[:, col[l]] == 1)].sum() / z for l in latent_ids])


def brute_loglik(model: LatentTreeModel, X: np.ndarray) -> float:
    """Sum of ln P(record) by enumeration; columns follow ``model.items``."""
    ids, configs, prob = enumerate_joint(model)
    col = {vid: k for k, vid in enumerate(ids)}
    leaf_cols = [col[v.id] for v in model.observed]
    total = 0.0
    for x in np.asarray(X):
        mask = np.all(configs[:, leaf_cols] == x[None, :], axis=1)
        total += np.log(prob[mask].sum())
    return total


def observed_distribution(model: LatentTreeModel) -> dict[tuple, float]:
    ids, configs, prob = enumerate_joint(model)
    col = {vid: k for k, vid in enumerate(ids)}
    leaf_cols = [col[v.id] for v in model.observed]
    out: dict[tuple, float] = {}
    for c, p in zip(configs[:, leaf_cols], prob):
        out[tuple(c)] = out.get(tuple(c), 0.0) + p
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
