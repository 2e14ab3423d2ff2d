"""Synthetic data with known taste structure, for recoverability checks and demos."""

from __future__ import annotations

import numpy as np

from . import ltm
from .ingest import EventLog, InteractionMatrix
from .ltm import LATENT, OBSERVED, LatentTreeModel, ModelVariable


def planted_hierarchy(n_blocks: int = 4, block_size: int = 4, on: float = 0.9, off: float = 0.05,
                      top_prior: float = 0.5, taste_given_top: tuple[float, float] = (0.15, 0.6)
                      ) -> LatentTreeModel:
    """Two-level model: a root over ``n_blocks`` taste latents, each over its own item block.

    Items are named ``b{block}_{k}``; ``taste_given_top`` is P(taste=1 | root=s0), P(taste=1 | root=s1).
    """
    variables = [ModelVariable("T", LATENT, 2)]
    edges, cpts = [], {"T": np.array([1 - top_prior, top_prior])}
    lo, hi = taste_given_top
    for b in range(n_blocks):
        z = f"G{b}"
        variables.append(ModelVariable(z, LATENT, 1))
        edges.append(("T", z))
        cpts[z] = np.array([[1 - lo, lo], [1 - hi, hi]])
        for k in range(block_size):
            it = f"b{b}_{k}"
            variables.append(ModelVariable(it, OBSERVED, 0, it))
            edges.append((z, it))
            cpts[it] = np.array([[1 - off, off], [1 - on, on]])
    return LatentTreeModel(tuple(variables), tuple(edges), "T", cpts)


def block_labels(items, sep: str = "_") -> list[str]:
    """Planted block of each ``b{block}_{k}`` item name."""
    return [it.split(sep)[0] for it in items]


def timed_events(matrix: InteractionMatrix, seed: int | None = None, horizon: int = 1_000_000,
                 user_prefix: str = "u") -> EventLog:
    """Turn each record into a user whose consumptions happen at uniform random times."""
    rng = np.random.default_rng(seed)
    coo = matrix.csr.tocoo()
    items = matrix.items or tuple(str(j) for j in range(matrix.cols))
    width = len(str(matrix.rows))
    users = [f"{user_prefix}{r:0{width}d}" for r in range(matrix.rows)]
    times = rng.integers(0, horizon, size=coo.nnz)
    return EventLog.from_events(zip((users[r] for r in coo.row), (items[c] for c in coo.col), times.tolist()))


def planted_log(n_users: int, seed: int, **model_kw) -> tuple[LatentTreeModel, EventLog]:
    model = planted_hierarchy(**model_kw)
    data = ltm.sample(model, n_users, seed)
    return model, timed_events(data, seed + 1)


def drifting_log(n_users: int = 400, n_groups: int = 6, pool_size: int = 80, mainstream_size: int = 150,
                 mean_events: float = 20.0, classic_share: float = 1.0, drift_at: float = 0.8,
                 growth: float = 2.0, zipf: float = 0.8, noise: float = 0.0,
                 seed: int | None = None) -> EventLog:
    """Event log whose group tastes move to fresh items at ``drift_at`` of the timeline.

    Each user belongs to one of ``n_groups`` groups. Before the drift a user
    spends ``classic_share`` of their events on a shared mainstream pool and
    the rest on the group's old pool; after it, on the group's new pool. All
    pools have Zipf-shaped popularity. A ``noise`` fraction of events picks a
    uniformly random item. Nobody repeats an item. Activity is lognormal
    around ``mean_events`` and event times have density proportional to
    ``t**growth`` on [0, 1), so recent periods are busier.
    """
    rng = np.random.default_rng(seed)

    def zipf_weights(size):
        w = np.arange(1, size + 1, dtype=float) ** -zipf
        return w / w.sum()

    pool_w, main_w = zipf_weights(pool_size), zipf_weights(mainstream_size)
    names = [f"g{g}_{phase}_{k:03d}" for g in range(n_groups) for phase in ("old", "new")
             for k in range(pool_size)]
    main_start = len(names)
    names += [f"main_{k:03d}" for k in range(mainstream_size)]
    width = len(str(n_users))
    horizon = 10_000_000
    events = []
    for u in range(n_users):
        n_ev = int(np.clip(rng.lognormal(np.log(mean_events), 0.5), 5, pool_size))
        own = rng.integers(n_groups)
        taken: set[int] = set()
        for t in np.sort(rng.random(n_ev) ** (1.0 / (1.0 + growth))):
            r = rng.random()
            if r < noise:
                pool, w = np.arange(len(names)), None
            elif t < drift_at and r < noise + classic_share:
                pool, w = np.arange(main_start, main_start + mainstream_size), main_w
            else:
                start = (2 * own + (t >= drift_at)) * pool_size
                pool, w = np.arange(start, start + pool_size), pool_w
            free = np.fromiter((i not in taken for i in pool), dtype=bool, count=len(pool))
            if not free.any():
                continue
            p = (np.ones(len(pool)) if w is None else w) * free
            item = int(rng.choice(pool, p=p / p.sum()))
            taken.add(item)
            events.append((f"u{u:0{width}d}", names[item], int(t * horizon)))
    return EventLog.from_events(events)
