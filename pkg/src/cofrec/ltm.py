"""Binary latent tree models.

A model is an undirected tree over binary variables, parameterized through an
arbitrary latent root: a marginal for the root and a 2x2 table
``cpt[parent_state, child_state]`` for every other variable. Observed leaves
are bound to items; state 1 of a leaf means "consumed".

Inference is exact: one upward (collect) and one downward (distribute) pass,
with every message kept in log space so that products over thousands of
leaves cannot underflow. Records are processed in vectorized chunks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .ingest import InteractionMatrix

log = logging.getLogger(__name__)

OBSERVED = "observed"
LATENT = "latent"
PROB_FLOOR = 1e-6
CHUNK = 512


class ModelError(ValueError):
    pass


class ImpossibleEvidenceError(ModelError):
    """Evidence with probability zero under the model."""

    def __init__(self, records: Sequence[int]):
        records = list(records)
        super().__init__(f"evidence has zero probability for record(s) {records[:10]}")
        self.records = records


@dataclass(frozen=True)
class ModelVariable:
    id: str
    kind: str
    level: int
    item: str | None = None

    @property
    def observed(self) -> bool:
        return self.kind == OBSERVED


@dataclass(frozen=True)
class PosteriorVector:
    level: int
    values: dict[str, float]

    def as_array(self) -> np.ndarray:
        return np.fromiter(self.values.values(), dtype=float, count=len(self.values))


@dataclass(frozen=True)
class _Structure:
    ids: list[str]              # preorder from the root
    index: dict[str, int]
    parent: np.ndarray          # -1 for the root
    children: list[list[int]]
    column: np.ndarray          # leaf column in model.items order, -1 for latents
    log_prior: np.ndarray       # (2,)
    log_cpt: np.ndarray         # (V, 2, 2); row 0 unused for the root


@dataclass(frozen=True, eq=False)
class LatentTreeModel:
    variables: tuple[ModelVariable, ...]
    edges: tuple[tuple[str, str], ...]
    root: str
    cpts: Mapping[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "edges", tuple((str(a), str(b)) for a, b in self.edges))
        cpts = {}
        for k, v in self.cpts.items():
            arr = np.array(v, dtype=float)
            arr.setflags(write=False)
            cpts[k] = arr
        object.__setattr__(self, "cpts", cpts)
        self._validate()

    def _validate(self) -> None:
        ids = [v.id for v in self.variables]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate variable ids")
        byid = {v.id: v for v in self.variables}
        for v in self.variables:
            if v.kind == OBSERVED and v.level != 0:
                raise ModelError(f"observed variable {v.id} must have level 0")
            if v.kind == LATENT and v.level < 1:
                raise ModelError(f"latent variable {v.id} must have level >= 1")
            if v.kind not in (OBSERVED, LATENT):
                raise ModelError(f"unknown kind {v.kind!r} for {v.id}")
        if self.root not in byid or byid[self.root].kind != LATENT:
            raise ModelError(f"root {self.root!r} must be a latent variable")
        if len(self.edges) != len(ids) - 1:
            raise ModelError(f"tree over {len(ids)} variables needs {len(ids) - 1} edges, got {len(self.edges)}")
        adj: dict[str, list[str]] = {i: [] for i in ids}
        for a, b in self.edges:
            if a not in adj or b not in adj or a == b:
                raise ModelError(f"bad edge {a}-{b}")
            adj[a].append(b)
            adj[b].append(a)
        seen = {self.root}
        stack = [self.root]
        while stack:
            for w in adj[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        if len(seen) != len(ids):
            raise ModelError("edges do not connect all variables")
        for v in self.variables:
            if v.kind == OBSERVED and len(adj[v.id]) != 1:
                raise ModelError(f"observed variable {v.id} must be a leaf")
        items = [v.item or v.id for v in self.variables if v.kind == OBSERVED]
        if len(set(items)) != len(items):
            raise ModelError("an item is bound to more than one leaf")
        for vid in ids:
            if vid not in self.cpts:
                raise ModelError(f"missing CPT for {vid}")
            t = self.cpts[vid]
            want = (2,) if vid == self.root else (2, 2)
            if t.shape != want:
                raise ModelError(f"CPT of {vid} has shape {t.shape}, expected {want}")
            if np.any(t < 0) or np.any(t > 1) or not np.allclose(t.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
                raise ModelError(f"CPT of {vid} is not a distribution")

    # --- structure -------------------------------------------------------

    @cached_property
    def _s(self) -> _Structure:
        adj: dict[str, list[str]] = {v.id: [] for v in self.variables}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        order_in = {v.id: k for k, v in enumerate(self.variables)}
        ids, parent_of = [], {self.root: None}
        stack = [self.root]
        while stack:
            v = stack.pop()
            ids.append(v)
            kids = sorted((w for w in adj[v] if w not in parent_of), key=order_in.get, reverse=True)
            for w in kids:
                parent_of[w] = v
            stack.extend(kids)
        index = {v: k for k, v in enumerate(ids)}
        parent = np.array([-1 if parent_of[v] is None else index[parent_of[v]] for v in ids])
        children = [[] for _ in ids]
        for k in range(1, len(ids)):
            children[parent[k]].append(k)
        colmap = {v.id: c for c, v in enumerate(self.observed)}
        column = np.array([colmap.get(v, -1) for v in ids])
        with np.errstate(divide="ignore"):
            log_cpt = np.zeros((len(ids), 2, 2))
            for k, v in enumerate(ids[1:], start=1):
                log_cpt[k] = np.log(self.cpts[v])
            log_prior = np.log(self.cpts[self.root])
        return _Structure(ids, index, parent, children, column, log_prior, log_cpt)

    @cached_property
    def observed(self) -> tuple[ModelVariable, ...]:
        return tuple(v for v in self.variables if v.kind == OBSERVED)

    @cached_property
    def items(self) -> tuple[str, ...]:
        """Item bound to each observed leaf, in leaf (column) order."""
        return tuple(v.item or v.id for v in self.observed)

    @cached_property
    def latents(self) -> tuple[ModelVariable, ...]:
        return tuple(v for v in self.variables if v.kind == LATENT)

    @property
    def max_level(self) -> int:
        return max(v.level for v in self.latents)

    def latents_at(self, level: int) -> tuple[ModelVariable, ...]:
        if not 1 <= level <= self.max_level:
            raise ModelError(f"level {level} outside 1..{self.max_level}")
        return tuple(v for v in self.latents if v.level == level)

    def variable(self, vid: str) -> ModelVariable:
        for v in self.variables:
            if v.id == vid:
                return v
        raise KeyError(vid)

    def parent(self, vid: str) -> str | None:
        p = self._s.parent[self._s.index[vid]]
        return None if p < 0 else self._s.ids[p]

    def children(self, vid: str) -> list[str]:
        return [self._s.ids[c] for c in self._s.children[self._s.index[vid]]]

    def neighbors(self, vid: str) -> list[str]:
        out = self.children(vid)
        p = self.parent(vid)
        return out + ([p] if p is not None else [])

    def replace_cpts(self, cpts: Mapping[str, np.ndarray], root: str | None = None) -> "LatentTreeModel":
        return LatentTreeModel(self.variables, self.edges, root or self.root, cpts)


# --- evidence handling --------------------------------------------------------

def evidence_array(model: LatentTreeModel, data) -> np.ndarray:
    """Dense int8 evidence aligned to ``model.items``; -1 marks an unobserved leaf."""
    if isinstance(data, InteractionMatrix):
        arr = data.to_dense()
        if data.items and tuple(data.items) != model.items:
            if set(data.items) != set(model.items):
                raise ModelError("matrix columns do not match the model's items")
            pos = {it: k for k, it in enumerate(data.items)}
            arr = arr[:, [pos[it] for it in model.items]]
    else:
        arr = np.asarray(data)
        if arr.ndim == 1:
            arr = arr[None, :]
        arr = arr.astype(np.int8)
    if arr.shape[1] != len(model.items):
        raise ModelError(f"data has {arr.shape[1]} columns, model has {len(model.items)} leaves")
    return arr


def _leaf_log_lambda(x: np.ndarray) -> np.ndarray:
    lam = np.zeros((len(x), 2))
    lam[x == 0, 1] = -np.inf
    lam[x == 1, 0] = -np.inf
    return lam


def _up_through(log_cpt: np.ndarray, lam: np.ndarray) -> np.ndarray:
    # out[:, a] = log sum_b cpt[a, b] * exp(lam[:, b])
    return np.logaddexp(lam[:, None, 0] + log_cpt[None, :, 0], lam[:, None, 1] + log_cpt[None, :, 1])


def _down_through(log_cpt: np.ndarray, down: np.ndarray) -> np.ndarray:
    # out[:, b] = log sum_a exp(down[:, a]) * cpt[a, b]
    return np.logaddexp(down[:, None, 0] + log_cpt[None, 0, :], down[:, None, 1] + log_cpt[None, 1, :])


class Propagation:
    """Two-pass message passing over one chunk of records.

    ``messages`` counts messages sent; a full run sends exactly two per edge.
    """

    def __init__(self, model: LatentTreeModel, X: np.ndarray, downward: bool = True,
                 keep_down: bool = False):
        s = model._s
        self.model = model
        self.X = X
        n, V = X.shape[0], len(s.ids)
        self.messages = 0
        up: list[np.ndarray | None] = [None] * V
        lam: list[np.ndarray | None] = [None] * V
        for v in range(V - 1, -1, -1):
            if s.column[v] >= 0:
                lv = _leaf_log_lambda(X[:, s.column[v]])
            else:
                lv = np.zeros((n, 2))
                for c in s.children[v]:
                    lv = lv + up[c]
                lam[v] = lv
            if v:
                up[v] = _up_through(s.log_cpt[v], lv)
                self.messages += 1
        self.up, self.lam = up, lam
        root_joint = s.log_prior[None, :] + lam[0]
        self.log_evidence = np.logaddexp(root_joint[:, 0], root_joint[:, 1])
        self.pi: list[np.ndarray | None] = [None] * V
        self.down: list[np.ndarray | None] = [None] * V
        if downward:
            self._distribute(keep_down)

    def _distribute(self, keep_down: bool) -> None:
        s = self.model._s
        n = self.X.shape[0]
        pi = self.pi
        pi[0] = np.broadcast_to(s.log_prior, (n, 2))
        for v in range(len(s.ids)):
            kids = s.children[v]
            if not kids:
                continue
            prefix = [pi[v]]
            for c in kids:
                prefix.append(prefix[-1] + self.up[c])
            suffix = np.zeros((n, 2))
            for j in range(len(kids) - 1, -1, -1):
                c = kids[j]
                down = prefix[j] + suffix
                pi[c] = _down_through(s.log_cpt[c], down)
                if keep_down:
                    self.down[c] = down
                self.messages += 1
                suffix = suffix + self.up[c]

    def lam_of(self, v: int) -> np.ndarray:
        s = self.model._s
        if s.column[v] >= 0:
            return _leaf_log_lambda(self.X[:, s.column[v]])
        return self.lam[v]

    def check_possible(self, offset: int = 0) -> None:
        bad = np.flatnonzero(~np.isfinite(self.log_evidence))
        if len(bad):
            raise ImpossibleEvidenceError((bad + offset).tolist())

    def posterior_s1(self, v: int) -> np.ndarray:
        joint = self.pi[v] + self.lam_of(v)
        return np.exp(joint[:, 1] - self.log_evidence)

    def edge_posterior(self, c: int) -> np.ndarray:
        """(n, 2, 2) posterior of (parent state, child state) for non-root ``c``."""
        s = self.model._s
        joint = self.down[c][:, :, None] + s.log_cpt[c][None] + self.lam_of(c)[:, None, :]
        return np.exp(joint - self.log_evidence[:, None, None])


def _chunks(n: int, size: int = CHUNK):
    for start in range(0, n, size):
        yield start, min(n, start + size)


# --- public inference API -------------------------------------------------------

def record_log_likelihoods(model: LatentTreeModel, data) -> np.ndarray:
    X = evidence_array(model, data)
    out = np.empty(X.shape[0])
    for a, b in _chunks(X.shape[0]):
        out[a:b] = Propagation(model, X[a:b], downward=False).log_evidence
    return out


def log_likelihood(model: LatentTreeModel, data) -> float:
    """Sum over records of ln P(record); ``-inf`` if some record is impossible."""
    ll = record_log_likelihoods(model, data)
    bad = np.flatnonzero(~np.isfinite(ll))
    if len(bad):
        log.warning("zero-probability records: %s", bad[:10].tolist())
        return float("-inf")
    return float(ll.sum())


def latent_posteriors(model: LatentTreeModel, data, latent_ids: Sequence[str]) -> np.ndarray:
    """P(Z=s1 | record) for each record (rows) and listed latent (columns)."""
    X = evidence_array(model, data)
    cols = [model._s.index[z] for z in latent_ids]
    out = np.empty((X.shape[0], len(cols)))
    for a, b in _chunks(X.shape[0]):
        prop = Propagation(model, X[a:b])
        prop.check_possible(a)
        for j, v in enumerate(cols):
            out[a:b, j] = prop.posterior_s1(v)
    return out


def level_posteriors(model: LatentTreeModel, data, level: int) -> np.ndarray:
    return latent_posteriors(model, data, [z.id for z in model.latents_at(level)])


def posterior_marginals(model: LatentTreeModel, evidence: Mapping[str, int], level: int) -> PosteriorVector:
    """Exact P(Z=s1 | evidence) for every latent at ``level``.

    ``evidence`` maps observed leaf ids to 0/1; absent leaves are unobserved.
    """
    latents = model.latents_at(level)
    x = np.full(len(model.items), -1, dtype=np.int8)
    col = {v.id: k for k, v in enumerate(model.observed)}
    for vid, state in evidence.items():
        if vid not in col:
            raise ModelError(f"{vid!r} is not an observed leaf")
        if state not in (0, 1):
            raise ModelError(f"state of {vid!r} must be 0 or 1")
        x[col[vid]] = state
    post = latent_posteriors(model, x[None, :], [z.id for z in latents])[0]
    return PosteriorVector(level, {z.id: float(p) for z, p in zip(latents, post)})


def closed_world_evidence(model: LatentTreeModel, consumed: Iterable[str]) -> np.ndarray:
    """Leaf states for a user: consumed items are 1, every other item 0."""
    pos = {it: k for k, it in enumerate(model.items)}
    x = np.zeros(len(model.items), dtype=np.int8)
    for it in consumed:
        if it in pos:
            x[pos[it]] = 1
    return x


def prior_marginals(model: LatentTreeModel) -> dict[str, np.ndarray]:
    """Marginal distribution of every variable with no evidence."""
    s = model._s
    marg = [None] * len(s.ids)
    marg[0] = np.array(model.cpts[model.root])
    for v in range(1, len(s.ids)):
        marg[v] = marg[s.parent[v]] @ model.cpts[s.ids[v]]
    return {vid: marg[k] for k, vid in enumerate(s.ids)}


def pair_marginal(model: LatentTreeModel, a: str, b: str) -> np.ndarray:
    """Joint P(a, b) for adjacent variables, indexed [state of a, state of b]."""
    marg = prior_marginals(model)
    if model.parent(b) == a:
        return marg[a][:, None] * model.cpts[b]
    if model.parent(a) == b:
        return (marg[b][:, None] * model.cpts[a]).T
    raise ModelError(f"{a} and {b} are not adjacent")


# --- learning -----------------------------------------------------------------

def _floor_rows(table: np.ndarray, floor: float) -> np.ndarray:
    p1 = np.clip(table[..., 1], floor, 1.0 - floor)
    return np.stack([1.0 - p1, p1], axis=-1)


def em_sweep(model: LatentTreeModel, data, floor: float = PROB_FLOOR) -> LatentTreeModel:
    """One EM iteration over every CPT with the structure held fixed."""
    s = model._s
    X = evidence_array(model, data)
    V = len(s.ids)
    counts = np.zeros((V, 2, 2))
    root_counts = np.zeros(2)
    for a, b in _chunks(X.shape[0]):
        prop = Propagation(model, X[a:b], keep_down=True)
        prop.check_possible(a)
        root_counts += np.exp(prop.pi[0] + prop.lam[0] - prop.log_evidence[:, None]).sum(axis=0)
        for c in range(1, V):
            counts[c] += prop.edge_posterior(c).sum(axis=0)
    cpts = {}
    root = root_counts / root_counts.sum()
    cpts[model.root] = _floor_rows(root, floor)
    for c in range(1, V):
        tot = counts[c].sum(axis=1, keepdims=True)
        rows = np.where(tot > 0, counts[c] / np.where(tot > 0, tot, 1.0), 0.5)
        cpts[s.ids[c]] = _floor_rows(rows, floor)
    return model.replace_cpts(cpts)


@dataclass
class LCMFit:
    """Two-state latent class model: one latent parent, independent binary children."""

    prior: np.ndarray       # [P(s0), P(s1)]
    emission: np.ndarray    # (k, 2): P(child = 1 | latent state)
    loglik: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def child_cpts(self) -> np.ndarray:
        return np.stack([1.0 - self.emission, self.emission], axis=-1)

    def joint_log(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        with np.errstate(divide="ignore"):
            lp1, lp0 = np.log(self.emission), np.log1p(-self.emission)
            return X @ lp1 + (1.0 - X) @ lp0 + np.log(self.prior)[None, :]

    def posterior(self, X: np.ndarray) -> np.ndarray:
        """P(s1 | record) per record."""
        j = self.joint_log(X)
        return np.exp(j[:, 1] - np.logaddexp(j[:, 0], j[:, 1]))


def _lcm_em_run(patterns, counts, rng, max_iters, tol, floor) -> LCMFit:
    n = counts.sum()
    k = patterns.shape[1]
    p1 = rng.uniform(0.3, 0.7)
    fit = LCMFit(np.array([1.0 - p1, p1]), rng.uniform(0.25, 0.75, size=(k, 2)), -np.inf)
    history: list[float] = []
    converged = False
    for it in range(max_iters + 1):
        joint = fit.joint_log(patterns)
        ll_rows = np.logaddexp(joint[:, 0], joint[:, 1])
        ll = float(counts @ ll_rows)
        history.append(ll)
        if it and (ll - history[-2]) / n < tol:
            converged = True
            break
        if it == max_iters:
            break
        resp = np.exp(joint - ll_rows[:, None]) * counts[:, None]      # (P, 2)
        mass = resp.sum(axis=0)
        prior = _floor_rows(mass / n, floor)
        emission = (patterns.T @ resp) / np.where(mass > 0, mass, 1.0)
        fit = LCMFit(prior, np.clip(emission, floor, 1.0 - floor), ll)
    fit.loglik, fit.history, fit.iterations, fit.converged = history[-1], history, len(history) - 1, converged
    return fit


def fit_lcm(data, restarts: int = 5, max_iters: int = 200, tol: float = 1e-4,
            rng: np.random.Generator | int | None = None, floor: float = PROB_FLOOR) -> LCMFit:
    """Fit a 2-state latent class model by EM, keeping the best of ``restarts`` starts.

    ``tol`` is the stopping threshold on per-record log-likelihood gain. The
    returned states are labeled so that s1 has the higher mean emission.
    """
    X = np.asarray(data.to_dense() if isinstance(data, InteractionMatrix) else data)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ModelError("a latent class model needs at least two children")
    if X.shape[0] == 0:
        raise ModelError("no data")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    patterns, counts = np.unique((X != 0).astype(np.int8), axis=0, return_counts=True)
    patterns = patterns.astype(float)
    counts = counts.astype(float)
    best = None
    for _ in range(max(1, restarts)):
        fit = _lcm_em_run(patterns, counts, rng, max_iters, tol, floor)
        if best is None or fit.loglik > best.loglik:
            best = fit
    if best.emission[:, 1].mean() < best.emission[:, 0].mean():
        best.prior = best.prior[::-1].copy()
        best.emission = best.emission[:, ::-1].copy()
    return best


# --- sampling and re-parameterization ----------------------------------------------

def sample(model: LatentTreeModel, n: int, seed: int | None = None) -> InteractionMatrix:
    """Forward-sample ``n`` records of the observed leaves."""
    if n < 1:
        raise ModelError("n must be >= 1")
    rng = np.random.default_rng(seed)
    s = model._s
    states = np.empty((len(s.ids), n), dtype=np.int8)
    states[0] = rng.random(n) < model.cpts[model.root][1]
    for v in range(1, len(s.ids)):
        p1 = model.cpts[s.ids[v]][states[s.parent[v]], 1]
        states[v] = rng.random(n) < p1
    cols = [s.index[v.id] for v in model.observed]
    return InteractionMatrix.from_dense(states[cols].T, items=model.items)


def reroot(model: LatentTreeModel, new_root: str) -> LatentTreeModel:
    """Equivalent model rooted at another latent (same observed distribution)."""
    try:
        var = model.variable(new_root)
    except KeyError:
        raise ModelError(f"unknown variable {new_root!r}") from None
    if var.kind != LATENT:
        raise ModelError(f"{new_root!r} is not a latent variable")
    if new_root == model.root:
        return model
    marg = prior_marginals(model)
    path = [new_root]
    while path[-1] != model.root:
        path.append(model.parent(path[-1]))
    cpts = dict(model.cpts)
    # path runs new_root -> ... -> old root; reverse each edge on it
    for child, par in zip(path[:-1], path[1:]):
        joint = marg[par][:, None] * model.cpts[child]          # [par, child]
        col = joint.sum(axis=0)                                 # P(child)
        rows = np.where(col[:, None] > 0, joint.T / np.where(col > 0, col, 1.0)[:, None], 0.5)
        cpts[par] = rows                                        # P(par | child)
    cpts[new_root] = marg[new_root]
    return model.replace_cpts(cpts, root=new_root)


# --- serialization --------------------------------------------------------------

def to_dict(model: LatentTreeModel) -> dict:
    variables = []
    for v in model.variables:
        d = {"id": v.id, "kind": v.kind, "level": v.level}
        if v.item is not None:
            d["item"] = v.item
        variables.append(d)
    cpts = {}
    for v in model.variables:
        t = model.cpts[v.id]
        cpts[v.id] = [t.tolist()] if t.ndim == 1 else t.tolist()
    return {"variables": variables, "edges": [{"a": a, "b": b} for a, b in model.edges],
            "root": model.root, "cpts": cpts}


def from_dict(doc: dict) -> LatentTreeModel:
    try:
        variables = [ModelVariable(d["id"], d["kind"], int(d["level"]), d.get("item")) for d in doc["variables"]]
        edges = [(e["a"], e["b"]) for e in doc["edges"]]
        root = doc["root"]
        cpts = {k: (np.array(rows[0]) if k == root else np.array(rows)) for k, rows in doc["cpts"].items()}
    except (KeyError, TypeError, IndexError) as exc:
        raise ModelError(f"malformed model document: {exc}") from None
    return LatentTreeModel(tuple(variables), tuple(edges), root, cpts)


def save(model: LatentTreeModel, sink: IO[str]) -> None:
    json.dump(to_dict(model), sink, indent=1)
    sink.write("\n")


def load(source: IO[str]) -> LatentTreeModel:
    return from_dict(json.load(source))
