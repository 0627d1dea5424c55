"""Gibbs-EM training.

E-step: with parameters frozen, every training activity's topic is redrawn from
its posterior (topic prior x word likelihoods x item likelihood). M-step: with
topics frozen, the L1-penalised complete-data log-likelihood is maximised by a
diagonally scaled proximal-gradient ascent with backtracking.

Activities sharing (user, role, leaf cell) share a topic prior, so the prior
side works on these "contexts" rather than on single activities.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import log_softmax, softmax

from .corpus import Corpus
from .errors import EmptyCorpus, NonFiniteObjective
from .geo import CellId, PyramidConfig, grid_xy
from .model import (ModelConfig, ModelParams, init_params, layer_weights, log_softmax_rows,
                    topic_logits)

log = logging.getLogger(__name__)

PENALIZED = ("theta_user", "theta_native", "theta_tourist", "phi_topic", "psi_topic")
BACKGROUND = ("theta0", "phi0", "psi0")
GROUPS = {
    "topic": ("theta0", "theta_user", "theta_native", "theta_tourist"),
    "word": ("phi0", "phi_topic"),
    "item": ("psi0", "psi_topic"),
}
_CHUNK = 1 << 15


@dataclass
class TrainOptions:
    em_iters: int = 200
    gibbs_sweeps_per_e: int = 1
    mstep_iters: int = 20
    l1_weight: float | None = None  # None: use ModelConfig.l1_weight
    convergence_tol: float = 1e-4
    window: int = 5
    seed: int | None = None  # None: use ModelConfig.seed
    freeze_background: bool = False

    def __post_init__(self):
        if min(self.em_iters, self.gibbs_sweeps_per_e, self.mstep_iters, self.window) < 1:
            raise ValueError("iteration counts must be positive")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")
        if self.l1_weight is not None and self.l1_weight < 0:
            raise ValueError("l1_weight must be non-negative")


def item_word_matrix(item_words, n_words: int) -> sp.csr_matrix:
    """Sparse (items x words) token counts."""
    rows, cols = [], []
    for v, ws in enumerate(item_words):
        rows.extend([v] * len(ws))
        cols.extend(ws)
    data = np.ones(len(rows))
    m = sp.csr_matrix((data, (rows, cols)), shape=(len(item_words), n_words))
    m.sum_duplicates()
    return m


class TrainingData:
    """Index arrays describing the training activities under one pyramid and variant."""

    def __init__(self, users, items, roles, item_lats, item_lons, item_words,
                 dims: tuple[int, int, int], pyramid: PyramidConfig, variant: str):
        self.n_users, self.n_items, self.n_words = dims
        self.pyramid = pyramid
        self.variant = variant
        H = pyramid.height
        self.act_user = np.asarray(users, dtype=np.int64)
        self.act_item = np.asarray(items, dtype=np.int64)
        self.act_role = np.asarray(roles, dtype=np.int64)
        self.n_activities = len(self.act_user)

        # per-item cell keys at every level; key = offset(level) + y * side + x
        item_lats, item_lons = np.asarray(item_lats, float), np.asarray(item_lons, float)
        self._offsets = [0]
        for h in range(1, H + 1):
            self._offsets.append(self._offsets[-1] + 4 ** h)
        item_keys = np.zeros((self.n_items, H), dtype=np.int64)
        for h in range(1, H + 1):
            x, y = grid_xy(item_lats, item_lons, h, pyramid)
            item_keys[:, h - 1] = self._offsets[h - 1] + y * (1 << h) + x
        self.item_keys = item_keys

        leaf = item_keys[self.act_item, H - 1]
        ctx_key = np.stack([self.act_user, self.act_role, leaf], axis=1)
        uniq, self.act_ctx = np.unique(ctx_key, axis=0, return_inverse=True)
        self.act_ctx = self.act_ctx.reshape(-1)
        self.ctx_user, self.ctx_role = uniq[:, 0], uniq[:, 1]
        self.n_ctx = len(uniq)
        self.ctx_count = np.bincount(self.act_ctx, minlength=self.n_ctx).astype(float)
        # any activity of the context shares the leaf, hence the full path
        first = np.full(self.n_ctx, -1, dtype=np.int64)
        first[self.act_ctx[::-1]] = np.arange(self.n_activities)[::-1]
        ctx_keys = item_keys[self.act_item[first]] if self.n_ctx else np.zeros((0, H), np.int64)

        keys, inv = np.unique(ctx_keys.reshape(-1), return_inverse=True)
        self.ctx_cells = inv.reshape(self.n_ctx, H)
        self.cells = [self._cell_from_key(int(k)) for k in keys]
        self.cell_index = {c: i for i, c in enumerate(self.cells)}
        self.n_cells = len(self.cells)

        w_nat = np.zeros((self.n_ctx, H))
        w_tour = np.zeros((self.n_ctx, H))
        for s in (0, 1):
            nat, tour = layer_weights(variant, s, H)
            mask = self.ctx_role == s
            w_nat[mask] = nat
            w_tour[mask] = tour
        self.M_user = self._aggregator(self.ctx_user[:, None], np.ones((self.n_ctx, 1)), self.n_users)
        self.M_native = self._aggregator(self.ctx_cells, w_nat, self.n_cells)
        self.M_tourist = self._aggregator(self.ctx_cells, w_tour, self.n_cells)
        # role-split path counts, independent of the variant
        self.M_path_local = self._aggregator(self.ctx_cells, np.repeat(
            (self.ctx_role == 0)[:, None].astype(float), H, axis=1), self.n_cells)
        self.M_path_tourist = self._aggregator(self.ctx_cells, np.repeat(
            (self.ctx_role == 1)[:, None].astype(float), H, axis=1), self.n_cells)

        self.item_words = item_word_matrix(item_words, self.n_words)
        self.item_words_T = self.item_words.T.tocsr()

    def _cell_from_key(self, key: int) -> CellId:
        h = int(np.searchsorted(self._offsets, key, side="right"))
        code = key - self._offsets[h - 1]
        side = 1 << h
        return CellId(h, code % side, code // side)

    def _aggregator(self, idx, weights, n_rows) -> sp.csr_matrix:
        cols = np.repeat(np.arange(self.n_ctx), idx.shape[1])
        m = sp.csr_matrix((weights.reshape(-1), (idx.reshape(-1), cols)),
                          shape=(n_rows, self.n_ctx))
        m.sum_duplicates()
        m.eliminate_zeros()
        return m

    @classmethod
    def from_corpus(cls, corpus: Corpus, config: ModelConfig, indices=None) -> "TrainingData":
        idx = corpus.train_indices() if indices is None else np.asarray(indices)
        d = corpus.dictionaries
        lats, lons = d.item_lat_lon()
        return cls(corpus.users[idx], corpus.items[idx], corpus.roles[idx], lats, lons,
                   d.item_words, d.dims, corpus.pyramid.with_height(config.H), config.variant)

    def item_paths(self, v: int) -> tuple[CellId, ...]:
        return tuple(self._cell_from_key(int(k)) for k in self.item_keys[v])


@dataclass
class SufficientStats:
    data: TrainingData
    z: np.ndarray
    d_z: np.ndarray
    d_uz: np.ndarray
    d_ctx_z: np.ndarray
    d_lz_native: np.ndarray  # (n_cells, K), locals whose path crosses the cell
    d_lz_tourist: np.ndarray
    d_zw: np.ndarray
    d_w: np.ndarray
    d_zv: np.ndarray
    d_v: np.ndarray
    tokens_z: np.ndarray  # word tokens per topic


def collect_stats(z: np.ndarray, data: TrainingData, K: int) -> SufficientStats:
    z = np.asarray(z, dtype=np.int64)
    if z.shape != (data.n_activities,):
        raise ValueError("need exactly one topic per training activity")
    d_z = np.bincount(z, minlength=K).astype(float)
    d_uz = np.bincount(data.act_user * K + z, minlength=data.n_users * K).reshape(-1, K).astype(float)
    d_ctx = np.bincount(data.act_ctx * K + z, minlength=data.n_ctx * K).reshape(-1, K).astype(float)
    d_zv = np.bincount(z * data.n_items + data.act_item,
                       minlength=K * data.n_items).reshape(K, -1).astype(float)
    d_zw = np.asarray(data.item_words_T @ d_zv.T).T
    return SufficientStats(
        data=data, z=z, d_z=d_z, d_uz=d_uz, d_ctx_z=d_ctx,
        d_lz_native=np.asarray(data.M_path_local @ d_ctx),
        d_lz_tourist=np.asarray(data.M_path_tourist @ d_ctx),
        d_zw=d_zw, d_w=d_zw.sum(axis=0), d_zv=d_zv, d_v=d_zv.sum(axis=0),
        tokens_z=d_zw.sum(axis=1))


# -- packing ModelParams <-> dense blocks over the training cells -------------

def pack(params: ModelParams, data: TrainingData) -> dict[str, np.ndarray]:
    K = params.K
    blocks = {"theta0": params.theta0.copy(), "theta_user": params.theta_user.copy(),
              "phi0": params.phi0.copy(), "phi_topic": params.phi_topic.copy(),
              "psi0": params.psi0.copy(), "psi_topic": params.psi_topic.copy()}
    for kind, table in (("theta_native", params.theta_native),
                        ("theta_tourist", params.theta_tourist)):
        arr = np.zeros((data.n_cells, K))
        for c, vec in table.items():
            i = data.cell_index.get(c)
            if i is not None:
                arr[i] = vec
        blocks[kind] = arr
    return blocks


def unpack(blocks: dict[str, np.ndarray], data: TrainingData, template: ModelParams) -> ModelParams:
    """Write blocks back into a new ModelParams; all-zero cell rows become absent."""
    tables = []
    for kind, old in (("theta_native", template.theta_native),
                      ("theta_tourist", template.theta_tourist)):
        table = {c: v.copy() for c, v in old.items() if c not in data.cell_index}
        arr = blocks[kind]
        for i in np.flatnonzero(np.any(arr != 0, axis=1)):
            table[data.cells[i]] = arr[i].copy()
        tables.append(dict(sorted(table.items())))
    return ModelParams(blocks["theta0"].copy(), blocks["theta_user"].copy(), tables[0], tables[1],
                       blocks["phi0"].copy(), blocks["phi_topic"].copy(), blocks["psi0"].copy(),
                       blocks["psi_topic"].copy(), template.config, template.pyramid,
                       template.dict_hash)


def _extra_penalty(params: ModelParams, data: TrainingData) -> float:
    total = 0.0
    for table in (params.theta_native, params.theta_tourist):
        for c, vec in table.items():
            if c not in data.cell_index:
                total += float(np.abs(vec).sum())
    return total


# -- objective and gradients on blocks ----------------------------------------

def context_logits(b: dict[str, np.ndarray], data: TrainingData) -> np.ndarray:
    eta = b["theta0"][None, :] + b["theta_user"][data.ctx_user]
    if data.n_cells:
        eta = eta + data.M_native.T @ b["theta_native"] + data.M_tourist.T @ b["theta_tourist"]
    return eta


def _group_loglik(group: str, b, stats: SufficientStats) -> float:
    if group == "topic":
        logits = context_logits(b, stats.data)
        return float(np.sum(stats.d_ctx_z * log_softmax(logits, axis=1)))
    if group == "word":
        return float(np.sum(stats.d_zw * log_softmax_rows(b["phi0"][None, :] + b["phi_topic"])))
    return float(np.sum(stats.d_zv * log_softmax_rows(b["psi0"][None, :] + b["psi_topic"])))


def _group_penalty(group: str, b) -> float:
    return sum(float(np.abs(b[name]).sum()) for name in GROUPS[group] if name in PENALIZED)


def _group_grad(group: str, b, stats: SufficientStats):
    """Per block: (observed counts, expected counts); gradient = observed - expected."""
    data = stats.data
    out = {}
    if group == "topic":
        A = softmax(context_logits(b, data), axis=1)
        E = data.ctx_count[:, None] * A
        O = stats.d_ctx_z
        out["theta0"] = (stats.d_z, E.sum(axis=0))
        out["theta_user"] = (stats.d_uz, np.asarray(data.M_user @ E))
        out["theta_native"] = (np.asarray(data.M_native @ O), np.asarray(data.M_native @ E))
        out["theta_tourist"] = (np.asarray(data.M_tourist @ O), np.asarray(data.M_tourist @ E))
    elif group == "word":
        B = np.exp(log_softmax_rows(b["phi0"][None, :] + b["phi_topic"]))
        E = stats.tokens_z[:, None] * B
        out["phi0"] = (stats.d_w, E.sum(axis=0))
        out["phi_topic"] = (stats.d_zw, E)
    else:
        G = np.exp(log_softmax_rows(b["psi0"][None, :] + b["psi_topic"]))
        E = stats.d_z[:, None] * G
        out["psi0"] = (stats.d_v, E.sum(axis=0))
        out["psi_topic"] = (stats.d_zv, E)
    return out


def log_likelihood(params: ModelParams, stats: SufficientStats) -> float:
    """Complete-data log-likelihood of the assignments in ``stats``."""
    b = pack(params, stats.data)
    return sum(_group_loglik(g, b, stats) for g in GROUPS)


def penalized_objective(params: ModelParams, stats: SufficientStats,
                        l1_weight: float | None = None) -> float:
    lam = params.config.l1_weight if l1_weight is None else l1_weight
    b = pack(params, stats.data)
    total = 0.0
    for g in GROUPS:
        total += _group_loglik(g, b, stats) - lam * _group_penalty(g, b)
    return total - lam * _extra_penalty(params, stats.data)


def gradients(params: ModelParams, stats: SufficientStats) -> dict:
    """Gradient of the unpenalised log-likelihood, shaped like ModelParams.

    Cell blocks come back as ``{CellId: vector}`` over the cells touched by
    training activities.
    """
    b = pack(params, stats.data)
    out = {}
    for g in GROUPS:
        for name, (obs, exp) in _group_grad(g, b, stats).items():
            out[name] = obs - exp
    cells = stats.data.cells
    for kind in ("theta_native", "theta_tourist"):
        out[kind] = {c: out[kind][i] for i, c in enumerate(cells)}
    return out


# -- M-step -------------------------------------------------------------------

def _soft_threshold(x, t):
    # "+ 0.0" turns -0.0 into +0.0 so zero rows stay bitwise zero
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0) + 0.0


def _coupling(group: str, data: TrainingData) -> float:
    if group == "topic":
        return 2.0 + data.pyramid.height
    return 2.0


def _prox_step(group, b, stats, lam, t, freeze, grads):
    new = dict(b)
    quad = lin = 0.0
    for name, (obs, exp) in grads.items():
        if freeze and name in BACKGROUND:
            continue
        if obs.size == 0:
            continue
        g = obs - exp
        c = (obs + exp + 1.0) * _coupling(group, stats.data)
        x = b[name]
        step = x + t * g / c
        x_new = _soft_threshold(step, t * lam / c) if name in PENALIZED else step
        delta = x_new - x
        new[name] = x_new
        lin += float(np.sum(g * delta))
        quad += float(np.sum(c * delta * delta))
    return new, lin, quad


def _optimize_blocks(b, stats, lam, iters, freeze, history=None):
    """Run ``iters`` scaled proximal-gradient iterations per parameter group in place."""
    values = {}
    for g in GROUPS:
        values[g] = _group_loglik(g, b, stats) - lam * _group_penalty(g, b)
        if not math.isfinite(values[g]):
            raise NonFiniteObjective(f"{g} objective is {values[g]}")
    t_group = {g: 1.0 for g in GROUPS}
    done = set()
    if history is not None:
        history.append(sum(values.values()))
    for _ in range(iters):
        for g in GROUPS:
            if g in done:
                continue
            smooth = values[g] + lam * _group_penalty(g, b)
            grads = _group_grad(g, b, stats)
            t = t_group[g]
            accepted = False
            for _try in range(40):
                cand, lin, quad = _prox_step(g, b, stats, lam, t, freeze, grads)
                if quad == 0.0:
                    break
                c_smooth = _group_loglik(g, cand, stats)
                c_val = c_smooth - lam * _group_penalty(g, cand)
                if (math.isfinite(c_val) and c_val >= values[g]
                        and c_smooth >= smooth + lin - quad / (2.0 * t)):
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                done.add(g)
                continue
            gain = c_val - values[g]
            for name in GROUPS[g]:
                b[name] = cand[name]
            values[g] = c_val
            t_group[g] = min(t * 2.0, 1e6)
            if gain <= 1e-12 * max(1.0, abs(c_val)):
                done.add(g)
        if history is not None:
            history.append(sum(values.values()))
        if len(done) == len(GROUPS):
            break
    return b


def m_step(params: ModelParams, stats: SufficientStats, opts: TrainOptions | None = None,
           history: list | None = None) -> ModelParams:
    """Maximise the penalised objective with topics fixed; never decreases it.

    Backgrounds are unpenalised. When ``history`` is a list it receives the
    penalised objective (restricted to training cells) after every iteration.
    """
    opts = opts or TrainOptions()
    lam = params.config.l1_weight if opts.l1_weight is None else opts.l1_weight
    b = pack(params, stats.data)
    _optimize_blocks(b, stats, lam, opts.mstep_iters, opts.freeze_background, history)
    return unpack(b, stats.data, params)


# -- E-step -------------------------------------------------------------------

def topic_posterior(params: ModelParams, user: int | None, s: int, path, item: int,
                    words) -> np.ndarray:
    """Posterior over topics of one activity: prior x product of word probs x item prob."""
    lp = log_softmax(topic_logits(params, user, s, path))
    lb = params.log_beta()
    for w in words:
        lp = lp + lb[:, w]
    lp = lp + params.log_gamma()[:, item]
    return softmax(lp)


def _sample_rows(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    p = softmax(logp, axis=1)
    cdf = np.cumsum(p, axis=1)
    z = (u[:, None] * cdf[:, -1:] >= cdf).sum(axis=1)
    return np.minimum(z, logp.shape[1] - 1)


def _content_logp(b, data: TrainingData) -> np.ndarray:
    """(items, K): summed log word probs of each item's words plus the item's log prob."""
    lb = log_softmax_rows(b["phi0"][None, :] + b["phi_topic"])
    lg = log_softmax_rows(b["psi0"][None, :] + b["psi_topic"])
    return np.asarray(data.item_words @ lb.T) + lg.T


def _sweep_blocks(b, data: TrainingData, rng: np.random.Generator) -> np.ndarray:
    log_prior = log_softmax(context_logits(b, data), axis=1)
    content = _content_logp(b, data)
    z = np.empty(data.n_activities, dtype=np.int64)
    for start in range(0, data.n_activities, _CHUNK):
        sl = slice(start, start + _CHUNK)
        logp = log_prior[data.act_ctx[sl]] + content[data.act_item[sl]]
        z[sl] = _sample_rows(logp, rng.random(logp.shape[0]))
    return z


def gibbs_sweep(params: ModelParams, data: TrainingData, rng: np.random.Generator) -> np.ndarray:
    """Redraw every activity's topic (ascending activity order) with parameters frozen."""
    return _sweep_blocks(pack(params, data), data, rng)


# -- training loop ------------------------------------------------------------

@dataclass
class TraceRecord:
    iteration: int
    objective: float
    objective_before_mstep: float
    mstep_min_delta: float
    nonzero: dict
    wall_time: float

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "objective": self.objective,
                "objective_before_mstep": self.objective_before_mstep,
                "mstep_min_delta": self.mstep_min_delta, "nonzero": self.nonzero,
                "wall_time": self.wall_time}


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[TraceRecord] = field(default_factory=list)
    converged: bool = False
    initial_objective: float = float("nan")


def _block_nonzeros(b) -> dict:
    return {name: int(np.count_nonzero(b[name])) for name in PENALIZED}


def train(corpus: Corpus, config: ModelConfig, opts: TrainOptions | None = None,
          callback=None) -> TrainResult:
    """Fit a model on the corpus's training split by Gibbs-EM."""
    opts = opts or TrainOptions()
    lam = config.l1_weight if opts.l1_weight is None else opts.l1_weight
    seed = config.seed if opts.seed is None else opts.seed
    if config.l1_weight != lam or config.seed != seed:
        config = ModelConfig(config.K, config.H, config.variant, lam, config.d_km, seed)
    data = TrainingData.from_corpus(corpus, config)
    if data.n_activities == 0:
        raise EmptyCorpus("training split has no activities")
    K = config.K
    d_v = np.bincount(data.act_item, minlength=data.n_items).astype(float)
    d_w = np.asarray(data.item_words_T @ d_v)
    params = init_params(config, corpus.pyramid, corpus.dictionaries.dims, d_w, d_v,
                         corpus.digest())
    return fit(params, data, opts, callback=callback, seed=seed, l1_weight=lam)


def fit(params: ModelParams, data: TrainingData, opts: TrainOptions, callback=None,
        seed: int = 0, l1_weight: float | None = None) -> TrainResult:
    """Gibbs-EM from the given starting parameters."""
    lam = params.config.l1_weight if l1_weight is None else l1_weight
    K = params.K
    rng = np.random.default_rng(seed)
    b = pack(params, data)
    result = TrainResult(params)
    t0 = time.perf_counter()
    objectives = []
    w = opts.window
    for it in range(1, opts.em_iters + 1):
        for _ in range(opts.gibbs_sweeps_per_e):
            z = _sweep_blocks(b, data, rng)
        stats = collect_stats(z, data, K)
        history: list[float] = []
        _optimize_blocks(b, stats, lam, opts.mstep_iters, opts.freeze_background, history)
        if it == 1:
            result.initial_objective = history[0]
        deltas = np.diff(history)
        rec = TraceRecord(it, history[-1], history[0],
                          float(deltas.min()) if len(deltas) else 0.0,
                          _block_nonzeros(b), time.perf_counter() - t0)
        result.trace.append(rec)
        if callback is not None:
            callback(rec)
        objectives.append(history[-1])
        if len(objectives) >= 2 * w:
            prev = float(np.mean(objectives[-2 * w:-w]))
            cur = float(np.mean(objectives[-w:]))
            if abs(cur - prev) <= opts.convergence_tol * abs(prev):
                result.converged = True
                break
    result.params = unpack(b, data, params)
    return result
