"""Forward sampling of check-in corpora from planted model parameters.

Items get a fixed leaf-cell location, a dominant topic and a word set drawn
once from that topic. Each user gets a home; every activity picks a place
(a cell within reach of home, or with probability ``tourist_fraction`` a cell
beyond reach), then a topic from the user's topic distribution at that place,
then an item of that topic restricted to the chosen cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .corpus import Corpus, Dictionaries, Lexicon, UserActivity
from .errors import RejectionCapExceeded
from .geo import BoundingBox, CellId, GeoPoint, PyramidConfig, cells_at_level, centroid, grid_xy, haversine_km_many
from .model import ModelConfig, ModelParams, alpha, init_params

# ~440 km x 360 km: leaf cells of a height-3 pyramid are ~55 km across
SYNTH_BBOX = BoundingBox.from_bounds(33.0, -120.0, 37.0, -116.0)
REJECTION_CAP = 10_000


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 200
    n_items: int = 300
    vocab_size: int = 100
    K: int = 5
    H: int = 3
    activities_per_user: int = 30
    tourist_fraction: float = 0.2
    drift_strength: float = 9.0
    seed: int = 0
    bbox: BoundingBox = SYNTH_BBOX
    d_km: float = 100.0
    words_per_item: int = 4
    destination_spread: float = 0.0  # lognormal sigma of tourist destination appeal
    user_strength: float = 1.5
    cell_strength: float = 1.0
    word_strength: float = 3.0
    item_strength: float = 3.0

    def __post_init__(self):
        counts = (self.n_users, self.n_items, self.vocab_size, self.K, self.H,
                  self.activities_per_user)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if not 0.0 <= self.tourist_fraction <= 1.0:
            raise ValueError("tourist_fraction must be in [0, 1]")
        if self.drift_strength < 0:
            raise ValueError("drift_strength must be non-negative")

    @property
    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(self.bbox, self.H)


def _one_hot(K, z, value):
    v = np.zeros(K)
    v[z] = value
    return v


def make_params(spec: SynthSpec) -> ModelParams:
    """Planted parameters with sparse deviations.

    Every cell carries a shared preference; native and tourist preferences
    add separate one-topic offsets of size ``drift_strength / H`` on top.
    """
    rng = np.random.default_rng([spec.seed, 0])
    K, H = spec.K, spec.H
    config = ModelConfig(K=K, H=H, variant="full", l1_weight=0.0, d_km=spec.d_km, seed=spec.seed)
    p = init_params(config, spec.pyramid, (spec.n_users, spec.n_items, spec.vocab_size))
    p.theta0 = rng.normal(0.0, 0.3, K)
    for u in range(spec.n_users):
        p.theta_user[u, rng.integers(K)] = spec.user_strength
    drift = spec.drift_strength / H
    for h in range(1, H + 1):
        for c in cells_at_level(h):
            base = _one_hot(K, rng.integers(K), spec.cell_strength)
            nat = base + _one_hot(K, rng.integers(K), drift)
            tour = base + _one_hot(K, rng.integers(K), drift)
            p.theta_native[c] = nat
            p.theta_tourist[c] = tour if drift > 0 else nat.copy()
    for w in range(spec.vocab_size):
        p.phi_topic[w % K, w] = spec.word_strength
    p.phi0 = rng.normal(0.0, 0.3, spec.vocab_size)
    item_topic = rng.integers(K, size=spec.n_items)
    p.psi_topic[item_topic, np.arange(spec.n_items)] = spec.item_strength
    p.psi0 = rng.normal(0.0, 0.3, spec.n_items)
    p.invalidate()
    return p


def _item_layout(spec: SynthSpec, params: ModelParams, rng):
    box = spec.bbox
    lats = rng.uniform(box.min.lat, box.max.lat, spec.n_items)
    lons = rng.uniform(box.min.lon, box.max.lon, spec.n_items)
    dominant = np.argmax(params.psi_topic, axis=0)
    lb = params.log_beta()
    words = []
    for v in range(spec.n_items):
        ws = rng.choice(spec.vocab_size, size=spec.words_per_item, p=np.exp(lb[dominant[v]]))
        words.append(tuple(sorted(int(w) for w in ws)))
    return lats, lons, words


def draw_topics(params: ModelParams, user: int | None, s: int, path, n: int,
                rng: np.random.Generator) -> np.ndarray:
    return rng.choice(params.K, size=n, p=alpha(params, user, s, path))


def sample_corpus(params: ModelParams, spec: SynthSpec, return_topics: bool = False):
    """Draw a labelled corpus (no split) from ``params``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 1])
    pyr = spec.pyramid
    lats, lons, item_words = _item_layout(spec, params, rng)
    x, y = grid_xy(lats, lons, spec.H, pyr)
    side = 1 << spec.H
    leaf = y * side + x
    cell_items = {c: np.flatnonzero(leaf == c) for c in np.unique(leaf)}
    occupied = np.array(sorted(cell_items))
    paths = {c: tuple(CellId(h, int(c % side) >> (spec.H - h), int(c // side) >> (spec.H - h))
                      for h in range(1, spec.H + 1)) for c in occupied}
    attract = np.exp(rng.normal(0.0, spec.destination_spread, len(occupied)))
    log_gamma = params.log_gamma()

    homes, acts, topics = [], [], []
    for u in range(spec.n_users):
        hc = occupied[rng.integers(len(occupied))]
        home = centroid(CellId(spec.H, int(hc % side), int(hc // side)), pyr)
        homes.append(home)
        d = haversine_km_many(home.lat, home.lon, lats, lons)
        near = np.array([np.all(d[cell_items[c]] <= spec.d_km) for c in occupied])
        far = np.array([np.all(d[cell_items[c]] > spec.d_km) for c in occupied])
        if not near.any() or (spec.tourist_fraction > 0 and not far.any()):
            raise RejectionCapExceeded(f"user {u}: no cell entirely within/beyond {spec.d_km} km")
        near_cells = occupied[near]
        far_cells, far_w = occupied[far], attract[far] / attract[far].sum() if far.any() else None
        for _ in range(spec.activities_per_user):
            s = int(rng.random() < spec.tourist_fraction)
            c = (rng.choice(far_cells, p=far_w) if s
                 else near_cells[rng.integers(len(near_cells))])
            z = int(rng.choice(params.K, p=alpha(params, u, s, paths[c])))
            members = cell_items[c]
            lg = log_gamma[z, members]
            mass = float(np.exp(lg).sum())
            if mass * REJECTION_CAP < 1.0:
                raise RejectionCapExceeded(f"topic {z} has item mass {mass:.2e} in cell {c}")
            v = int(members[rng.choice(len(members), p=softmax(lg))])
            acts.append(UserActivity(u, v, GeoPoint(lats[v], lons[v]), item_words[v], s))
            topics.append(z)

    dicts = Dictionaries(Lexicon(f"u{i}" for i in range(spec.n_users)),
                         Lexicon(f"v{i}" for i in range(spec.n_items)),
                         Lexicon(f"w{i}" for i in range(spec.vocab_size)),
                         [GeoPoint(a, b) for a, b in zip(lats, lons)], item_words)
    corpus = Corpus(dicts, acts, homes, pyr, spec.d_km)
    params.dict_hash = dicts.digest()
    if return_topics:
        return corpus, np.asarray(topics)
    return corpus
