"""Top-k spatial item recommendation from a trained model."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .errors import DictMismatch
from .geo import GeoPoint, PyramidConfig, circle_cell_range, grid_xy, haversine_km, haversine_km_many, path_of
from .inference import item_word_matrix
from .model import ModelParams, alpha

DEFAULT_RADIUS_KM = 100.0


@dataclass(frozen=True)
class Query:
    user: str | None
    location: GeoPoint
    k: int = 10
    radius_km: float = DEFAULT_RADIUS_KM
    zoom_level: int | None = None
    home: GeoPoint | None = None  # overrides the corpus home, e.g. for new users

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.radius_km <= 0:
            raise ValueError("radius_km must be positive")


@dataclass
class RankedList:
    entries: list[tuple[int, float]]
    role: int = 1
    user: int | None = None
    alpha: np.ndarray | None = field(default=None, repr=False)

    @property
    def items(self) -> list[int]:
        return [v for v, _ in self.entries]


class SpatialIndex:
    """Items bucketed by leaf cell; circle queries scan overlapping cells only."""

    def __init__(self, lats, lons, pyramid: PyramidConfig):
        self.lats = np.asarray(lats, dtype=float)
        self.lons = np.asarray(lons, dtype=float)
        self.pyramid = pyramid
        self.level = pyramid.height
        x, y = grid_xy(self.lats, self.lons, self.level, pyramid)
        buckets = defaultdict(list)
        for v, key in enumerate(zip(x.tolist(), y.tolist())):
            buckets[key].append(v)
        self.buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    @classmethod
    def for_corpus(cls, corpus: Corpus, pyramid: PyramidConfig | None = None) -> "SpatialIndex":
        lats, lons = corpus.dictionaries.item_lat_lon()
        return cls(lats, lons, pyramid or corpus.pyramid)

    def within(self, center: GeoPoint, radius_km: float) -> np.ndarray:
        xs, ys = circle_cell_range(center, radius_km, self.level, self.pyramid)
        if len(xs) * len(ys) > len(self.buckets):
            found = [b for (x, y), b in self.buckets.items() if x in xs and y in ys]
        else:
            found = [self.buckets[(x, y)] for x in xs for y in ys if (x, y) in self.buckets]
        if not found:
            return np.zeros(0, dtype=np.int64)
        cand = np.sort(np.concatenate(found))
        d = haversine_km_many(center.lat, center.lon, self.lats[cand], self.lons[cand])
        return cand[d <= radius_km]


def visited_items(corpus: Corpus) -> list[np.ndarray]:
    """Sorted training-visited item ids per user."""
    idx = corpus.train_indices()
    users, items = corpus.users[idx], corpus.items[idx]
    out = [np.zeros(0, dtype=np.int64)] * len(corpus.dictionaries.users)
    order = np.lexsort((items, users))
    users, items = users[order], items[order]
    bounds = np.searchsorted(users, np.arange(len(out) + 1))
    for u in range(len(out)):
        out[u] = np.unique(items[bounds[u]:bounds[u + 1]])
    return out


def candidates(location: GeoPoint, radius_km: float, corpus: Corpus, exclude=(),
               index: SpatialIndex | None = None) -> set[int]:
    """Items within ``radius_km`` (inclusive) of ``location``, minus ``exclude``."""
    index = index or SpatialIndex.for_corpus(corpus)
    found = index.within(location, radius_km)
    ex = set(int(v) for v in exclude)
    return {int(v) for v in found if int(v) not in ex}


def role_for_query(home: GeoPoint | None, location: GeoPoint, d_km: float) -> int:
    """1 (tourist) when home is farther than ``d_km``; unknown home counts as tourist."""
    if home is None:
        return 1
    return 1 if haversine_km(home, location) > d_km else 0


def content_factors(params: ModelParams, item_words_matrix) -> np.ndarray:
    """(K, items) geometric mean of each item's word probabilities; 1 for wordless items."""
    n_words = np.asarray(item_words_matrix.sum(axis=1)).reshape(-1)
    summed = np.asarray(item_words_matrix @ params.log_beta().T)  # (V, K)
    mean = np.divide(summed, n_words[:, None], out=np.zeros_like(summed),
                     where=n_words[:, None] > 0)
    return np.exp(mean).T


def item_factors(params: ModelParams, item_words_matrix) -> np.ndarray:
    """(K, items): content factor times item probability."""
    return content_factors(params, item_words_matrix) * np.exp(params.log_gamma())


def score_item(params: ModelParams, user: int | None, s: int, path, item: int, words,
               zoom_level: int | None = None) -> float:
    a = alpha(params, user, s, path, zoom_level)
    lb = params.log_beta()
    if len(words):
        content = np.exp(np.mean([lb[:, w] for w in words], axis=0))
    else:
        content = np.ones(params.K)
    g = np.exp(params.log_gamma()[:, item])
    return float(np.sum(a * content * g))


class Recommender:
    """Read-only scorer bound to one model and one corpus."""

    def __init__(self, params: ModelParams, corpus: Corpus, check_hash: bool = True):
        if check_hash and params.dict_hash and params.dict_hash != corpus.digest():
            raise DictMismatch("model was trained on different dictionaries than this corpus")
        if params.dims[1:] != corpus.dictionaries.dims[1:]:
            raise DictMismatch(f"model dims {params.dims} vs corpus {corpus.dictionaries.dims}")
        self.params = params
        self.corpus = corpus
        self.d_km = params.config.d_km
        d = corpus.dictionaries
        self.item_words = item_word_matrix(d.item_words, len(d.vocab))
        self.content = content_factors(params, self.item_words)
        self.factors = self.content * np.exp(params.log_gamma())
        self.index = SpatialIndex.for_corpus(corpus, params.pyramid)
        self.visited = visited_items(corpus)

    def resolve_user(self, user) -> int | None:
        if user is None:
            return None
        if isinstance(user, (int, np.integer)):
            return int(user)
        uid = self.corpus.dictionaries.users.get(user)
        if uid is not None and uid >= self.params.dims[0]:
            return None
        return uid

    def home_of(self, uid: int | None) -> GeoPoint | None:
        return None if uid is None else self.corpus.homes[uid]

    def role(self, uid: int | None, location: GeoPoint, home: GeoPoint | None = None) -> int:
        return role_for_query(home or self.home_of(uid), location, self.d_km)

    def alpha(self, uid, s, location: GeoPoint, zoom_level=None) -> np.ndarray:
        return alpha(self.params, uid, s, path_of(location, self.params.pyramid), zoom_level)

    def scores(self, alpha_vec: np.ndarray, items) -> np.ndarray:
        return alpha_vec @ self.factors[:, np.asarray(items, dtype=np.int64)]

    def candidate_items(self, uid, location: GeoPoint, radius_km: float) -> np.ndarray:
        found = self.index.within(location, radius_km)
        if uid is None:
            return found
        return found[~np.isin(found, self.visited[uid])]

    def recommend(self, q: Query) -> RankedList:
        uid = self.resolve_user(q.user)
        s = self.role(uid, q.location, q.home)
        a = self.alpha(uid, s, q.location, q.zoom_level)
        items = self.candidate_items(uid, q.location, q.radius_km)
        sc = self.scores(a, items)
        order = np.lexsort((items, -sc))[:q.k]
        return RankedList([(int(items[i]), float(sc[i])) for i in order], s, uid, a)

    def explain(self, ranked: RankedList, item: int) -> dict:
        """Per-topic alpha, content factor and gamma behind one item's score."""
        g = np.exp(self.params.log_gamma()[:, item])
        return {"item": item, "role": ranked.role, "alpha": ranked.alpha.tolist(),
                "content_factor": self.content[:, item].tolist(), "gamma": g.tolist()}


def recommend(q: Query, params: ModelParams, corpus: Corpus) -> RankedList:
    return Recommender(params, corpus).recommend(q)
