import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosage import corpus as C
from geosage import model as M
from geosage import recsys as R
from geosage.errors import DictMismatch
from geosage.geo import USA_BBOX, GeoPoint, PyramidConfig, haversine_km, path_of

from helpers import TINY_BBOX, random_params, tiny_corpus

HOME = GeoPoint(35.0, -100.0)


def north(p, km):
    return GeoPoint(p.lat + km / (6371.0 * math.pi / 180.0), p.lon)


def corpus_with_items(locs, words=None, visits=(), bbox=USA_BBOX, H=3):
    """One user 'a' homed at HOME who visited ``visits``; items at ``locs``."""
    words = words or [("x",)] * len(locs)
    recs = [C.RawCheckin(i, "a", f"v{i}", loc, words[i], None) for i, loc in enumerate(locs)]
    corp, _ = C.build_corpus(recs, PyramidConfig(bbox, H), {"a": HOME})
    train = np.array(sorted(visits), dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(locs)), train)
    corp.split = C.SplitDataset(train, rest, np.zeros(0, np.int64), 0)
    return corp


class TestRole:
    def test_far(self):
        assert R.role_for_query(HOME, north(HOME, 150), 100.0) == 1

    def test_near(self):
        assert R.role_for_query(HOME, north(HOME, 10), 100.0) == 0

    def test_unknown_home(self):
        assert R.role_for_query(None, HOME, 100.0) == 1

    def test_query_validation(self):
        with pytest.raises(ValueError):
            R.Query("a", HOME, k=0)
        with pytest.raises(ValueError):
            R.Query("a", HOME, radius_km=0)


class TestCandidates:
    def test_empty(self):
        corp = corpus_with_items([north(HOME, 500)])
        assert R.candidates(HOME, 100.0, corp) == set()

    def test_boundary_inclusive(self):
        far = north(HOME, 80)
        corp = corpus_with_items([far, north(HOME, 120)])
        r = haversine_km(HOME, far)
        assert R.candidates(HOME, r, corp) == {0}
        assert R.candidates(HOME, r * (1 - 1e-12), corp) == set()

    @pytest.mark.parametrize("seed", range(5))
    def test_full_scan_oracle(self, seed):
        rng = np.random.default_rng(seed)
        locs = [GeoPoint(a, b) for a, b in zip(rng.uniform(24, 50, 200), rng.uniform(-125, -66, 200))]
        corp = corpus_with_items(locs, H=5)
        exclude = set(rng.choice(200, 20, replace=False).tolist())
        for _ in range(20):
            center = GeoPoint(rng.uniform(24, 50), rng.uniform(-125, -66))
            r = float(rng.uniform(10, 1500))
            want = {v for v, p in enumerate(locs) if haversine_km(center, p) <= r} - exclude
            assert R.candidates(center, r, corp, exclude) == want

    @settings(max_examples=60, deadline=None)
    @given(st.floats(25, 49), st.floats(-124, -67), st.floats(1, 3000), st.integers(1, 6))
    def test_index_any_level(self, lat, lon, r, h):
        rng = np.random.default_rng(h)
        la, lo = rng.uniform(24, 50, 200), rng.uniform(-125, -66, 200)
        index = R.SpatialIndex(la, lo, PyramidConfig(USA_BBOX, h))
        center = GeoPoint(lat, lon)
        want = [v for v in range(200) if haversine_km(center, GeoPoint(la[v], lo[v])) <= r]
        assert index.within(center, r).tolist() == want


def brute_force_score(p, user, s, path, item, words):
    a = M.alpha(p, user, s, path)
    total = 0.0
    for z in range(p.K):
        b = M.beta(p, z)
        content = math.prod(b[w] for w in words) ** (1.0 / len(words)) if words else 1.0
        total += a[z] * content * M.gamma(p, z)[item]
    return total


class TestScore:
    def test_single_topic(self):
        corp = tiny_corpus(0)
        p = random_params(corp, K=1)
        path = path_of(GeoPoint(1, 1), corp.pyramid)
        words = (0, 3, 3)
        b, g = M.beta(p, 0), M.gamma(p, 0)
        want = (b[0] * b[3] * b[3]) ** (1 / 3) * g[4]
        assert R.score_item(p, 0, 1, path, 4, words) == pytest.approx(want, rel=1e-12)

    def test_empty_words(self):
        corp = tiny_corpus(0)
        p = random_params(corp)
        path = path_of(GeoPoint(1, 1), corp.pyramid)
        a = M.alpha(p, 2, 0, path)
        want = sum(a[z] * M.gamma(p, z)[5] for z in range(p.K))
        assert R.score_item(p, 2, 0, path, 5, ()) == pytest.approx(want, rel=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_brute_force(self, seed):
        corp = tiny_corpus(seed)
        p = random_params(corp, K=3, seed=seed)
        rec = R.Recommender(p, corp)
        rng = np.random.default_rng(seed)
        d = corp.dictionaries
        for _ in range(10):
            loc = GeoPoint(*rng.uniform(0, 4, 2))
            u, s = int(rng.integers(5)), int(rng.integers(2))
            path = path_of(loc, corp.pyramid)
            scores = rec.scores(rec.alpha(u, s, loc), np.arange(len(d.items)))
            for v in range(len(d.items)):
                want = brute_force_score(p, u, s, path, v, d.item_words[v])
                assert R.score_item(p, u, s, path, v, d.item_words[v]) == pytest.approx(want, rel=1e-12)
                assert scores[v] == pytest.approx(want, rel=1e-12)


class TestRecommend:
    def setup_method(self):
        self.corp = tiny_corpus(5, n_items=12, n_acts=30)
        self.corp.split = C.split(self.corp.activities, 0.3, 1)
        self.params = random_params(self.corp, K=2, seed=9)
        self.rec = R.Recommender(self.params, self.corp)

    def oracle(self, user, loc, k, radius=R.DEFAULT_RADIUS_KM):
        d = self.corp.dictionaries
        uid = d.users.get(user)
        home = self.corp.homes[uid] if uid is not None else None
        s = R.role_for_query(home, loc, self.params.config.d_km)
        visited = {self.corp.items[i] for i in self.corp.split.train if self.corp.users[i] == uid}
        path = path_of(loc, self.corp.pyramid)
        scored = [(-brute_force_score(self.params, uid, s, path, v, d.item_words[v]), v)
                  for v in range(len(d.items))
                  if haversine_km(loc, d.item_locations[v]) <= radius and v not in visited]
        return [v for _, v in sorted(scored)[:k]]

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            user = f"u{rng.integers(6)}"  # u5 is unknown
            loc = GeoPoint(*rng.uniform(0, 4, 2))
            got = self.rec.recommend(R.Query(user, loc, k=5, radius_km=250)).items
            assert got == self.oracle(user, loc, 5, 250)

    def test_k_larger_than_candidates(self):
        loc = GeoPoint(2, 2)
        ranked = self.rec.recommend(R.Query("u1", loc, k=1000, radius_km=10_000))
        assert sorted(ranked.items) == sorted(self.rec.candidate_items(1, loc, 10_000).tolist())

    def test_never_recommends_visited(self):
        for u in range(5):
            ranked = self.rec.recommend(R.Query(f"u{u}", GeoPoint(2, 2), k=100, radius_km=1e4))
            assert not set(ranked.items) & set(self.rec.visited[u].tolist())

    def test_tie_lower_id_first(self):
        locs = [north(HOME, 1)] * 4
        corp = corpus_with_items(locs, words=[()] * 4)
        p = M.init_params(M.ModelConfig(K=2, H=3), corp.pyramid, corp.dictionaries.dims,
                          dict_hash=corp.digest())
        ranked = R.recommend(R.Query("a", HOME, k=4), p, corp)
        assert ranked.items == [0, 1, 2, 3]
        assert len({s for _, s in ranked.entries}) == 1

    def test_sorted_and_finite(self):
        ranked = self.rec.recommend(R.Query("u0", GeoPoint(2, 2), k=100, radius_km=1e4))
        keys = [(-s, v) for v, s in ranked.entries]
        assert keys == sorted(keys) and len(set(keys)) == len(keys)
        assert all(math.isfinite(s) and s >= 0 for _, s in ranked.entries)

    def test_zoom_h_is_default(self):
        q = R.Query("u2", GeoPoint(3, 1), k=8, radius_km=300)
        z = R.Query("u2", GeoPoint(3, 1), k=8, radius_km=300, zoom_level=2)
        before = M.dumps(self.params)
        assert self.rec.recommend(q).entries == self.rec.recommend(z).entries
        self.rec.recommend(R.Query("u2", GeoPoint(3, 1), k=8, zoom_level=1))
        assert M.dumps(self.params) == before

    def test_home_override_changes_role(self):
        loc = GeoPoint(2, 2)
        near = self.rec.recommend(R.Query(None, loc, home=loc))
        far = self.rec.recommend(R.Query(None, loc, home=GeoPoint(0, 0)))
        assert (near.role, far.role) == (0, 1)

    def test_dict_mismatch(self):
        other = tiny_corpus(6, n_items=12)
        with pytest.raises(DictMismatch):
            R.Recommender(self.params, other)

    def test_explain(self):
        ranked = self.rec.recommend(R.Query("u1", GeoPoint(2, 2), k=3, radius_km=500))
        top = ranked.items[0]
        info = self.rec.explain(ranked, top)
        total = sum(a * c * g for a, c, g in zip(info["alpha"], info["content_factor"], info["gamma"]))
        assert total == pytest.approx(ranked.entries[0][1], rel=1e-12)


class TestShiftInvariance:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.sampled_from(["theta0", "theta_user", "native", "tourist",
                                                   "phi0", "psi0"]), st.floats(-20, 20))
    def test_rankings_unchanged(self, seed, block, c):
        corp = tiny_corpus(seed % 7, n_items=15, n_acts=30)
        p = random_params(corp, seed=seed)
        q = p.copy()
        if block in ("native", "tourist"):
            table = q.cells(block)
            for k in table:
                table[k] = table[k] + c
        else:
            setattr(q, block, getattr(q, block) + c)
        q.invalidate()
        a, b = R.Recommender(p, corp), R.Recommender(q, corp)
        rng = np.random.default_rng(seed)
        for _ in range(4):
            query = R.Query(f"u{rng.integers(5)}", GeoPoint(*rng.uniform(0, 4, 2)), k=15,
                            radius_km=600)
            assert a.recommend(query).items == b.recommend(query).items
