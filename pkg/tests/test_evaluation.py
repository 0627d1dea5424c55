import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geosage import corpus as C
from geosage import evaluation as E
from geosage import model as M
from geosage import recsys as R
from geosage.errors import EmptyTestSet
from geosage.geo import GeoPoint, PyramidConfig, USA_BBOX, path_of

from helpers import random_params, tiny_corpus


class TestRecall:
    def test_half(self):
        assert E.recall_at_k([1, 3], [2]).recall_at == {2: 0.5}

    def test_all_hits(self):
        assert E.recall_at_k([1, 2, 4], [4]).recall_at == {4: 1.0}

    def test_empty(self):
        with pytest.raises(EmptyTestSet):
            E.recall_at_k([], [2])

    def test_counting_oracle(self):
        ranks = np.random.default_rng(0).integers(1, 30, 100)
        rep = E.recall_at_k(ranks, E.DEFAULT_KS)
        for k in E.DEFAULT_KS:
            hits = 0
            for r in ranks:
                hits += r <= k
            assert rep.recall_at[k] == hits / 100

    @given(st.lists(st.integers(1, 50), min_size=1), st.lists(st.integers(1, 60), min_size=1))
    def test_bounded_monotone(self, ranks, ks):
        rec = E.recall_at_k(ranks, sorted(set(ks))).recall_at
        vals = [rec[k] for k in sorted(rec)]
        assert all(0 <= v <= 1 for v in vals)
        assert vals == sorted(vals)
        assert E.recall_at_k(ranks, [max(ranks)]).recall_at[max(ranks)] == 1.0

    def test_report_lines(self):
        rep = E.recall_at_k([1, 5], (2, 10), "out", slice="train<=0", method="s2")
        lines = [json.loads(x) for x in rep.to_lines().splitlines()]
        assert [(r["k"], r["recall"]) for r in lines] == [(2, 0.5), (10, 1.0)]
        assert all(r["scenario"] == "out" and r["slice"] == "train<=0" for r in lines)


class TestRank:
    def test_best_is_one(self):
        assert E.rank_from_scores(0.9, [0.1, 0.5]) == 1

    def test_tie_favours_truth(self):
        assert E.rank_from_scores(0.5, [0.5, 0.2]) == 1

    def test_sort_oracle(self):
        rng = np.random.default_rng(4)
        scores = rng.integers(0, 5, 10).astype(float)  # plenty of ties
        for t in range(10):
            others = np.delete(scores, t)
            order = sorted(range(10), key=lambda i: (-scores[i], i != t))
            assert E.rank_from_scores(scores[t], others) == order.index(t) + 1

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms())
    def test_order_invariant(self, others, rnd):
        shuffled = list(others)
        rnd.shuffle(shuffled)
        assert E.rank_from_scores(0.5, others) == E.rank_from_scores(0.5, shuffled)


def hand_corpus():
    """One user homed in Denver with two home-town and two out-of-town test cases."""
    den, la = GeoPoint(39.74, -104.99), GeoPoint(34.05, -118.24)
    locs = {"d1": den, "d2": GeoPoint(39.75, -105.0), "d3": GeoPoint(39.7, -104.9),
            "l1": la, "l2": GeoPoint(34.06, -118.25), "l3": GeoPoint(34.0, -118.3)}
    visits = ["d1", "d2", "d3", "l1", "l2", "l3"]
    recs = [C.RawCheckin(i, "a", v, locs[v], (v[0],), None) for i, v in enumerate(visits)]
    corp, _ = C.build_corpus(recs, PyramidConfig(USA_BBOX, 4), {"a": den})
    corp.split = C.SplitDataset(np.array([0, 3]), np.array([1, 2]), np.array([4, 5]), 0)
    return corp


class TestEvaluate:
    def test_hand_split(self):
        corp = hand_corpus()
        p = M.init_params(M.ModelConfig(K=1, H=4), corp.pyramid, corp.dictionaries.dims,
                          dict_hash=corp.digest())
        p.psi0 = np.log([1.0, 3.0, 2.0, 1.0, 1.0, 3.0])  # d1 d2 d3 l1 l2 l3
        p.invalidate()
        # home cases: d2 vs {d3} -> 1; d3 vs {d2} -> 2.  out: l2 vs {l3} -> 2; l3 vs {l2} -> 1
        home = E.evaluate(p, corp, "home", ks=(1, 2), keep_ranks=True)
        out = E.evaluate(p, corp, "out", ks=(1, 2), keep_ranks=True)
        assert home.per_case_ranks == [1, 2] and out.per_case_ranks == [2, 1]
        assert home.recall_at == {1: 0.5, 2: 1.0}

    def test_rank_of_truth_matches_evaluate(self):
        corp = hand_corpus()
        p = random_params(corp, K=2, scale=1.0)
        rep = E.evaluate(p, corp, "out", keep_ranks=True)
        assert rep.per_case_ranks == [E.rank_of_truth(i, p, corp) for i in corp.split.test_out]

    def test_rank_of_truth_oracle(self):
        corp = tiny_corpus(3, n_items=10, n_acts=40)
        corp.split = C.split(corp.activities, 0.3, 0)
        p = random_params(corp, K=3, seed=1)
        d = corp.dictionaries
        visited = R.visited_items(corp)
        for i in np.concatenate([corp.split.test_home, corp.split.test_out]):
            u, v = int(corp.users[i]), int(corp.items[i])
            loc = d.item_locations[v]
            s = R.role_for_query(corp.homes[u], loc, 100.0)
            path = path_of(loc, corp.pyramid)
            cand = R.candidates(loc, 100.0, corp, set(visited[u].tolist()) - {v}) | {v}
            sc = {c: R.score_item(p, u, s, path, c, d.item_words[c]) for c in cand}
            ordered = sorted(cand, key=lambda c: (-sc[c], c != v))
            assert E.rank_of_truth(int(i), p, corp) == ordered.index(v) + 1

    def test_cold_start_zero(self):
        corp = tiny_corpus(3, n_acts=40)
        corp.split = C.split(corp.activities, 0.3, 0)
        # user 0 loses every training record
        u0 = np.flatnonzero(corp.users == 0)
        corp.split.train = np.setdiff1d(corp.split.train, u0)
        corp.split.test_home = np.union1d(corp.split.test_home, u0[corp.roles[u0] == 0])
        corp.split.test_out = np.union1d(corp.split.test_out, u0[corp.roles[u0] == 1])
        cases = np.concatenate([E.held_out_cases(corp, s, 0) for s in E.SCENARIOS])
        assert set(corp.users[cases].tolist()) == {0}

    def test_empty_cold_slice(self):
        corp = hand_corpus()
        p = random_params(corp, K=2)
        with pytest.raises(EmptyTestSet):
            E.evaluate(p, corp, "home", cold_start_max=0)

    def test_repeatable(self):
        corp = tiny_corpus(3, n_acts=60)
        corp.split = C.split(corp.activities, 0.3, 0)
        p = random_params(corp, K=3)
        a = E.evaluate(p, corp, "out").to_lines()
        assert a == E.evaluate(p, corp, "out").to_lines()


class TestBaselines:
    def test_popularity_order(self):
        corp = hand_corpus()
        corp.split = C.SplitDataset(np.array([0, 0, 0, 1]), np.array([2]), np.array([4, 5]), 0)
        sc = E.baseline_score("popularity", 0, [0, 1, 2], corp)
        assert sc[0] > sc[1] > sc[2]

    def test_random_reproducible(self):
        corp = hand_corpus()
        a = E.evaluate_baseline("random", corp, "out", seed=3, keep_ranks=True)
        b = E.evaluate_baseline("random", corp, "out", seed=3, keep_ranks=True)
        assert a.per_case_ranks == b.per_case_ranks

    def test_popularity_direct(self):
        corp = tiny_corpus(9, n_items=15, n_acts=120)
        corp.split = C.split(corp.activities, 0.3, 2)
        counts = np.zeros(15)
        for i in corp.split.train:
            counts[corp.items[i]] += 1
        visited = R.visited_items(corp)
        ranks = []
        for i in corp.split.test_out:
            u, v = int(corp.users[i]), int(corp.items[i])
            cand = R.candidates(corp.dictionaries.item_locations[v], 100.0, corp,
                                set(visited[u].tolist()) - {v})
            ranks.append(1 + sum(counts[c] > counts[v] for c in cand if c != v))
        rep = E.evaluate_baseline("popularity", corp, "out", keep_ranks=True)
        assert rep.per_case_ranks == ranks

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            E.baseline_scorer("oracle", hand_corpus())
