"""Recall@k harness for home-town and out-of-town hold-out sets.

For each held-out activity (u, v) the candidate list is v plus every item
within the radius of v's location that u did not visit in training. The
rank of v counts candidates scoring strictly higher, plus one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus
from .errors import EmptyTestSet
from .model import ModelParams
from .recsys import DEFAULT_RADIUS_KM, Recommender, SpatialIndex, visited_items

DEFAULT_KS = (2, 6, 10, 14, 18)
SCENARIOS = ("home", "out")
BASELINES = ("random", "popularity")


@dataclass
class EvalReport:
    scenario: str
    recall_at: dict[int, float]
    n_cases: int
    per_case_ranks: list[int] | None = None
    slice: str | None = None
    method: str = "geosage"

    def records(self) -> list[dict]:
        return [{"method": self.method, "scenario": self.scenario, "slice": self.slice or "all",
                 "k": k, "recall": r, "n_cases": self.n_cases}
                for k, r in sorted(self.recall_at.items())]

    def to_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


def recall_at_k(ranks: Sequence[int], ks: Sequence[int] = DEFAULT_KS, scenario: str = "",
                keep_ranks: bool = False, **kw) -> EvalReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise EmptyTestSet("no test cases")
    if np.any(ranks < 1):
        raise ValueError("ranks start at 1")
    recall = {int(k): float(np.count_nonzero(ranks <= k)) / ranks.size for k in ks}
    return EvalReport(scenario, recall, int(ranks.size),
                      ranks.tolist() if keep_ranks else None, **kw)


def rank_from_scores(truth_score: float, other_scores) -> int:
    return 1 + int(np.count_nonzero(np.asarray(other_scores) > truth_score))


def held_out_cases(corpus: Corpus, scenario: str, cold_start_max: int | None = None) -> np.ndarray:
    """Activity indices of a scenario's hold-out set, optionally restricted to sparse users."""
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    if corpus.split is None:
        raise EmptyTestSet("corpus has no train/test split")
    cases = corpus.split.test_home if scenario == "home" else corpus.split.test_out
    if cold_start_max is not None:
        n_train = np.bincount(corpus.users[corpus.split.train],
                              minlength=len(corpus.dictionaries.users))
        cases = cases[n_train[corpus.users[cases]] <= cold_start_max]
    return cases


Scorer = Callable[[int, int, int, np.ndarray], np.ndarray]


def rank_cases(corpus: Corpus, cases: np.ndarray, scorer: Scorer, radius_km: float,
               index: SpatialIndex | None = None) -> list[int]:
    """Rank of each case's truth item. ``scorer(case_no, user, truth, candidates)``."""
    index = index or SpatialIndex.for_corpus(corpus)
    visited = visited_items(corpus)
    locs = corpus.dictionaries.item_locations
    ranks = []
    for n, i in enumerate(cases):
        u, v = int(corpus.users[i]), int(corpus.items[i])
        near = index.within(locs[v], radius_km)
        near = near[~np.isin(near, visited[u]) & (near != v)]
        cands = np.concatenate([[v], near]).astype(np.int64)
        sc = scorer(n, u, v, cands)
        ranks.append(rank_from_scores(sc[0], sc[1:]))
    return ranks


def model_scorer(rec: Recommender, corpus: Corpus, zoom_level: int | None = None) -> Scorer:
    locs = corpus.dictionaries.item_locations

    def score(n, u, v, cands):
        loc = locs[v]
        s = rec.role(u, loc)
        return rec.scores(rec.alpha(u, s, loc, zoom_level), cands)

    return score


def rank_of_truth(activity_index: int, params: ModelParams, corpus: Corpus,
                  radius_km: float = DEFAULT_RADIUS_KM, rec: Recommender | None = None) -> int:
    rec = rec or Recommender(params, corpus)
    return rank_cases(corpus, np.array([activity_index]), model_scorer(rec, corpus),
                      radius_km, rec.index)[0]


def _slice_name(cold_start_max):
    return None if cold_start_max is None else f"train<={cold_start_max}"


def evaluate(params: ModelParams, corpus: Corpus, scenario: str, ks: Sequence[int] = DEFAULT_KS,
             cold_start_max: int | None = None, radius_km: float | None = None,
             keep_ranks: bool = False, zoom_level: int | None = None) -> EvalReport:
    """Recall@k of the model over one scenario's hold-out set."""
    rec = Recommender(params, corpus)
    radius = params.config.d_km if radius_km is None else radius_km
    cases = held_out_cases(corpus, scenario, cold_start_max)
    ranks = rank_cases(corpus, cases, model_scorer(rec, corpus, zoom_level), radius, rec.index)
    return recall_at_k(ranks, ks, scenario, keep_ranks,
                       slice=_slice_name(cold_start_max), method=params.config.variant)


def baseline_scorer(kind: str, corpus: Corpus, seed: int = 0) -> Scorer:
    """Seeded uniform scores, or training visit counts."""
    if kind == "popularity":
        counts = np.bincount(corpus.items[corpus.train_indices()],
                             minlength=len(corpus.dictionaries.items)).astype(float)
        return lambda n, u, v, cands: counts[cands]
    if kind == "random":
        return lambda n, u, v, cands: np.random.default_rng([seed, n]).random(len(cands))
    raise ValueError(f"baseline must be one of {BASELINES}")


def baseline_score(kind: str, case_no: int, candidates, corpus: Corpus, seed: int = 0) -> np.ndarray:
    return baseline_scorer(kind, corpus, seed)(case_no, -1, -1, np.asarray(candidates))


def evaluate_baseline(kind: str, corpus: Corpus, scenario: str, ks: Sequence[int] = DEFAULT_KS,
                      cold_start_max: int | None = None, radius_km: float = DEFAULT_RADIUS_KM,
                      seed: int = 0, keep_ranks: bool = False) -> EvalReport:
    cases = held_out_cases(corpus, scenario, cold_start_max)
    ranks = rank_cases(corpus, cases, baseline_scorer(kind, corpus, seed), radius_km)
    return recall_at_k(ranks, ks, scenario, keep_ranks,
                       slice=_slice_name(cold_start_max), method=kind)
