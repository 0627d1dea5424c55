"""Check-in ingestion: parsing, dictionaries, home inference, role labels, splits.

Input lines are ``user<TAB>venue<TAB>lat,lon<TAB>word,word,...<TAB>role`` where
role is ``0`` (local), ``1`` (tourist) or ``-`` (unknown, derived later).
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptCorpus, InvalidCoordinate, MalformedInput, NoData, VersionMismatch
from .geo import CellId, GeoPoint, PyramidConfig, cell_of, centroid, haversine_km

log = logging.getLogger(__name__)

CORPUS_MAGIC = "GEOSAGE-CORPUS-1"
DEFAULT_D_KM = 100.0
DEFAULT_SPLIT_FRACTION = 0.30
MAX_MALFORMED_FRACTION = 0.01
LOCAL, TOURIST = 0, 1

_UNKNOWN_ROLES = {"-", "−", ""}


@dataclass(frozen=True)
class MalformedRecord:
    line: int
    reason: str


@dataclass(frozen=True)
class RawCheckin:
    line: int
    user: str
    item: str
    location: GeoPoint
    words: tuple[str, ...]
    role: int | None


@dataclass
class ParseResult:
    records: list[RawCheckin]
    malformed: list[MalformedRecord]
    n_lines: int


def _parse_location(text: str) -> GeoPoint:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError("location not lat,lon")
    try:
        lat, lon = float(parts[0]), float(parts[1])
    except ValueError:
        raise ValueError("location not lat,lon") from None
    try:
        return GeoPoint(lat, lon)
    except InvalidCoordinate as e:
        raise ValueError(str(e)) from None


def _parse_line(lineno: int, line: str) -> RawCheckin:
    fields = line.split("\t")
    if len(fields) != 5:
        raise ValueError(f"expected 5 tab-separated fields, got {len(fields)}")
    user, item, loc, words, role = (f.strip() for f in fields)
    if not user or not item:
        raise ValueError("empty user or venue id")
    location = _parse_location(loc)
    if role in _UNKNOWN_ROLES:
        s = None
    elif role in ("0", "1"):
        s = int(role)
    else:
        raise ValueError(f"role {role!r} not in {{0, 1, -}}")
    toks = tuple(w.strip().lower() for w in words.split(",") if w.strip())
    return RawCheckin(lineno, user, item, location, toks, s)


def parse_checkins(stream: Iterable[str],
                   max_malformed_fraction: float = MAX_MALFORMED_FRACTION) -> ParseResult:
    """Parse check-in lines, collecting malformed ones.

    Blank lines are ignored. Raises ``MalformedInput`` when more than
    ``max_malformed_fraction`` of the non-blank lines are malformed; otherwise
    the bad lines are skipped and listed in ``ParseResult.malformed``.
    """
    records, bad = [], []
    n = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        n += 1
        try:
            records.append(_parse_line(lineno, line))
        except ValueError as e:
            bad.append(MalformedRecord(lineno, str(e)))
    if bad and len(bad) > max_malformed_fraction * n:
        raise MalformedInput(bad, n)
    for m in bad:
        log.warning("skipping malformed line %d: %s", m.line, m.reason)
    return ParseResult(records, bad, n)


def parse_homes(stream: Iterable[str]) -> dict[str, GeoPoint]:
    homes, bad = {}, []
    n = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        n += 1
        fields = line.split("\t")
        try:
            if len(fields) != 2 or not fields[0].strip():
                raise ValueError("expected user-id<TAB>lat,lon")
            homes[fields[0].strip()] = _parse_location(fields[1].strip())
        except ValueError as e:
            bad.append(MalformedRecord(lineno, str(e)))
    if bad and len(bad) > MAX_MALFORMED_FRACTION * n:
        raise MalformedInput(bad, n)
    return homes


class Lexicon:
    """Bijection between external string ids and dense integer ids."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        i = self._index.get(name)
        if i is None:
            i = self._index[name] = len(self._names)
            self._names.append(name)
        return i

    def id(self, name: str) -> int:
        return self._index[name]

    def get(self, name: str, default=None):
        return self._index.get(name, default)

    def name(self, i: int) -> str:
        return self._names[i]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, Lexicon) and self._names == other._names


@dataclass
class Dictionaries:
    users: Lexicon
    items: Lexicon
    vocab: Lexicon
    item_locations: list[GeoPoint]
    item_words: list[tuple[int, ...]]
    _digest: str | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (len(self.item_locations) == len(self.item_words) == len(self.items)):
            raise ValueError("item attributes must cover every item id")

    @property
    def dims(self) -> tuple[int, int, int]:
        return len(self.users), len(self.items), len(self.vocab)

    def digest(self) -> str:
        """Content hash tying a model file to the dictionaries it was trained on."""
        if self._digest is None:
            payload = json.dumps({
                "users": self.users.names,
                "items": self.items.names,
                "vocab": self.vocab.names,
                "locations": [[p.lat, p.lon] for p in self.item_locations],
                "words": [list(w) for w in self.item_words],
            }, separators=(",", ":"), ensure_ascii=False)
            self._digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
        return self._digest

    def item_lat_lon(self) -> tuple[np.ndarray, np.ndarray]:
        lats = np.array([p.lat for p in self.item_locations], dtype=float)
        lons = np.array([p.lon for p in self.item_locations], dtype=float)
        return lats, lons


@dataclass(frozen=True)
class UserActivity:
    user: int
    item: int
    location: GeoPoint
    words: tuple[int, ...]
    role: int | None = None

    def __post_init__(self):
        if self.role not in (None, LOCAL, TOURIST):
            raise ValueError(f"role must be 0 or 1, got {self.role}")


@dataclass
class UserProfile:
    user: int
    activities: list[UserActivity]
    home: GeoPoint | None = None
    mismatches: int = field(default=0, compare=False)

    def __post_init__(self):
        if any(a.user != self.user for a in self.activities):
            raise ValueError("profile holds another user's activity")


@dataclass
class SplitDataset:
    """Index arrays into ``Corpus.activities``."""

    train: np.ndarray
    test_home: np.ndarray
    test_out: np.ndarray
    seed: int
    fraction: float = DEFAULT_SPLIT_FRACTION


@dataclass
class IngestReport:
    n_lines: int = 0
    malformed: int = 0
    dropped_outside_bbox: int = 0
    location_conflicts: int = 0
    role_mismatches: int = 0
    inferred_homes: int = 0


@dataclass
class Corpus:
    dictionaries: Dictionaries
    activities: list[UserActivity]
    homes: list[GeoPoint]
    pyramid: PyramidConfig
    d_km: float = DEFAULT_D_KM
    split: SplitDataset | None = None

    def __post_init__(self):
        if len(self.homes) != len(self.dictionaries.users):
            raise ValueError("need exactly one home per user")
        self._arrays = None

    def _build_arrays(self):
        if self._arrays is None:
            acts = self.activities
            self._arrays = (
                np.fromiter((a.user for a in acts), np.int64, len(acts)),
                np.fromiter((a.item for a in acts), np.int64, len(acts)),
                np.fromiter((a.role for a in acts), np.int64, len(acts)),
            )
        return self._arrays

    @property
    def users(self) -> np.ndarray:
        return self._build_arrays()[0]

    @property
    def items(self) -> np.ndarray:
        return self._build_arrays()[1]

    @property
    def roles(self) -> np.ndarray:
        return self._build_arrays()[2]

    def train_indices(self) -> np.ndarray:
        if self.split is None:
            return np.arange(len(self.activities))
        return self.split.train

    def digest(self) -> str:
        return self.dictionaries.digest()


def infer_home(activities: Sequence[UserActivity], cfg: PyramidConfig,
               explicit_home: GeoPoint | None = None) -> GeoPoint:
    """Home location: the explicit one if known, else the busiest leaf cell's centroid.

    Ties between equally busy cells go to the smallest ``(x, y)``.
    """
    if explicit_home is not None:
        return explicit_home
    if not activities:
        raise NoData("no activities and no explicit home")
    counts = Counter()
    for a in activities:
        c = cell_of(a.location, cfg.height, cfg)
        counts[(c.x, c.y)] += 1
    best = max(counts.values())
    x, y = min(xy for xy, n in counts.items() if n == best)
    return centroid(CellId(cfg.height, x, y), cfg)


def role_for_distance(home: GeoPoint, location: GeoPoint, d_km: float) -> int:
    return TOURIST if haversine_km(home, location) > d_km else LOCAL


def label_roles(profile: UserProfile, d_km: float = DEFAULT_D_KM) -> UserProfile:
    """Set each activity's role from its distance to home (strictly beyond d_km is tourist).

    Roles already present in the input are checked; on disagreement the
    derived role wins and a warning is logged.
    """
    if profile.home is None:
        raise NoData(f"user {profile.user} has no home location")
    if d_km <= 0:
        raise ValueError("d_km must be positive")
    out = []
    mismatches = 0
    for a in profile.activities:
        s = role_for_distance(profile.home, a.location, d_km)
        if a.role is not None and a.role != s:
            mismatches += 1
        out.append(a if a.role == s else replace(a, role=s))
    if mismatches:
        log.warning("user %d: %d pre-labelled roles disagree with the distance rule",
                    profile.user, mismatches)
    return UserProfile(profile.user, out, profile.home, mismatches)


def build_corpus(records: Iterable[RawCheckin], pyramid: PyramidConfig,
                 homes: dict[str, GeoPoint] | None = None,
                 d_km: float = DEFAULT_D_KM) -> tuple[Corpus, IngestReport]:
    """Turn parsed records into a labelled corpus (no split yet)."""
    homes = homes or {}
    report = IngestReport()
    users, items, vocab = Lexicon(), Lexicon(), Lexicon()
    item_locations: list[GeoPoint] = []
    item_words: list[tuple[int, ...]] = []
    raw_acts: list[tuple[int, int, int | None]] = []
    for r in records:
        if not pyramid.bbox.contains(r.location):
            report.dropped_outside_bbox += 1
            continue
        u = users.add(r.user)
        n_items = len(items)
        v = items.add(r.item)
        if v == n_items:
            item_locations.append(r.location)
            item_words.append(tuple(vocab.add(w) for w in r.words))
        elif item_locations[v] != r.location:
            report.location_conflicts += 1
        raw_acts.append((u, v, r.role))
    if report.dropped_outside_bbox:
        log.warning("dropped %d check-ins outside the bounding box", report.dropped_outside_bbox)
    if report.location_conflicts:
        log.warning("%d check-ins disagree with their venue's first location",
                    report.location_conflicts)

    dicts = Dictionaries(users, items, vocab, item_locations, item_words)
    by_user: dict[int, list[tuple[int, UserActivity]]] = defaultdict(list)
    for idx, (u, v, s) in enumerate(raw_acts):
        by_user[u].append((idx, UserActivity(u, v, item_locations[v], item_words[v], s)))

    activities: list[UserActivity | None] = [None] * len(raw_acts)
    home_list: list[GeoPoint] = []
    for u in range(len(users)):
        idxs = [i for i, _ in by_user[u]]
        acts = [a for _, a in by_user[u]]
        explicit = homes.get(users.name(u))
        if explicit is None:
            report.inferred_homes += 1
        home = infer_home(acts, pyramid, explicit)
        prof = label_roles(UserProfile(u, acts, home), d_km)
        report.role_mismatches += prof.mismatches
        for i, a in zip(idxs, prof.activities):
            activities[i] = a
        home_list.append(home)
    return Corpus(dicts, activities, home_list, pyramid, d_km), report


def split(activities: Sequence[UserActivity], fraction: float = DEFAULT_SPLIT_FRACTION,
          seed: int = 0) -> SplitDataset:
    """Per-user random hold-out of floor(fraction * n) home and out-of-town records each."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, a in enumerate(activities):
        if a.role is None:
            raise ValueError(f"activity {i} has no role; label roles before splitting")
        groups[(a.user, a.role)].append(i)
    rng = np.random.default_rng(seed)
    is_test = np.zeros(len(activities), dtype=bool)
    test = {LOCAL: [], TOURIST: []}
    for (u, s) in sorted(groups):
        idx = np.asarray(groups[(u, s)], dtype=np.int64)
        m = math.floor(fraction * len(idx) + 1e-9)
        if m == 0:
            continue
        chosen = np.sort(idx[rng.permutation(len(idx))[:m]])
        test[s].append(chosen)
        is_test[chosen] = True

    def cat(parts):
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)

    return SplitDataset(np.flatnonzero(~is_test).astype(np.int64), cat(test[LOCAL]),
                        cat(test[TOURIST]), seed, fraction)


# -- bundle (line-delimited JSON) ---------------------------------------------

def dump_corpus(corpus: Corpus) -> str:
    d = corpus.dictionaries
    out = io.StringIO()

    def emit(obj):
        out.write(json.dumps(obj, separators=(",", ":"), ensure_ascii=False))
        out.write("\n")

    out.write(CORPUS_MAGIC + "\n")
    header = {"pyramid": corpus.pyramid.to_dict(), "d_km": corpus.d_km,
              "dims": list(d.dims), "n_activities": len(corpus.activities),
              "digest": d.digest()}
    if corpus.split is not None:
        header["split"] = {"seed": corpus.split.seed, "fraction": corpus.split.fraction}
    emit(header)
    for u, name in enumerate(d.users.names):
        h = corpus.homes[u]
        emit({"user": name, "home": [h.lat, h.lon]})
    for v, name in enumerate(d.items.names):
        p = d.item_locations[v]
        emit({"item": name, "loc": [p.lat, p.lon], "words": list(d.item_words[v])})
    for w in d.vocab.names:
        emit({"word": w})
    membership = np.zeros(len(corpus.activities), dtype=np.int64)
    if corpus.split is not None:
        membership[corpus.split.test_home] = 1
        membership[corpus.split.test_out] = 2
    for a, m in zip(corpus.activities, membership):
        emit({"a": [a.user, a.item, a.role, int(m)]})
    return out.getvalue()


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(dump_corpus(corpus), encoding="utf-8")


def load_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as f:
        return read_corpus(f)


def read_corpus(f) -> Corpus:
    magic = f.readline().rstrip("\n")
    if magic != CORPUS_MAGIC:
        raise VersionMismatch(f"not a {CORPUS_MAGIC} bundle (magic {magic[:32]!r})")
    try:
        header = json.loads(f.readline())
        n_users, n_items, n_words = header["dims"]
        pyramid = PyramidConfig.from_dict(header["pyramid"])
        rows = [json.loads(next(f)) for _ in range(n_users + n_items + n_words)]
        user_rows = rows[:n_users]
        item_rows = rows[n_users:n_users + n_items]
        word_rows = rows[n_users + n_items:]
        users = Lexicon(r["user"] for r in user_rows)
        homes = [GeoPoint(*r["home"]) for r in user_rows]
        items = Lexicon(r["item"] for r in item_rows)
        locs = [GeoPoint(*r["loc"]) for r in item_rows]
        words = [tuple(r["words"]) for r in item_rows]
        vocab = Lexicon(r["word"] for r in word_rows)
        dicts = Dictionaries(users, items, vocab, locs, words)
        acts, member = [], []
        for line in f:
            if not line.strip():
                continue
            u, v, s, m = json.loads(line)["a"]
            acts.append(UserActivity(u, v, locs[v], words[v], s))
            member.append(m)
    except (KeyError, ValueError, TypeError, StopIteration, IndexError) as e:
        raise CorruptCorpus(f"unreadable corpus bundle: {e}") from e
    if len(acts) != header["n_activities"] or len(users) != n_users:
        raise CorruptCorpus("activity or dictionary count disagrees with header")
    if dicts.digest() != header["digest"]:
        raise CorruptCorpus("dictionary digest mismatch")
    corpus = Corpus(dicts, acts, homes, pyramid, float(header["d_km"]))
    if "split" in header:
        member = np.asarray(member, dtype=np.int64)
        corpus.split = SplitDataset(np.flatnonzero(member == 0), np.flatnonzero(member == 1),
                                    np.flatnonzero(member == 2), int(header["split"]["seed"]),
                                    float(header["split"]["fraction"]))
    return corpus
