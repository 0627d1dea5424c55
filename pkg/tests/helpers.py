"""Small random instances shared by the test modules."""

import math
from collections import defaultdict

import numpy as np

from geosage import corpus as C
from geosage import inference as I
from geosage.geo import BoundingBox, GeoPoint, PyramidConfig, cells_at_level
from geosage.model import ModelConfig, alpha, beta, gamma, init_params

# ~445 km square: with d = 100 km a random user has both local and distant items
TINY_BBOX = BoundingBox.from_bounds(0.0, 0.0, 4.0, 4.0)


def tiny_corpus(seed=0, n_users=5, n_items=10, n_words=8, n_acts=40, H=2, max_words=3,
                bbox=TINY_BBOX, d_km=100.0):
    """Random labelled corpus built through the public ingestion path."""
    rng = np.random.default_rng(seed)
    lats = rng.uniform(bbox.min.lat, bbox.max.lat, n_items)
    lons = rng.uniform(bbox.min.lon, bbox.max.lon, n_items)
    words = [tuple(f"w{w}" for w in rng.integers(n_words, size=rng.integers(0, max_words + 1)))
             for _ in range(n_items)]
    # make sure every word id exists in the vocabulary
    words[0] = tuple(f"w{w}" for w in range(n_words))
    records = []
    for i in range(n_acts):
        u = i % n_users if i < n_users else int(rng.integers(n_users))
        v = i % n_items if i < n_items else int(rng.integers(n_items))
        records.append(C.RawCheckin(i + 1, f"u{u}", f"v{v}", GeoPoint(lats[v], lons[v]),
                                    words[v], None))
    homes = {f"u{u}": GeoPoint(rng.uniform(bbox.min.lat, bbox.max.lat),
                               rng.uniform(bbox.min.lon, bbox.max.lon)) for u in range(n_users)}
    corp, _ = C.build_corpus(records, PyramidConfig(bbox, H), homes, d_km)
    return corp


def random_params(corp, K=3, variant="full", seed=0, scale=0.7, l1_weight=0.0, density=1.0):
    """Parameters with random entries in every block, cells at all levels included."""
    rng = np.random.default_rng([seed, 99])
    H = corp.pyramid.height
    cfg = ModelConfig(K=K, H=H, variant=variant, l1_weight=l1_weight, d_km=corp.d_km, seed=seed)
    p = init_params(cfg, corp.pyramid, corp.dictionaries.dims, dict_hash=corp.digest())

    def draw(shape):
        x = rng.normal(0.0, scale, shape)
        return x * (rng.random(shape) < density)

    p.theta0 = draw(K)
    p.theta_user = draw(p.theta_user.shape)
    p.phi0 = rng.normal(0.0, scale, p.phi0.shape)
    p.phi_topic = draw(p.phi_topic.shape)
    p.psi0 = rng.normal(0.0, scale, p.psi0.shape)
    p.psi_topic = draw(p.psi_topic.shape)
    for h in range(1, H + 1):
        for c in cells_at_level(h):
            p.theta_native[c] = draw(K)
            p.theta_tourist[c] = draw(K)
    p.invalidate()
    return p


def tiny_stats(corp, params, seed=0):
    """Training data plus stats from uniformly random topic assignments."""
    data = I.TrainingData.from_corpus(corp, params.config)
    z = np.random.default_rng([seed, 7]).integers(params.K, size=data.n_activities)
    return data, I.collect_stats(z, data, params.K)


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# -- independent oracles ------------------------------------------------------

def activity_paths(data):
    return [data.item_paths(int(v)) for v in data.act_item]


def naive_stats(data, z, K):
    """Count tables by walking activities one at a time."""
    U, V, W = data.n_users, data.n_items, data.n_words
    out = {"d_z": np.zeros(K), "d_uz": np.zeros((U, K)), "d_zw": np.zeros((K, W)),
           "d_w": np.zeros(W), "d_zv": np.zeros((K, V)), "d_v": np.zeros(V),
           "native": defaultdict(lambda: np.zeros(K)), "tourist": defaultdict(lambda: np.zeros(K))}
    words = [data.item_words[v].indices.repeat(data.item_words[v].data.astype(int))
             for v in range(V)]
    for i, path in enumerate(activity_paths(data)):
        u, v, s, t = data.act_user[i], data.act_item[i], data.act_role[i], z[i]
        out["d_z"][t] += 1
        out["d_uz"][u, t] += 1
        out["d_zv"][t, v] += 1
        out["d_v"][v] += 1
        for w in words[v]:
            out["d_zw"][t, w] += 1
            out["d_w"][w] += 1
        for c in path:
            out["tourist" if s else "native"][c][t] += 1
    return out


def naive_loglik(params, data, z):
    """Complete-data log-likelihood summed activity by activity in probability space."""
    total = 0.0
    for i, path in enumerate(activity_paths(data)):
        u, v, s, t = int(data.act_user[i]), int(data.act_item[i]), int(data.act_role[i]), int(z[i])
        total += math.log(alpha(params, u, s, path)[t])
        row = data.item_words[v]
        for w, n in zip(row.indices, row.data):
            total += n * math.log(beta(params, t)[w])
        total += math.log(gamma(params, t)[v])
    return total


def enumerated_posterior(params, user, s, path, item, words):
    K = params.K
    unnorm = np.array([alpha(params, user, s, path)[z]
                       * np.prod([beta(params, z)[w] for w in words])
                       * gamma(params, z)[item] for z in range(K)])
    return unnorm / unnorm.sum()


def _entries(params, data):
    """(block, key, index) for every scalar parameter the training data touches."""
    K = params.K
    for name in ("theta0", "theta_user", "phi0", "phi_topic", "psi0", "psi_topic"):
        for idx in np.ndindex(getattr(params, name).shape):
            yield name, None, idx
    for kind, table in (("theta_native", params.theta_native),
                        ("theta_tourist", params.theta_tourist)):
        for c in data.cells:
            table.setdefault(c, np.zeros(K))
            for z in range(K):
                yield kind, c, (z,)


def finite_difference_gradients(params, stats, step=1e-5):
    """Central differences of ``naive_loglik``, shaped like ``gradients``."""
    p = params.copy()
    data = stats.data
    out = {name: np.zeros_like(getattr(p, name))
           for name in ("theta0", "theta_user", "phi0", "phi_topic", "psi0", "psi_topic")}
    out["theta_native"], out["theta_tourist"] = {}, {}
    for name, cell, idx in list(_entries(p, data)):
        arr = getattr(p, name)[cell] if cell is not None else getattr(p, name)
        x0 = arr[idx]
        vals = []
        for sign in (1, -1):
            arr[idx] = x0 + sign * step
            p.invalidate()
            vals.append(naive_loglik(p, data, stats.z))
        arr[idx] = x0
        g = (vals[0] - vals[1]) / (2 * step)
        if cell is None:
            out[name][idx] = g
        else:
            out[name].setdefault(cell, np.zeros(p.K))[idx] = g
    p.invalidate()
    return out


def block_relative_errors(analytic, numeric):
    """max |a - n| / max |n| per block (cell blocks stacked in key order)."""
    errs = {}
    for name, n in numeric.items():
        a = analytic[name]
        if isinstance(n, dict):
            keys = sorted(n)
            n = np.array([n[k] for k in keys])
            a = np.array([a[k] for k in keys])
        scale = max(float(np.abs(n).max()), 1e-12)
        errs[name] = float(np.abs(a - n).max()) / scale
    return errs
