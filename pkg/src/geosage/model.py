"""Natural parameters of the geographical sparse additive model.

Topic choice, word emission and item emission are softmaxes over sums of
natural-parameter blocks::

    alpha[z] ~ exp(theta0[z] + theta_user[u, z] + crowd[z])
    beta[z, w] ~ exp(phi0[w] + phi_topic[z, w])
    gamma[z, v] ~ exp(psi0[v] + psi_topic[z, v])

``crowd`` is the native (local) or tourist preference of the query location,
summed over the location's pyramid path. Per-cell blocks live in dicts keyed by
``CellId``; a missing key is an exact zero vector.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import CorruptModel, VersionMismatch
from .geo import CellId, PyramidConfig

MODEL_MAGIC = b"GEOSAGE-MODEL-1"
VARIANTS = ("full", "s1", "s2", "s3")
NATIVE, TOURIST = "native", "tourist"

_F8 = np.dtype("<f8")
_I8 = np.dtype("<i8")


@dataclass(frozen=True)
class ModelConfig:
    K: int = 50
    H: int = 5
    variant: str = "full"
    l1_weight: float = 0.1
    d_km: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.H < 1:
            raise ValueError("K and H must be >= 1")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_km <= 0:
            raise ValueError("d_km must be positive")


@dataclass
class ModelParams:
    theta0: np.ndarray
    theta_user: np.ndarray
    theta_native: dict[CellId, np.ndarray]
    theta_tourist: dict[CellId, np.ndarray]
    phi0: np.ndarray
    phi_topic: np.ndarray
    psi0: np.ndarray
    psi_topic: np.ndarray
    config: ModelConfig
    pyramid: PyramidConfig
    dict_hash: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def K(self) -> int:
        return self.theta0.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.theta_user.shape[0], self.psi0.shape[0], self.phi0.shape[0]

    def validate(self) -> None:
        K, (U, V, W) = self.K, self.dims
        shapes = {"theta0": (K,), "theta_user": (U, K), "phi0": (W,), "phi_topic": (K, W),
                  "psi0": (V,), "psi_topic": (K, V)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        for kind in (self.theta_native, self.theta_tourist):
            for c, vec in kind.items():
                if not 1 <= c.level <= self.config.H:
                    raise ValueError(f"cell {c} outside levels 1..{self.config.H}")
                if vec.shape != (K,) or not np.all(np.isfinite(vec)):
                    raise ValueError(f"bad parameter vector for {c}")
        if self.config.K != K:
            raise ValueError("config.K disagrees with parameter shapes")

    def cells(self, kind: str) -> dict[CellId, np.ndarray]:
        return self.theta_native if kind == NATIVE else self.theta_tourist

    def invalidate(self) -> None:
        self._cache.clear()

    def log_beta(self) -> np.ndarray:
        """(K, W) matrix of log word probabilities per topic."""
        if "log_beta" not in self._cache:
            self._cache["log_beta"] = log_softmax_rows(self.phi0[None, :] + self.phi_topic)
        return self._cache["log_beta"]

    def log_gamma(self) -> np.ndarray:
        """(K, V) matrix of log item probabilities per topic."""
        if "log_gamma" not in self._cache:
            self._cache["log_gamma"] = log_softmax_rows(self.psi0[None, :] + self.psi_topic)
        return self._cache["log_gamma"]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.theta0.copy(), self.theta_user.copy(),
            {c: v.copy() for c, v in self.theta_native.items()},
            {c: v.copy() for c, v in self.theta_tourist.items()},
            self.phi0.copy(), self.phi_topic.copy(), self.psi0.copy(), self.psi_topic.copy(),
            self.config, self.pyramid, self.dict_hash)

    def nonzero_counts(self) -> dict[str, int]:
        return {
            "theta_user": int(np.count_nonzero(self.theta_user)),
            "theta_native": int(sum(np.count_nonzero(v) for v in self.theta_native.values())),
            "theta_tourist": int(sum(np.count_nonzero(v) for v in self.theta_tourist.values())),
            "phi_topic": int(np.count_nonzero(self.phi_topic)),
            "psi_topic": int(np.count_nonzero(self.psi_topic)),
        }


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax; a matrix with no columns (empty vocabulary) passes through."""
    return log_softmax(x, axis=1) if x.shape[1] else x.copy()


def _centered_log_counts(counts, n) -> np.ndarray:
    c = np.zeros(n) if counts is None else np.asarray(counts, dtype=float)
    x = np.log(c + 1.0)
    return x - x.mean() if n else x


def init_params(config: ModelConfig, pyramid: PyramidConfig, dims: tuple[int, int, int],
                word_counts=None, item_counts=None, dict_hash: str = "") -> ModelParams:
    """Zero deviations; word and item backgrounds from centred log(count + 1)."""
    n_users, n_items, n_words = dims
    K = config.K
    if pyramid.height != config.H:
        pyramid = pyramid.with_height(config.H)
    return ModelParams(
        theta0=np.zeros(K), theta_user=np.zeros((n_users, K)),
        theta_native={}, theta_tourist={},
        phi0=_centered_log_counts(word_counts, n_words), phi_topic=np.zeros((K, n_words)),
        psi0=_centered_log_counts(item_counts, n_items), psi_topic=np.zeros((K, n_items)),
        config=config, pyramid=pyramid, dict_hash=dict_hash)


def layer_weights(variant: str, s: int, depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Weights on the native and tourist cell blocks for path levels 1..depth."""
    nat, tour = np.zeros(depth), np.zeros(depth)
    if variant == "full":
        (tour if s else nat)[:] = 1.0
    elif variant == "s2":
        nat[:] = 1.0
    elif variant == "s3":
        (tour if s else nat)[depth - 1] = 1.0
    return nat, tour


def smooth_preference(params: ModelParams, kind: str, path, upto_level: int | None = None) -> np.ndarray:
    """Sum of a cell block over the first ``upto_level`` cells of ``path``."""
    upto = len(path) if upto_level is None else upto_level
    if not 1 <= upto <= len(path):
        raise ValueError(f"upto_level {upto} outside [1, {len(path)}]")
    table = params.cells(kind)
    out = np.zeros(params.K)
    for c in path[:upto]:
        vec = table.get(c)
        if vec is not None:
            out = out + vec
    return out


def topic_logits(params: ModelParams, user: int | None, s: int, path,
                 upto_level: int | None = None) -> np.ndarray:
    """Unnormalised log topic weights for a (user, role, location) context."""
    if s not in (0, 1):
        raise ValueError(f"role must be 0 or 1, got {s}")
    upto = len(path) if upto_level is None else upto_level
    eta = params.theta0.copy()
    if user is not None:
        eta = eta + params.theta_user[user]
    variant = params.config.variant
    if variant == "full":
        eta = eta + smooth_preference(params, TOURIST if s else NATIVE, path, upto)
    elif variant == "s2":
        eta = eta + smooth_preference(params, NATIVE, path, upto)
    elif variant == "s3":
        leaf = path[upto - 1]
        vec = params.cells(TOURIST if s else NATIVE).get(leaf)
        if vec is not None:
            eta = eta + vec
    return eta


def alpha(params: ModelParams, user: int | None, s: int, path,
          upto_level: int | None = None) -> np.ndarray:
    """Topic distribution for ``user`` in role ``s`` at the location with ``path``.

    ``user=None`` is a cold user (zero personal interest). ``upto_level`` below
    the pyramid height zooms out to a coarser region without touching parameters.
    """
    return softmax(topic_logits(params, user, s, path, upto_level))


def beta(params: ModelParams, z: int) -> np.ndarray:
    if not 0 <= z < params.K:
        raise IndexError(f"topic {z} outside [0, {params.K})")
    return softmax(params.phi0 + params.phi_topic[z])


def gamma(params: ModelParams, z: int) -> np.ndarray:
    if not 0 <= z < params.K:
        raise IndexError(f"topic {z} outside [0, {params.K})")
    return softmax(params.psi0 + params.psi_topic[z])


# -- model file ---------------------------------------------------------------
#
# MAGIC "\n" JSON-header "\n" raw little-endian blocks in header order.

def _nonzero_rows(a: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(a, dtype=_F8).view(_I8)
    return np.flatnonzero(np.any(bits != 0, axis=1))


def _cell_block(table: dict[CellId, np.ndarray], K: int):
    keys = sorted(table)
    k = np.array([[c.level, c.x, c.y] for c in keys], dtype=_I8).reshape(-1, 3)
    v = np.array([table[c] for c in keys], dtype=_F8).reshape(-1, K)
    return k, v


def dumps(params: ModelParams) -> bytes:
    K = params.K
    rows = _nonzero_rows(params.theta_user)
    nk, nv = _cell_block(params.theta_native, K)
    tk, tv = _cell_block(params.theta_tourist, K)
    blocks = [
        ("theta0", params.theta0), ("theta_user_rows", rows.astype(_I8)),
        ("theta_user_values", params.theta_user[rows]),
        ("theta_native_keys", nk), ("theta_native_values", nv),
        ("theta_tourist_keys", tk), ("theta_tourist_values", tv),
        ("phi0", params.phi0), ("phi_topic", params.phi_topic),
        ("psi0", params.psi0), ("psi_topic", params.psi_topic),
    ]
    header = {
        "config": asdict(params.config), "pyramid": params.pyramid.to_dict(),
        "dims": list(params.dims), "dict_hash": params.dict_hash,
        "blocks": [{"name": n, "dtype": "i8" if a.dtype.kind == "i" else "f8",
                    "shape": list(a.shape)} for n, a in blocks],
    }
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC + b"\n")
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
    for _, a in blocks:
        dt = _I8 if a.dtype.kind == "i" else _F8
        buf.write(np.ascontiguousarray(a, dtype=dt).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> ModelParams:
    magic, sep, rest = data.partition(b"\n")
    if magic != MODEL_MAGIC:
        raise VersionMismatch(f"not a {MODEL_MAGIC.decode()} file (magic {magic[:32]!r})")
    head, sep, payload = rest.partition(b"\n")
    try:
        header = json.loads(head)
        config = ModelConfig(**header["config"])
        pyramid = PyramidConfig.from_dict(header["pyramid"])
        U, V, W = header["dims"]
        arrays, off = {}, 0
        for b in header["blocks"]:
            dt = _I8 if b["dtype"] == "i8" else _F8
            shape = tuple(b["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + n > len(payload):
                raise CorruptModel("model file truncated")
            arrays[b["name"]] = np.frombuffer(payload, dt, int(np.prod(shape, dtype=np.int64)),
                                              off).reshape(shape).copy()
            off += n
        if off != len(payload):
            raise CorruptModel("trailing bytes after model payload")
        K = config.K
        theta_user = np.zeros((U, K))
        theta_user[arrays["theta_user_rows"]] = arrays["theta_user_values"]

        def cells(prefix):
            keys, vals = arrays[prefix + "_keys"], arrays[prefix + "_values"]
            return {CellId(*map(int, k)): vals[i].copy() for i, k in enumerate(keys)}

        params = ModelParams(arrays["theta0"], theta_user, cells("theta_native"),
                             cells("theta_tourist"), arrays["phi0"], arrays["phi_topic"],
                             arrays["psi0"], arrays["psi_topic"], config, pyramid,
                             header["dict_hash"])
        params.validate()
    except CorruptModel:
        raise
    except (KeyError, ValueError, TypeError, IndexError) as e:
        raise CorruptModel(f"unreadable model file: {e}") from e
    return params


def save(params: ModelParams, sink) -> None:
    data = dumps(params)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        Path(sink).write_bytes(data)


def load(source) -> ModelParams:
    if hasattr(source, "read"):
        return loads(source.read())
    return loads(Path(source).read_bytes())


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bit-exact equality including config, dims and which cell blocks are present."""
    def same(x, y):
        return x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes()

    if (a.config, a.pyramid, a.dict_hash) != (b.config, b.pyramid, b.dict_hash):
        return False
    for name in ("theta0", "theta_user", "phi0", "phi_topic", "psi0", "psi_topic"):
        if not same(getattr(a, name), getattr(b, name)):
            return False
    for ta, tb in ((a.theta_native, b.theta_native), (a.theta_tourist, b.theta_tourist)):
        if ta.keys() != tb.keys() or not all(same(ta[c], tb[c]) for c in ta):
            return False
    return True
