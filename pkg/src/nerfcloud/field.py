"""Radiance field: hash-grid encoding followed by small density and color MLPs.

Gradients are written out by hand. ``forward`` returns a cache that
``backward`` consumes to produce exact parameter gradients and, on request,
gradients with respect to the query positions and directions.

Positions live in the scene cube ``[-bound, bound]^3`` and are mapped to the
unit cube before encoding. Directions are per ray: ``x`` may be ``(R, S, 3)``
with ``d`` of shape ``(R, 3)``, or both ``(N, 3)``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _hashgrid

CHECKPOINT_MAGIC = b"NRFCKPT1"
PARAM_ORDER = (
    "grid",
    "d_w1", "d_b1", "d_w2", "d_b2",
    "c_w1", "c_b1", "c_w2", "c_b2", "c_w3", "c_b3",
)


class FieldError(ValueError):
    pass


@dataclass
class HashGridConfig:
    levels: int = 8
    table_size: int = 2**14
    features_per_level: int = 2
    base_resolution: int = 16
    per_level_scale: float = 1.5

    def __post_init__(self):
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise FieldError(f"table_size must be a power of two, got {t}")
        if self.levels < 1 or self.features_per_level < 1:
            raise FieldError("levels and features_per_level must be >= 1")
        if not self.per_level_scale > 1:
            raise FieldError(f"per_level_scale must exceed 1, got {self.per_level_scale}")

    @property
    def resolutions(self) -> np.ndarray:
        return np.array(
            [int(np.floor(self.base_resolution * self.per_level_scale**lvl)) for lvl in range(self.levels)],
            dtype=np.int64,
        )

    @property
    def n_output(self) -> int:
        return self.levels * self.features_per_level


@dataclass
class FieldConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    density_hidden: int = 64
    geo_features: int = 15
    color_hidden: int = 64
    dir_frequencies: int = 4
    bound: float = 4.0

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_frequencies

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["grid"] = HashGridConfig(**d.get("grid", {}))
        return cls(**d)


@dataclass
class FieldSample:
    density: np.ndarray
    color: np.ndarray


class Diagnostics:
    """Counts of inputs silently repaired during evaluation."""

    def __init__(self):
        self.clamped_positions = 0
        self.renormalized_directions = 0


def hash_encode(u: np.ndarray, cfg: HashGridConfig, table: np.ndarray) -> np.ndarray:
    """Encode unit-cube points ``u`` (N, 3) with grid ``table`` (L, T, F)."""
    u = np.ascontiguousarray(np.clip(u, 0.0, 1.0), dtype=table.dtype)
    res = cfg.resolutions
    return _hashgrid.encode_forward(u, table, res, res.astype(table.dtype), np.uint64(cfg.table_size - 1))


def encode_directions(d: np.ndarray, n_freq: int) -> np.ndarray:
    parts = [d]
    for k in range(n_freq):
        parts.append(np.sin((2.0**k * np.pi) * d))
        parts.append(np.cos((2.0**k * np.pi) * d))
    return np.concatenate(parts, axis=-1)


def _encode_directions_backward(d: np.ndarray, g: np.ndarray, n_freq: int) -> np.ndarray:
    out = g[:, :3].copy()
    for k in range(n_freq):
        w = 2.0**k * np.pi
        gs = g[:, 3 + 6 * k: 6 + 6 * k]
        gc = g[:, 6 + 6 * k: 9 + 6 * k]
        out += w * (gs * np.cos(w * d) - gc * np.sin(w * d))
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class RadianceField:
    def __init__(self, config: FieldConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or FieldConfig()
        self.dtype = np.dtype(dtype)
        self.diagnostics = Diagnostics()
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        c = self.config
        g = c.grid

        def dense(n_in, n_out):
            lim = np.sqrt(6.0 / n_in)
            return rng.uniform(-lim, lim, (n_in, n_out)), np.zeros(n_out)

        p = {"grid": rng.uniform(-1e-4, 1e-4, (g.levels, g.table_size, g.features_per_level))}
        p["d_w1"], p["d_b1"] = dense(g.n_output, c.density_hidden)
        p["d_w2"], p["d_b2"] = dense(c.density_hidden, 1 + c.geo_features)
        p["c_w1"], p["c_b1"] = dense(c.geo_features + c.dir_dim, c.color_hidden)
        p["c_w2"], p["c_b2"] = dense(c.color_hidden, c.color_hidden)
        p["c_w3"], p["c_b3"] = dense(c.color_hidden, 3)
        return {k: np.ascontiguousarray(p[k], dtype=self.dtype) for k in PARAM_ORDER}

    def astype(self, dtype) -> "RadianceField":
        out = RadianceField.__new__(RadianceField)
        out.config = self.config
        out.dtype = np.dtype(dtype)
        out.diagnostics = Diagnostics()
        out.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return out

    # -- evaluation -------------------------------------------------------

    def _grid_args(self):
        g = self.config.grid
        res = g.resolutions
        return res, res.astype(self.dtype), np.uint64(g.table_size - 1)

    def _to_unit(self, x: np.ndarray):
        b = self.config.bound
        u = (x + b) / (2.0 * b)
        inside = (u >= 0.0) & (u <= 1.0)
        n_out = int(np.count_nonzero(~inside.all(axis=-1)))
        if n_out:
            self.diagnostics.clamped_positions += n_out
            u = np.clip(u, 0.0, 1.0)
        return np.ascontiguousarray(u, dtype=self.dtype), inside

    def _unit_dirs(self, d: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        bad = np.abs(n[..., 0] - 1.0) > 1e-6
        if np.any(bad):
            self.diagnostics.renormalized_directions += int(np.count_nonzero(bad))
            d = d / np.where(n > 0, n, 1.0)
        return d

    def _density_trunk(self, x_flat):
        p = self.params
        u, inside = self._to_unit(x_flat)
        enc = _hashgrid.encode_forward(u, p["grid"], *self._grid_args())
        h_pre = enc @ p["d_w1"] + p["d_b1"]
        h = np.maximum(h_pre, 0)
        out = h @ p["d_w2"] + p["d_b2"]
        return u, inside, enc, h_pre, h, out

    def forward(self, x: np.ndarray, d: np.ndarray):
        """Return ``(density, rgb, cache)`` for positions ``x`` and directions ``d``."""
        p = self.params
        c = self.config
        x = np.asarray(x, dtype=self.dtype)
        d = self._unit_dirs(np.asarray(d, dtype=self.dtype))
        per_ray = x.ndim == 3
        if not per_ray:
            x = x.reshape(-1, 1, 3)
            d = d.reshape(-1, 3)
        n_rays, n_samp = x.shape[:2]
        if d.shape != (n_rays, 3):
            raise FieldError(f"direction shape {d.shape} does not match positions {x.shape}")

        u, inside, enc, h_pre, h, out = self._density_trunk(x.reshape(-1, 3))
        raw = out[:, 0]
        sigma = _softplus(raw)
        geo = out[:, 1:]
        denc = encode_directions(d, c.dir_frequencies)
        g_feat = c.geo_features
        dir_term = denc @ p["c_w1"][g_feat:]
        c1_pre = geo @ p["c_w1"][:g_feat] + p["c_b1"]
        c1_pre = (c1_pre.reshape(n_rays, n_samp, -1) + dir_term[:, None, :]).reshape(n_rays * n_samp, -1)
        c1 = np.maximum(c1_pre, 0)
        c2_pre = c1 @ p["c_w2"] + p["c_b2"]
        c2 = np.maximum(c2_pre, 0)
        rgb = _sigmoid(c2 @ p["c_w3"] + p["c_b3"])

        cache = dict(
            shape=(n_rays, n_samp), per_ray=per_ray, u=u, inside=inside, enc=enc,
            h_pre=h_pre, h=h, raw=raw, geo=geo, d=d, denc=denc,
            c1_pre=c1_pre, c1=c1, c2_pre=c2_pre, c2=c2, rgb=rgb,
        )
        shape = (n_rays, n_samp) if per_ray else (n_rays,)
        return sigma.reshape(shape), rgb.reshape(shape + (3,)), cache

    def backward(self, cache: dict, dsigma: np.ndarray, drgb: np.ndarray, input_grads: bool = False):
        """Return ``(grads, dx, dd)``; ``dx``/``dd`` are None unless ``input_grads``."""
        p = self.params
        c = self.config
        n_rays, n_samp = cache["shape"]
        g_feat = c.geo_features
        dsigma = np.asarray(dsigma, dtype=self.dtype).reshape(-1)
        drgb = np.asarray(drgb, dtype=self.dtype).reshape(-1, 3)
        grads = {}

        rgb = cache["rgb"]
        dc3 = drgb * rgb * (1 - rgb)
        grads["c_w3"] = cache["c2"].T @ dc3
        grads["c_b3"] = dc3.sum(axis=0)
        dc2 = (dc3 @ p["c_w3"].T) * (cache["c2_pre"] > 0)
        grads["c_w2"] = cache["c1"].T @ dc2
        grads["c_b2"] = dc2.sum(axis=0)
        dc1 = (dc2 @ p["c_w2"].T) * (cache["c1_pre"] > 0)
        dc1_ray = dc1.reshape(n_rays, n_samp, -1).sum(axis=1)
        grads["c_w1"] = np.concatenate([cache["geo"].T @ dc1, cache["denc"].T @ dc1_ray], axis=0)
        grads["c_b1"] = dc1.sum(axis=0)
        dgeo = dc1 @ p["c_w1"][:g_feat].T

        draw = dsigma * _sigmoid(cache["raw"])
        dout = np.concatenate([draw[:, None], dgeo], axis=1)
        grads["d_w2"] = cache["h"].T @ dout
        grads["d_b2"] = dout.sum(axis=0)
        dh = (dout @ p["d_w2"].T) * (cache["h_pre"] > 0)
        grads["d_w1"] = cache["enc"].T @ dh
        grads["d_b1"] = dh.sum(axis=0)
        denc = np.ascontiguousarray(dh @ p["d_w1"].T)

        grads["grid"], du = _hashgrid.encode_backward(
            cache["u"], denc, p["grid"], *self._grid_args(), input_grads
        )
        grads = {k: grads[k] for k in PARAM_ORDER}
        if not input_grads:
            return grads, None, None

        dx = du * cache["inside"] / (2.0 * c.bound)
        ddenc = dc1_ray @ p["c_w1"][g_feat:].T
        dd = _encode_directions_backward(cache["d"], ddenc, c.dir_frequencies)
        if cache["per_ray"]:
            dx = dx.reshape(n_rays, n_samp, 3)
        return grads, dx, dd

    # -- convenience ------------------------------------------------------

    def density(self, x: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
        """Density only (the color branch is skipped)."""
        x = np.asarray(x, dtype=self.dtype).reshape(-1, 3)
        out = np.empty(len(x), dtype=self.dtype)
        for s in range(0, len(x), chunk):
            out[s:s + chunk] = _softplus(self._density_trunk(x[s:s + chunk])[-1][:, 0])
        return out

    def query(self, x: np.ndarray, d: np.ndarray, chunk: int = 1 << 15):
        """Batched ``(density, rgb)`` for per-point positions and directions."""
        x = np.asarray(x, dtype=self.dtype).reshape(-1, 3)
        d = np.broadcast_to(np.asarray(d, dtype=self.dtype), x.shape)
        sig = np.empty(len(x), dtype=self.dtype)
        rgb = np.empty((len(x), 3), dtype=self.dtype)
        for s in range(0, len(x), chunk):
            sig[s:s + chunk], rgb[s:s + chunk], _ = self.forward(x[s:s + chunk], d[s:s + chunk])
        return sig, rgb

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(checkpoint_bytes(self))

    @classmethod
    def load(cls, path) -> "RadianceField":
        return field_from_bytes(Path(path).read_bytes())


def field_forward(fld: RadianceField, x, d) -> FieldSample:
    sigma, rgb, _ = fld.forward(x, d)
    return FieldSample(sigma, rgb)


def field_backward(fld: RadianceField, cache: dict, dsigma, drgb, input_grads: bool = True):
    return fld.backward(cache, dsigma, drgb, input_grads=input_grads)


# Checkpoint layout (all integers unsigned 64-bit little-endian):
#   magic "NRFCKPT1"
#   u64 n, n bytes of UTF-8 JSON config
#   u64 array count, then per array:
#     u64 n, name; u64 n, numpy dtype string; u64 ndim; ndim x u64 shape;
#     u64 nbytes, raw little-endian C-order data
def checkpoint_bytes(fld: RadianceField, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    meta = {"config": fld.config.to_dict(), "extra": extra or {}}
    _write_blob(buf, json.dumps(meta, sort_keys=True).encode())
    buf.write(struct.pack("<Q", len(PARAM_ORDER)))
    for name in PARAM_ORDER:
        arr = fld.params[name]
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        _write_blob(buf, name.encode())
        _write_blob(buf, le.dtype.str.encode())
        buf.write(struct.pack("<Q", le.ndim))
        buf.write(struct.pack(f"<{le.ndim}Q", *le.shape))
        _write_blob(buf, np.ascontiguousarray(le).tobytes())
    return buf.getvalue()


def _write_blob(buf, data: bytes) -> None:
    buf.write(struct.pack("<Q", len(data)))
    buf.write(data)


def _read_blob(buf) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(buf, 8))
    return _read_exact(buf, n)


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FieldError("checkpoint truncated")
    return data


def field_from_bytes(data: bytes) -> RadianceField:
    buf = io.BytesIO(data)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FieldError("not a radiance-field checkpoint (bad magic)")
    meta = json.loads(_read_blob(buf))
    (count,) = struct.unpack("<Q", _read_exact(buf, 8))
    params = {}
    for _ in range(count):
        name = _read_blob(buf).decode()
        dt = np.dtype(_read_blob(buf).decode())
        (ndim,) = struct.unpack("<Q", _read_exact(buf, 8))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim))
        params[name] = np.frombuffer(_read_blob(buf), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    missing = set(PARAM_ORDER) - set(params)
    if missing:
        raise FieldError(f"checkpoint missing parameters: {sorted(missing)}")
    fld = RadianceField.__new__(RadianceField)
    fld.config = FieldConfig.from_dict(meta["config"])
    fld.dtype = params["grid"].dtype
    fld.diagnostics = Diagnostics()
    fld.params = {k: np.ascontiguousarray(params[k]) for k in PARAM_ORDER}
    fld.checkpoint_extra = meta.get("extra", {})
    return fld
