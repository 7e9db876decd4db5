import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import field_instance, random_field
from nerfcloud import field as fieldmod
from nerfcloud.field import FieldConfig, FieldError, HashGridConfig, RadianceField, hash_encode

P1, P2 = 2654435761, 805459861


def oracle_encode(u, cfg: HashGridConfig, table):
    """Plain-Python reference encoder (independent of the compiled kernel)."""
    out = []
    for lvl in range(cfg.levels):
        r = int(np.floor(cfg.base_resolution * cfg.per_level_scale**lvl))
        feats = np.zeros(cfg.features_per_level)
        pos = [min(max(float(c), 0.0), 1.0) * r for c in u]
        base = [min(int(np.floor(p)), r - 1) for p in pos]
        frac = [p - b for p, b in zip(pos, base)]
        for corner in range(8):
            off = [(corner >> k) & 1 for k in range(3)]
            w = 1.0
            for k in range(3):
                w *= frac[k] if off[k] else 1.0 - frac[k]
            ix, iy, iz = (base[k] + off[k] for k in range(3))
            h = (ix ^ ((iy * P1) % 2**64) ^ ((iz * P2) % 2**64)) & (cfg.table_size - 1)
            feats += w * table[lvl, h]
        out.append(feats)
    return np.concatenate(out)


class TestHashEncode:
    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            cfg = HashGridConfig(levels=int(rng.integers(1, 5)), table_size=2 ** int(rng.integers(3, 12)),
                                 features_per_level=int(rng.integers(1, 4)), base_resolution=int(rng.integers(2, 20)),
                                 per_level_scale=float(rng.uniform(1.1, 2.5)))
            table = rng.normal(size=(cfg.levels, cfg.table_size, cfg.features_per_level))
            u = rng.uniform(-0.1, 1.1, (40, 3))
            got = hash_encode(u, cfg, table)
            want = np.array([oracle_encode(p, cfg, table) for p in u])
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_default_resolutions(self):
        res = HashGridConfig().resolutions
        assert res[0] == 16 and res[-1] == int(np.floor(16 * 1.5**7))
        assert len(res) == 8

    def test_corner_and_center(self):
        cfg = HashGridConfig(levels=1, table_size=2**10, features_per_level=2, base_resolution=4)
        rng = np.random.default_rng(1)
        table = rng.normal(size=(1, 2**10, 2))

        def feat(i, j, k):
            return table[0, (i ^ (j * P1) ^ (k * P2)) & (2**10 - 1)]

        corner = hash_encode(np.array([[1 / 4, 2 / 4, 3 / 4]]), cfg, table)[0]
        np.testing.assert_allclose(corner, feat(1, 2, 3), atol=1e-15)
        center = hash_encode(np.array([[1.5 / 4, 2.5 / 4, 0.5 / 4]]), cfg, table)[0]
        mean = np.mean([feat(1 + a, 2 + b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)], axis=0)
        np.testing.assert_allclose(center, mean, atol=1e-15)

    def test_input_gradient(self):
        rng = np.random.default_rng(2)
        cfg = HashGridConfig(levels=3, table_size=2**8, features_per_level=2, base_resolution=3, per_level_scale=1.7)
        table = rng.normal(size=(3, 2**8, 2))
        from nerfcloud import _hashgrid

        res = cfg.resolutions
        for _ in range(20):
            u = rng.uniform(0.05, 0.95, (1, 3))
            if np.any(np.abs(u * res[:, None] - np.round(u * res[:, None])) < 1e-3):
                continue
            g = rng.normal(size=(1, cfg.n_output))
            _, du = _hashgrid.encode_backward(u, g, table, res, res.astype(float), np.uint64(255), True)
            h = 1e-4
            num = np.zeros(3)
            for k in range(3):
                e = np.zeros((1, 3))
                e[0, k] = h
                num[k] = ((hash_encode(u + e, cfg, table) - hash_encode(u - e, cfg, table)) * g).sum() / (2 * h)
            assert np.linalg.norm(du[0] - num) / np.linalg.norm(num) < 1e-4

    @pytest.mark.parametrize("kw", [dict(table_size=100), dict(levels=0), dict(features_per_level=0),
                                    dict(per_level_scale=1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(FieldError):
            HashGridConfig(**kw)


class TestField:
    def test_initial_density_is_ln2(self):
        fld = RadianceField(seed=0)
        rng = np.random.default_rng(0)
        x = rng.uniform(-4, 4, (2000, 3))
        sig = fld.density(x)
        np.testing.assert_allclose(sig, np.log(2.0), atol=2e-3)

    def test_density_view_independent_and_deterministic(self):
        fld = random_field(np.random.default_rng(3))
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (50, 3))
        d1 = rng.normal(size=(50, 3))
        d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
        d2 = -d1
        s1, c1, _ = fld.forward(x, d1)
        s2, c2, _ = fld.forward(x, d2)
        assert np.array_equal(s1, s2)
        assert not np.allclose(c1, c2)
        s3, c3, _ = fld.forward(x, d1)
        assert np.array_equal(s1, s3) and np.array_equal(c1, c3)
        assert np.array_equal(fld.density(x), s1)

    def test_zero_upstream(self):
        fld = random_field(np.random.default_rng(5))
        x = np.random.default_rng(6).uniform(-1, 1, (4, 5, 3))
        d = np.tile([[0, 0, 1.0]], (4, 1))
        _, _, cache = fld.forward(x, d)
        grads, dx, dd = fld.backward(cache, np.zeros((4, 5)), np.zeros((4, 5, 3)), input_grads=True)
        for g in grads.values():
            assert not np.any(g)
        assert not np.any(dx) and not np.any(dd)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-1e6, 1e6))
    def test_activation_ranges(self, seed, scale):
        rng = np.random.default_rng(seed)
        fld = random_field(rng)
        for k in fld.params:
            fld.params[k] *= rng.uniform(0, 50)
        x = rng.uniform(-3, 3, (30, 3)) * (1 if abs(scale) < 1 else scale)
        d = rng.normal(size=(30, 3))
        sig, rgb, _ = fld.forward(x, d)
        assert np.all(sig >= 0) and np.all(np.isfinite(sig))
        assert np.all((rgb >= 0) & (rgb <= 1))

    def test_diagnostics(self):
        fld = RadianceField(FieldConfig(bound=1.0))
        fld.forward(np.array([[2.0, 0, 0], [0.1, 0, 0]]), np.array([[0, 0, 2.0], [0, 0, 1.0]]))
        assert fld.diagnostics.clamped_positions == 1
        assert fld.diagnostics.renormalized_directions == 1

    def test_direction_shape_checked(self):
        fld = RadianceField(FieldConfig(bound=1.0))
        with pytest.raises(FieldError):
            fld.forward(np.zeros((2, 3, 3)), np.zeros((3, 3)) + 1)

    def test_gradients_match_finite_differences(self):
        errs = [field_instance(s) for s in range(10)]
        assert max(errs) <= 1e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        fld = random_field(np.random.default_rng(7))
        f = tmp_path / "c.bin"
        fld.save(f)
        back = RadianceField.load(f)
        assert back.config == fld.config and back.dtype == fld.dtype
        for k in fld.params:
            assert back.params[k].dtype == fld.params[k].dtype
            assert np.array_equal(back.params[k], fld.params[k])
        assert f.read_bytes() == fieldmod.checkpoint_bytes(back)

    def test_layout(self):
        fld = RadianceField(FieldConfig(grid=HashGridConfig(levels=1, table_size=4)))
        blob = fieldmod.checkpoint_bytes(fld, extra={"step": 3})
        buf = io.BytesIO(blob)
        assert buf.read(8) == b"NRFCKPT1"
        n = int.from_bytes(buf.read(8), "little")
        import json

        meta = json.loads(buf.read(n))
        assert meta["extra"] == {"step": 3} and meta["config"]["grid"]["table_size"] == 4
        assert int.from_bytes(buf.read(8), "little") == len(fieldmod.PARAM_ORDER)
        assert fieldmod.field_from_bytes(blob).checkpoint_extra == {"step": 3}

    @pytest.mark.parametrize("mangle", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-3], lambda b: b[:20]])
    def test_corrupt(self, mangle):
        blob = fieldmod.checkpoint_bytes(RadianceField(FieldConfig(grid=HashGridConfig(levels=1, table_size=4))))
        with pytest.raises(FieldError):
            fieldmod.field_from_bytes(mangle(blob))
