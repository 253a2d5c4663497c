import numpy as np
import pytest

from sd2 import rng
from sd2 import model as M


def small_cfg(**kw):
    base = dict(input_dim=6, rep_dim=4, enc_hidden=8, head_hidden=4)
    base.update(kw)
    return M.ArchConfig(**base)


def rand_x(n=9, d=6, key=1):
    return rng.normal_matrix(key, n, d)


def rand_t(n=9, key=2):
    return rng.bernoulli(key, np.full(n, 0.5))


class TestEncode:
    def test_zero_weights_give_zero_representations(self):
        m = M.init_model(small_cfg(), seed=1)
        for k in m.params:
            m.params[k][:] = 0.0
        reps = M.encode(m, rand_x())
        assert np.all(reps.r_z == 0) and np.all(reps.r_c == 0) and np.all(reps.r_a == 0)

    def test_deterministic(self):
        x = rand_x()
        a = M.encode(M.init_model(small_cfg(), seed=3), x)
        b = M.encode(M.init_model(small_cfg(), seed=3), x)
        assert np.array_equal(a.r_z, b.r_z)
        assert np.array_equal(a.r_c, b.r_c)

    def test_shapes(self):
        reps = M.encode(M.init_model(small_cfg(), seed=1), rand_x(n=13))
        assert reps.r_z.shape == reps.r_c.shape == reps.r_a.shape == (13, 4)

    def test_row_locality(self):
        m = M.init_model(small_cfg(), seed=4)
        x = rand_x()
        base = M.encode(m, x).r_c
        x2 = x.copy()
        x2[3] += 1.0
        perturbed = M.encode(m, x2).r_c
        changed = np.any(base != perturbed, axis=1)
        assert changed[3]
        assert not changed[np.arange(len(x)) != 3].any()

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="input"):
            M.encode(M.init_model(small_cfg(), seed=1), rand_x(d=5))


class TestForwardBinary:
    def test_zero_head_weights_give_half(self):
        m = M.init_model(small_cfg(), seed=1)
        for k in m.params:
            if k.startswith("head_"):
                m.params[k][:] = 0.0
        outs = M.forward_binary(m, rand_x(), rand_t())
        for q in (outs.q_t, outs.q_t_z, outs.q_t_c, outs.q_y, outs.q_y_a, outs.q_y_c):
            assert np.all(q.value == 0.5)

    def test_probabilities_bounded(self):
        m = M.init_model(small_cfg(), seed=2)
        for k in m.params:
            m.params[k] *= 40.0
        outs = M.forward_binary(m, rand_x(), rand_t())
        for q in outs:
            assert np.all(q.value >= 0.0) and np.all(q.value <= 1.0)

    def test_permutation_equivariance(self):
        m = M.init_model(small_cfg(), seed=5)
        x, t = rand_x(), rand_t()
        perm = rng.permutation(9, len(x))
        a = M.forward_binary(m, x, t).q_t.value
        b = M.forward_binary(m, x[perm], t[perm]).q_t.value
        assert np.allclose(a[perm], b)

    def test_wrong_mode(self):
        m = M.init_model(small_cfg(mode="continuous"), seed=1)
        with pytest.raises(ValueError, match="binary"):
            M.forward_binary(m, rand_x(), rand_t())

    def test_non_binary_treatment(self):
        m = M.init_model(small_cfg(), seed=1)
        with pytest.raises(ValueError, match="0, 1"):
            M.forward_binary(m, rand_x(), np.full(9, 0.3))


class TestPredictOutcome:
    def test_binary_ite_shape(self):
        m = M.init_model(small_cfg(), seed=6)
        x = rand_x()
        ite = M.predict_outcome(m, x, 1.0) - M.predict_outcome(m, x, 0.0)
        assert ite.shape == (9,)
        assert np.any(ite != 0)

    def test_channel_weights_zeroed_kills_effect(self):
        m = M.init_model(small_cfg(), seed=6)
        m.params["head_y.l0.W"][0, :] = 0.0  # first input row is the channel
        x = rand_x()
        assert np.array_equal(M.predict_outcome(m, x, 0.0), M.predict_outcome(m, x, 1.0))

    def test_no_channel_variant_is_constant_in_t(self):
        m = M.init_model(small_cfg(treatment_channel="none"), seed=6)
        x = rand_x()
        assert np.array_equal(M.predict_outcome(m, x, 0.0), M.predict_outcome(m, x, 1.0))

    def test_binary_do_value_domain(self):
        m = M.init_model(small_cfg(), seed=6)
        with pytest.raises(ValueError, match="do-value"):
            M.predict_outcome(m, rand_x(), 0.5)

    def test_continuous_grid(self):
        m = M.init_model(small_cfg(mode="continuous"), seed=7)
        x = rand_x()
        grid = np.linspace(20, 30, 10)
        preds = [M.predict_outcome(m, x, tv) for tv in grid]
        assert len(preds) == 10 and all(p.shape == (9,) for p in preds)


class TestForwardContinuous:
    def test_zero_weights_standard_gaussian(self):
        m = M.init_model(small_cfg(mode="continuous"), seed=1)
        for k in m.params:
            m.params[k][:] = 0.0
        outs = M.forward_continuous(m, rand_x(), rng.normals(9, 0, 9))
        assert np.all(outs.t_hat.mean.value == 0.0)
        assert np.all(outs.t_hat.log_std.value == 0.0)

    def test_log_std_clamped(self):
        m = M.init_model(small_cfg(mode="continuous"), seed=2)
        for k in m.params:
            m.params[k] *= 100.0
        outs = M.forward_continuous(m, rand_x(), rng.normals(9, 0, 9))
        for head in outs:
            assert np.all(head.log_std.value >= M.LOG_STD_MIN)
            assert np.all(head.log_std.value <= M.LOG_STD_MAX)

    def test_deterministic(self):
        x, t = rand_x(), rng.normals(9, 0, 9)
        a = M.forward_continuous(M.init_model(small_cfg(mode="continuous"), 3), x, t)
        b = M.forward_continuous(M.init_model(small_cfg(mode="continuous"), 3), x, t)
        assert np.array_equal(a.y_hat.mean.value, b.y_hat.mean.value)

    def test_wrong_mode(self):
        m = M.init_model(small_cfg(), seed=1)
        with pytest.raises(ValueError, match="continuous"):
            M.forward_continuous(m, rand_x(), rng.normals(9, 0, 9))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = M.init_model(small_cfg(), seed=11)
        path = tmp_path / "model.bin"
        M.checkpoint_save(m, path)
        loaded = M.checkpoint_load(path)
        assert loaded.config == m.config
        assert loaded.seed == m.seed
        assert set(loaded.params) == set(m.params)
        for k in m.params:
            assert np.array_equal(loaded.params[k], m.params[k])

    def test_edited_shape_rejected(self, tmp_path):
        import json
        m = M.init_model(small_cfg(), seed=11)
        path = tmp_path / "model.bin"
        M.checkpoint_save(m, path)
        blob = path.read_bytes()
        header, rest = blob.split(b"\n", 1)
        manifest = json.loads(header)
        manifest["params"][0]["shape"] = [2, 2]
        path.write_bytes(json.dumps(manifest).encode() + b"\n" + rest)
        with pytest.raises(M.CheckpointError, match="shape"):
            M.checkpoint_load(path)

    def test_newer_version_rejected(self, tmp_path):
        import json
        m = M.init_model(small_cfg(), seed=11)
        path = tmp_path / "model.bin"
        M.checkpoint_save(m, path)
        blob = path.read_bytes()
        header, rest = blob.split(b"\n", 1)
        manifest = json.loads(header)
        manifest["version"] = M.CHECKPOINT_VERSION + 1
        path.write_bytes(json.dumps(manifest).encode() + b"\n" + rest)
        with pytest.raises(M.CheckpointError, match="version"):
            M.checkpoint_load(path)

    def test_truncated_rejected(self, tmp_path):
        m = M.init_model(small_cfg(), seed=11)
        path = tmp_path / "model.bin"
        M.checkpoint_save(m, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(M.CheckpointError, match="truncated"):
            M.checkpoint_load(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"{\"format\": \"other\"}\n")
        with pytest.raises(M.CheckpointError):
            M.checkpoint_load(path)


class TestArchConfig:
    def test_bad_dimension(self):
        with pytest.raises(ValueError):
            M.ArchConfig(input_dim=0)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            M.ArchConfig(input_dim=3, mode="ordinal")

    def test_bad_channel(self):
        with pytest.raises(ValueError):
            M.ArchConfig(input_dim=3, treatment_channel="soft")
