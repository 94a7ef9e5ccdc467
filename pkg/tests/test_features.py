"""Feature grids: binary format round-trips and the ReLU projection."""

import struct

import numpy as np
import pytest

from caption_forge.errors import DataError, DimensionError, FormatError
from caption_forge.features import (
    FeatureGrid,
    load_feature_grid,
    load_manifest,
    project,
    save_feature_grid,
    write_manifest,
    ManifestRecord,
)
from caption_forge.tensor import Tensor, new_rng

from oracles import assert_grads_match
from caption_forge import tensor as T


def grid_of(values):
    return FeatureGrid(image_id="g", features=Tensor(np.asarray(values, dtype=float)))


class TestProjection:
    def test_zero_weights(self):
        g = grid_of([[1.0, 2.0], [3.0, 4.0]])
        enc = project(g, Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))))
        assert np.array_equal(enc.states.data, np.zeros((2, 3)))
        assert np.array_equal(enc.v_global.data, np.zeros(3))

    def test_negative_preactivations(self):
        g = grid_of([[1.0, 1.0]])
        enc = project(g, Tensor(-np.ones((2, 2))), Tensor(-np.ones((2, 2))))
        assert np.all(enc.states.data == 0.0)
        assert np.all(enc.v_global.data == 0.0)

    def test_single_location_mean(self):
        rng = new_rng(0)
        g = grid_of(rng.normal(size=(1, 4)))
        w_f = Tensor(rng.normal(size=(3, 4)))
        w_g = Tensor(rng.normal(size=(3, 4)))
        enc = project(g, w_f, w_g)
        direct = np.maximum(w_g.data @ g.features.data[0], 0.0)
        assert np.allclose(enc.v_global.data, direct, atol=1e-12)

    def test_nonnegative_outputs(self):
        rng = new_rng(1)
        g = grid_of(rng.normal(size=(5, 6)))
        enc = project(g, Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6))))
        assert np.all(enc.states.data >= 0.0)
        assert np.all(enc.v_global.data >= 0.0)

    def test_permutation_equivariance(self):
        rng = new_rng(2)
        f = rng.normal(size=(6, 5))
        w_f = Tensor(rng.normal(size=(4, 5)))
        w_g = Tensor(rng.normal(size=(4, 5)))
        perm = rng.permutation(6)
        a = project(grid_of(f), w_f, w_g)
        b = project(grid_of(f[perm]), w_f, w_g)
        assert np.allclose(a.states.data[perm], b.states.data, atol=1e-12)
        assert np.allclose(a.v_global.data, b.v_global.data, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            project(grid_of(np.ones((2, 3))), Tensor(np.ones((4, 5))),
                    Tensor(np.ones((4, 3))))

    def test_gradient_through_projection(self):
        rng = new_rng(3)
        g = grid_of(rng.normal(size=(3, 4)))
        w_f = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w_g = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        wa = Tensor(rng.normal(size=(3, 2)))
        wb = Tensor(rng.normal(size=2))

        def f():
            enc = project(g, w_f, w_g)
            return T.add(T.tensor_sum(T.multiply(enc.states, wa)),
                         T.tensor_sum(T.multiply(enc.v_global, wb)))

        assert_grads_match(f, [w_f, w_g])


class TestGridFormat:
    def test_known_file(self, tmp_path):
        p = tmp_path / "one.imgf"
        with open(p, "wb") as fh:
            fh.write(b"IMGF" + struct.pack("<H", 1) + struct.pack("<II", 1, 4))
            fh.write(np.array([1, 2, 3, 4], dtype="<f4").tobytes())
        g = load_feature_grid(p)
        assert g.features.shape == (1, 4)
        assert np.array_equal(g.features.data, [[1.0, 2.0, 3.0, 4.0]])

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "trunc.imgf"
        with open(p, "wb") as fh:
            fh.write(b"IMGF" + struct.pack("<H", 1) + struct.pack("<II", 2, 3))
            fh.write(np.array([1, 2, 3], dtype="<f4").tobytes())
        with pytest.raises(FormatError, match="byte"):
            load_feature_grid(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.imgf"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError, match="byte 0"):
            load_feature_grid(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v9.imgf"
        p.write_bytes(b"IMGF" + struct.pack("<H", 9) + struct.pack("<II", 1, 1) + b"\x00" * 4)
        with pytest.raises(FormatError, match="version"):
            load_feature_grid(p)

    def test_non_finite_payload(self, tmp_path):
        p = tmp_path / "nan.imgf"
        with open(p, "wb") as fh:
            fh.write(b"IMGF" + struct.pack("<H", 1) + struct.pack("<II", 1, 2))
            fh.write(np.array([1.0, np.nan], dtype="<f4").tobytes())
        with pytest.raises(DataError):
            load_feature_grid(p)

    def test_roundtrip_random_grids(self, tmp_path):
        rng = new_rng(4)
        for trial in range(20):
            k = int(rng.integers(1, 9))
            d = int(rng.integers(1, 17))
            values = rng.normal(size=(k, d)).astype(np.float32).astype(np.float64)
            p = tmp_path / f"grid{trial}.imgf"
            save_feature_grid(FeatureGrid(image_id="x", features=Tensor(values)), p)
            original = p.read_bytes()
            loaded = load_feature_grid(p)
            q = tmp_path / f"grid{trial}b.imgf"
            save_feature_grid(loaded, q)
            assert q.read_bytes() == original


class TestManifest:
    def test_roundtrip(self, tmp_path):
        recs = [
            ManifestRecord("img0", tmp_path / "a.imgf", ["a cat", "the cat"], None),
            ManifestRecord("img1", tmp_path / "b.imgf", ["a dog"], [2, 0, 1]),
        ]
        path = tmp_path / "manifest.jsonl"
        write_manifest(recs, path)
        loaded = load_manifest(path)
        assert [r.image_id for r in loaded] == ["img0", "img1"]
        assert loaded[0].captions == ["a cat", "the cat"]
        assert loaded[1].slots == [2, 0, 1]
        assert loaded[0].feature_path == tmp_path / "a.imgf"

    def test_missing_key(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"id": "x", "features": "f.imgf"}\n')
        with pytest.raises(FormatError, match="captions"):
            load_manifest(p)

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{not json}\n")
        with pytest.raises(FormatError):
            load_manifest(p)
