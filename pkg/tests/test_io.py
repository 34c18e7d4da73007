import hashlib
import json

import numpy as np
import pytest

from chainmerge.errors import CorruptCheckpoint, InvalidModel, NotAMatrixFile, UnsupportedVersion
from chainmerge.harness import ExperimentSpec, evaluate, prepare_models
from chainmerge.io import load_checkpoint, load_matrix, save_checkpoint, save_matrix
from chainmerge.model import LinearLayer, SequentialModel, build_mlp


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def f32_model(sizes, activation="relu", bias=True, seed=0):
    # weights exactly representable in float32 survive a round trip bitwise
    model = build_mlp(sizes, activation, bias=bias, rng=np.random.default_rng(seed))
    return model.with_weights([w.astype(np.float32).astype(np.float64) for w in model.weights])


@pytest.mark.parametrize("bias", [True, False])
def test_checkpoint_roundtrip(tmp_path, bias):
    model = f32_model([5, 7, 3], "gelu", bias=bias)
    save_checkpoint(model, tmp_path / "m")
    back = load_checkpoint(tmp_path / "m")
    assert back.architecture() == model.architecture()
    for a, b in zip(back.weights, model.weights):
        np.testing.assert_array_equal(a, b)


def test_manifest_layout(tmp_path):
    model = f32_model([3, 3, 2])
    save_checkpoint(model, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert list(manifest) == ["format_version", "input_dim", "layers"]
    assert manifest["format_version"] == 1
    offsets = [entry["byte_offset"] for entry in manifest["layers"]]
    # fc1 is 3x4 -> 48 bytes, fc2 is 2x4 -> 32 bytes
    assert offsets == [0, 48]
    assert (tmp_path / "weights.bin").stat().st_size == 80


def test_odd_sized_layer_is_padded(tmp_path):
    layer = LinearLayer("a", np.ones((1, 3)), False)
    model = SequentialModel((layer, LinearLayer("b", np.ones((1, 1)), False)), 3)
    save_checkpoint(model, tmp_path)
    blob = (tmp_path / "weights.bin").read_bytes()
    assert len(blob) == 24
    assert blob[12:16] == b"\0\0\0\0"
    np.testing.assert_array_equal(load_checkpoint(tmp_path).layers[1].weight, [[1.0]])


@pytest.fixture(scope="module")
def default_models():
    return prepare_models(ExperimentSpec())


def test_seed42_checkpoint_hashes(tmp_path, default_models):
    tasks, base, fine_tuned = default_models
    save_checkpoint(base, tmp_path / "base")
    save_checkpoint(fine_tuned[0], tmp_path / "ft0")
    assert sha256(tmp_path / "base" / "weights.bin") == "2576b5058ed00e5b85d7c2ae8215d2ea6e71c60c627adbcf7e83a9779d6fd531"
    assert sha256(tmp_path / "ft0" / "weights.bin") == "47d7dab4e9257bcc61fe4b4790302fab67e5dbb62253cd68fca3c3ec891f63c9"


def test_evaluation_survives_roundtrip(tmp_path, default_models):
    tasks, _, fine_tuned = default_models
    save_checkpoint(fine_tuned[1], tmp_path)
    before = evaluate(fine_tuned[1], tasks[1])
    after = evaluate(load_checkpoint(tmp_path), tasks[1])
    assert after.accuracy == before.accuracy
    assert after.loss == pytest.approx(before.loss, rel=1e-4)


def test_truncated_blob(tmp_path):
    save_checkpoint(f32_model([4, 3, 2]), tmp_path)
    blob = tmp_path / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path)


def test_trailing_bytes(tmp_path):
    save_checkpoint(f32_model([4, 3, 2]), tmp_path)
    blob = tmp_path / "weights.bin"
    blob.write_bytes(blob.read_bytes() + b"\0" * 8)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path)


def _edit_manifest(path, fn):
    manifest = json.loads((path / "manifest.json").read_text())
    fn(manifest)
    (path / "manifest.json").write_text(json.dumps(manifest))


def test_unknown_activation_named(tmp_path):
    save_checkpoint(f32_model([4, 3, 2]), tmp_path)
    _edit_manifest(tmp_path, lambda m: m["layers"][0].update(activation="swish"))
    with pytest.raises(InvalidModel, match="swish"):
        load_checkpoint(tmp_path)


def test_version_mismatch(tmp_path):
    save_checkpoint(f32_model([4, 3, 2]), tmp_path)
    _edit_manifest(tmp_path, lambda m: m.update(format_version=2))
    with pytest.raises(UnsupportedVersion):
        load_checkpoint(tmp_path)


def test_missing_files(tmp_path):
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path)
    save_checkpoint(f32_model([4, 3, 2]), tmp_path)
    (tmp_path / "weights.bin").unlink()
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path)


def test_bad_offset(tmp_path):
    save_checkpoint(f32_model([4, 3, 2]), tmp_path)
    _edit_manifest(tmp_path, lambda m: m["layers"][1].update(byte_offset=8))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path)


def test_non_finite_weights_rejected(tmp_path):
    w = np.ones((2, 3))
    w[0, 1] = np.nan
    with pytest.raises(InvalidModel):
        LinearLayer("a", w, False)
    # finite in float64, infinite in float32
    with pytest.raises(InvalidModel):
        save_checkpoint(SequentialModel((LinearLayer("a", np.full((1, 1), 1e39), False),), 1), tmp_path)


# -- matrices ---------------------------------------------------------------


def test_matrix_bytes(tmp_path):
    save_matrix([[1.0, 2.0], [3.0, 4.0]], tmp_path / "m.cmmx")
    raw = (tmp_path / "m.cmmx").read_bytes()
    assert raw[:4] == bytes([0x43, 0x4D, 0x4D, 0x58])
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:16] == (2).to_bytes(8, "little") and raw[16:24] == (2).to_bytes(8, "little")
    assert raw[24:] == np.array([1, 2, 3, 4], dtype="<f4").tobytes()


def test_empty_matrix(tmp_path):
    save_matrix(np.zeros((0, 0)), tmp_path / "e.cmmx")
    assert (tmp_path / "e.cmmx").stat().st_size == 24
    assert load_matrix(tmp_path / "e.cmmx").shape == (0, 0)


def test_matrix_rewrite_is_stable(tmp_path):
    x = np.random.default_rng(42).normal(size=(16, 128))
    save_matrix(x, tmp_path / "a.cmmx")
    y = load_matrix(tmp_path / "a.cmmx")
    save_matrix(y, tmp_path / "b.cmmx")
    assert sha256(tmp_path / "a.cmmx") == sha256(tmp_path / "b.cmmx")
    np.testing.assert_array_equal(y, x.astype(np.float32))


def test_bad_magic(tmp_path):
    (tmp_path / "x.cmmx").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(NotAMatrixFile):
        load_matrix(tmp_path / "x.cmmx")


def test_short_payload(tmp_path):
    save_matrix(np.ones((2, 2)), tmp_path / "m.cmmx")
    raw = (tmp_path / "m.cmmx").read_bytes()
    (tmp_path / "m.cmmx").write_bytes(raw[:-4])
    with pytest.raises(NotAMatrixFile):
        load_matrix(tmp_path / "m.cmmx")


def test_matrix_version(tmp_path):
    save_matrix(np.ones((1, 1)), tmp_path / "m.cmmx")
    raw = bytearray((tmp_path / "m.cmmx").read_bytes())
    raw[4] = 9
    (tmp_path / "m.cmmx").write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        load_matrix(tmp_path / "m.cmmx")
