import struct

import numpy as np
import pytest

from orthodefense.data import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DataFormatError,
    Dataset,
    IDXCountMismatchError,
    IDXError,
    IDXMagicError,
    IDXTruncatedError,
    checkpoint_bytes,
    gen_synthetic,
    load_checkpoint,
    load_csv,
    load_idx,
    parse_checkpoint,
    parse_config,
    parse_idx,
    save_checkpoint,
    write_csv,
    write_idx,
)
from orthodefense.nn import InitSpec, build_model, cnn_arch, mlp_arch


def _idx_pair(pixels, labels):
    n, h, w = pixels.shape
    img = struct.pack(">IIII", 0x803, n, h, w) + bytes(pixels.astype(np.uint8).ravel())
    lab = struct.pack(">II", 0x801, len(labels)) + bytes(labels)
    return img, lab


def test_hand_built_idx_loads(tmp_path):
    img, lab = _idx_pair(np.array([[[0, 255], [128, 1]], [[7, 8], [9, 10]]]), [1, 0])
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (2, 1, 2, 2)
    assert ds.images[0, 0, 0, 1] == 1.0 and ds.images[0, 0, 0, 0] == 0.0
    assert list(ds.labels) == [1, 0]


def test_idx_errors():
    img, lab = _idx_pair(np.zeros((2, 2, 2)), [0, 1])
    _, lab3 = _idx_pair(np.zeros((3, 2, 2)), [0, 1, 1])
    with pytest.raises(IDXCountMismatchError):
        parse_idx(img, lab3)
    with pytest.raises(IDXMagicError):
        parse_idx(b"\x00\x00\x08\x04" + img[4:], lab)
    with pytest.raises(IDXTruncatedError):
        parse_idx(img[:-1], lab)


def test_idx_write_round_trip(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, size=(5, 1, 3, 4))
    ds = Dataset(pixels / 255.0, np.arange(5) % 3, 3)
    write_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l", num_classes=3)
    assert back.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_round_trip(tmp_path):
    ds = gen_synthetic(3, 9, 4, seed=1)
    write_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", num_classes=3)
    assert back.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_bad_header(tmp_path):
    (tmp_path / "d.csv").write_text("y,p0\n1,0.5\n")
    with pytest.raises(DataFormatError):
        load_csv(tmp_path / "d.csv")


def test_synthetic_deterministic_and_balanced():
    a = gen_synthetic(3, 10, 5, seed=4)
    b = gen_synthetic(3, 10, 5, seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert sorted(np.bincount(a.labels, minlength=3).tolist(), reverse=True) == [4, 3, 3]
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synthetic_preconditions():
    with pytest.raises(ValueError):
        gen_synthetic(1, 10, 4, seed=0)
    with pytest.raises(ValueError):
        gen_synthetic(5, 3, 4, seed=0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 2, 2)), [2], 2)


def _model():
    return build_model(cnn_arch((1, 5, 5), 3), InitSpec(seed=9), input_shape=(1, 5, 5))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = _model()
    save_checkpoint(m, {"seed": 9, "lambda": 30.0}, tmp_path / "m.orth")
    back, meta = load_checkpoint(tmp_path / "m.orth")
    assert back.descriptor == m.descriptor
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    assert meta == {"lambda": "30.0", "seed": "9"}


def test_checkpoint_float32_round_trip():
    m = _model()
    back, _ = parse_checkpoint(checkpoint_bytes(m, dtype=1))
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k].astype(np.float32).astype(np.float64))


def test_checkpoint_header_layout():
    buf = checkpoint_bytes(_model())
    assert buf[:4] == b"ORTH"
    assert struct.unpack("<I", buf[4:8])[0] == 1


def test_checkpoint_typed_errors():
    buf = bytearray(checkpoint_bytes(_model()))
    bad = bytearray(buf)
    bad[0] ^= 0xFF
    with pytest.raises(CheckpointMagicError):
        parse_checkpoint(bytes(bad))
    bad = bytearray(buf)
    bad[4] = 2
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(bytes(bad))
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(bytes(buf[:-3]))
    with pytest.raises(CheckpointError):
        parse_checkpoint(bytes(buf) + b"\x00")


def test_checkpoint_shape_mismatch():
    m = build_model(mlp_arch((1, 2, 2), 2, 3), InitSpec(seed=0), input_shape=(1, 2, 2))
    buf = checkpoint_bytes(m)
    # swap the descriptor's hidden width so the tensor table no longer fits
    bad = buf.replace(b"dense 4 3\n", b"dense 4 5\n").replace(b"dense 3 2", b"dense 5 2")
    assert bad != buf
    with pytest.raises(CheckpointShapeError):
        parse_checkpoint(bad)


def test_config_parsing_and_overrides():
    cfg = parse_config("# comment\ntrain.lr = 0.01\neval.eps_grid = 0, 0.03\n", {"train.seed": "4"})
    assert cfg["train.lr"] == 0.01
    assert cfg["eval.eps_grid"] == (0.0, 0.03)
    assert cfg["train.seed"] == 4
    assert cfg["train.epochs_check"] == 20
    text = cfg.dumps()
    assert parse_config(text).dumps() == text


def test_config_rejects_unknown_and_malformed():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("train.lrate = 0.1\n")
    with pytest.raises(ConfigError):
        parse_config("train.lr 0.1\n")
    with pytest.raises(ConfigError):
        parse_config("train.seed = abc\n")
    with pytest.raises(ConfigError):
        parse_config("train.penalty = cube\n")
