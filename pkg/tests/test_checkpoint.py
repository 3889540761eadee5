import struct

import numpy as np
import pytest

from sphere_at.checkpoint import (MAGIC, CheckpointError, load_checkpoint, read_blobs, save_checkpoint,
                                  write_blobs)
from sphere_at.spherehead import ArchitectureSpec, HeadConfig, init_params


@pytest.fixture
def params():
    arch = ArchitectureSpec(input_shape=(1, 12, 12), hidden=(2,), feature_dim=5, num_classes=3, kind="conv",
                            kernel=3, activation="tanh")
    p = init_params(arch, np.random.default_rng(0))
    p.b[:] = [0.1, -np.pi, 1e-300]
    return p


def test_round_trip_is_bit_exact(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, HeadConfig("m-he", s=12.5), {"note": "x y"})
    back, head, header = load_checkpoint(path)
    assert back.arch == params.arch
    assert head == HeadConfig("m-he", s=12.5)
    assert header["note"] == "x y"
    for (ka, a), (kb, b) in zip(params.named().items(), back.named().items()):
        assert ka == kb and a.tobytes() == b.tobytes()


def test_same_content_gives_same_bytes(tmp_path, params):
    save_checkpoint(tmp_path / "a", params, HeadConfig())
    save_checkpoint(tmp_path / "b", params.copy(), HeadConfig())
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic_and_version(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, HeadConfig())
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_blobs(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(MAGIC + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointError, match="version 99"):
        read_blobs(tmp_path / "ver")


def test_truncated_and_trailing(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, HeadConfig())
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_blobs(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_blobs(tmp_path / "long")


def test_adversarial_batch_is_not_a_model(tmp_path):
    path = tmp_path / "adv.ckpt"
    write_blobs(path, {"kind": "adv-batch"}, {"x_adv": np.zeros((2, 3))})
    header, tensors = read_blobs(path)
    assert header["kind"] == "adv-batch" and tensors["x_adv"].shape == (2, 3)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_header_values_must_be_single_line(tmp_path):
    with pytest.raises(CheckpointError):
        write_blobs(tmp_path / "x", {"a": "line\nbreak"}, {})
