import json
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fn2en.checkpoint import (load_network, load_teacher, read_checkpoint, save_network, write_checkpoint)
from fn2en.errors import FormatError
from fn2en.nn import attach_head


def handmade(tensors, descriptor):
    blob = b"FN2E" + struct.pack("<II", 1, len(tensors))
    for name, arr in tensors.items():
        blob += struct.pack("<H", len(name.encode())) + name.encode()
        blob += struct.pack("<B", arr.ndim) + b"".join(struct.pack("<I", d) for d in arr.shape)
        blob += b"".join(struct.pack("<f", float(v)) for v in arr.ravel())
    desc = json.dumps(descriptor, sort_keys=True).encode()
    return blob + struct.pack("<I", len(desc)) + desc


def test_byte_layout_matches_handmade_encoding(tmp_path):
    tensors = {"a.weight": np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32), "é": np.array([7.0], np.float32)}
    desc = {"k": [1, 2], "name": "x"}
    write_checkpoint(tmp_path / "c.fn2e", tensors, desc)
    assert (tmp_path / "c.fn2e").read_bytes() == handmade(tensors, desc)


@settings(max_examples=30, deadline=None)
@given(arr=hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                      elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_is_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck") / "c.fn2e"
    write_checkpoint(path, {"t": arr}, {})
    back, desc = read_checkpoint(path)
    assert back["t"].shape == arr.shape and back["t"].tobytes() == arr.tobytes()
    assert desc == {}


def test_network_round_trip(tmp_path, tiny):
    net = attach_head(tiny.student(), tiny.spec, np.random.default_rng(0))
    save_network(net, tmp_path / "n.fn2e", {"stage": 2}, {"velocity/x": np.ones(3, np.float32)})
    back, prov, extras = load_network(tmp_path / "n.fn2e")
    assert back.checksum() == net.checksum()
    assert back.layers == net.layers and back.meta == net.meta
    assert prov["stage"] == 2 and prov["arch_hash"] == net.architecture_hash()
    np.testing.assert_array_equal(extras["velocity/x"], np.ones(3))
    save_network(back, tmp_path / "again.fn2e", prov, extras)
    assert (tmp_path / "again.fn2e").read_bytes() == (tmp_path / "n.fn2e").read_bytes()


def test_load_teacher_is_frozen(tmp_path, tiny):
    save_network(tiny.teacher.network, tmp_path / "t.fn2e")
    teacher = load_teacher(tmp_path / "t.fn2e")
    assert teacher.checksum() == tiny.teacher.checksum()
    assert not any(p.requires_grad for p in teacher.network.params.values())


@pytest.fixture
def saved(tmp_path, tiny):
    path = tmp_path / "n.fn2e"
    save_network(tiny.student(), path)
    return path


def _corrupt(path, blob):
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_bad_magic(saved):
    _corrupt(saved, b"XN2E" + saved.read_bytes()[4:])


def test_bad_version(saved):
    blob = saved.read_bytes()
    _corrupt(saved, blob[:4] + struct.pack("<I", 2) + blob[8:])


def test_truncated(saved):
    blob = saved.read_bytes()
    for cut in (2, 10, len(blob) // 2, len(blob) - 1):
        _corrupt(saved, blob[:cut])


def test_trailing_bytes(saved):
    _corrupt(saved, saved.read_bytes() + b"\0")


def test_oversized_dims(tmp_path):
    blob = b"FN2E" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"t" + struct.pack("<BI", 1, 2**31)
    _corrupt(tmp_path / "c.fn2e", blob)


def test_bad_descriptor_json(tmp_path):
    blob = b"FN2E" + struct.pack("<II", 1, 0) + struct.pack("<I", 3) + b"{x}"
    _corrupt(tmp_path / "c.fn2e", blob)


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "absent.fn2e")


def test_unknown_tensors_are_ignored_with_warning(tmp_path, tiny):
    net = tiny.student()
    tensors = {k: t.data for k, t in net.params.items()}
    tensors["stray"] = np.zeros(2, np.float32)
    write_checkpoint(tmp_path / "c.fn2e", tensors, {"network": net.descriptor(), "provenance": {}})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        back, _, _ = load_network(tmp_path / "c.fn2e")
    assert any("stray" in str(w.message) for w in caught)
    assert back.checksum() == net.checksum()


def test_descriptor_without_network_section(tmp_path):
    write_checkpoint(tmp_path / "c.fn2e", {}, {"provenance": {}})
    with pytest.raises(FormatError):
        load_network(tmp_path / "c.fn2e")
