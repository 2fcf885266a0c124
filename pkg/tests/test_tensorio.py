import struct

import numpy as np
import pytest

from mumo.tensorio import Container, ContainerError, read_container, tensor_digest, write_container


def sample():
    rng = np.random.default_rng(0)
    return Container(2, [3, -1, 7], {"a": rng.normal(size=(2, 3)).astype(np.float32),
                                     "b.c": np.arange(4, dtype=np.float32)}, link=bytes(range(32)))


def test_round_trip(tmp_path):
    c = sample()
    p = tmp_path / "x.bin"
    write_container(p, c)
    r = read_container(p)
    assert r.kind == 2 and r.ints == [3, -1, 7] and r.link == bytes(range(32))
    assert tensor_digest(r.tensors) == tensor_digest(c.tensors)
    for k in c.tensors:
        assert np.array_equal(r.tensors[k], c.tensors[k])


def test_layout_little_endian(tmp_path):
    p = tmp_path / "x.bin"
    write_container(p, sample())
    raw = p.read_bytes()
    assert raw[:4] == b"MUMO"
    assert struct.unpack_from("<III", raw, 4) == (1, 2, 3)
    assert struct.unpack_from("<3i", raw, 16) == (3, -1, 7)


def test_digest_sensitive():
    c = sample()
    d = tensor_digest(c.tensors)
    c.tensors["a"][0, 0] += 1e-6
    assert tensor_digest(c.tensors) != d


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\x00",
                                    lambda b: b[:10]])
def test_corrupt(tmp_path, mutate):
    p = tmp_path / "x.bin"
    write_container(p, sample())
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(ContainerError):
        read_container(p)
