import numpy as np
import pytest

from datr.numerics import precision
from datr.params import (ParamStore, domain_name, kaiming_normal, namespace_of, shared_name,
                         trunc_normal)


def test_namespaces():
    assert shared_name("a/b") == "shared/a/b"
    assert domain_name("head", "a/b") == "domain/head/a/b"
    assert namespace_of("shared/a/b") == "shared"
    assert namespace_of("domain/head/a/b") == "domain/head"
    with pytest.raises(KeyError):
        namespace_of("loose")
    with pytest.raises(KeyError):
        namespace_of("domain/x")


def make_store():
    s = ParamStore()
    s.create(shared_name("w"), np.ones((2, 3)))
    s.create(domain_name("a", "q"), np.zeros(4))
    s.create(domain_name("b", "q"), np.zeros(4))
    return s


def test_store_queries():
    s = make_store()
    assert len(s) == 3
    assert s.domains() == ["a", "b"]
    assert s.count() == 14 and s.count("shared") == 6 and s.count("domain/a") == 4
    assert s.names("domain/b") == ["domain/b/q"]
    with pytest.raises(KeyError):
        s.create(shared_name("w"), np.ones(1))
    with pytest.raises(KeyError, match="unknown parameter"):
        s["shared/missing"]
    with pytest.raises(KeyError):
        s.create("nonamespace", np.ones(1))


def test_store_dtype_follows_precision():
    with precision(np.float64):
        s = make_store()
    assert all(p.dtype == np.float64 for p in s.values())
    assert make_store()[shared_name("w")].dtype == np.float32


def test_checksum_tracks_only_its_namespace():
    s = make_store()
    before_shared, before_a = s.checksum("shared"), s.checksum("domain/a")
    s[domain_name("b", "q")].data = s[domain_name("b", "q")].data + 1
    assert s.checksum("shared") == before_shared and s.checksum("domain/a") == before_a
    s[shared_name("w")].data[0, 0] = np.nextafter(np.float32(1), np.float32(2))
    assert s.checksum("shared") != before_shared


def test_snapshot_and_load_values():
    s = make_store()
    snap = s.snapshot()
    s[shared_name("w")].data = s[shared_name("w")].data * 3
    s.load_values(snap)
    np.testing.assert_array_equal(s[shared_name("w")].data, 1)
    snap[shared_name("w")][:] = 9  # the snapshot is a copy
    assert s[shared_name("w")].data[0, 0] == 1
    with pytest.raises(ValueError, match="shape mismatch"):
        s.load_values({shared_name("w"): np.ones(3)})


def test_zero_grad():
    s = make_store()
    for p in s.values():
        p.grad = np.ones(p.shape)
    s.zero_grad()
    assert all(p.grad is None for p in s.values())


def test_initialisers():
    rng = np.random.default_rng(0)
    t = trunc_normal(rng, (20000,), std=0.02)
    assert np.abs(t).max() <= 0.04
    assert abs(t.std() - 0.02 * 0.8796) < 5e-4  # std of a unit normal truncated at 2
    k = kaiming_normal(rng, (200, 100), fan_in=50)
    assert abs(k.std() - np.sqrt(2 / 50)) < 0.01
