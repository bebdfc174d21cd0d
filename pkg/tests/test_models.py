import numpy as np
import pytest

from pfskd.models import (SegNetSpec, SpecMismatchError, build, checkpoint_bytes, checkpoint_from_bytes,
                          load_checkpoint, save_checkpoint, student_spec, teacher_spec)
from pfskd.tensor import TensorFormatError


def test_default_specs():
    t, s = teacher_spec(), student_spec()
    assert t.pfs_variant == "c_pfs" and s.pfs_variant == "s_pfs"
    assert t.output_stride == s.output_stride == 4
    assert build(t, 0).num_parameters() > build(s, 0).num_parameters()


def test_build_deterministic():
    a, b = build(student_spec(), 3), build(student_spec(), 3)
    assert a.param_hash() == b.param_hash()
    assert a.param_hash() != build(student_spec(), 4).param_hash()
    assert float(a.params["pfs.gamma"]) == 0.0


def test_forward_shapes_and_rows(rng):
    x = rng.random((2, 3, 48, 48)).astype(np.float32)
    for spec, c in ((teacher_spec(), 32), (student_spec(), 16)):
        out = build(spec, 0).forward(x)
        assert out["logits"].shape == (2, 4, 48, 48)
        assert out["feat"].shape == (2, c, 12, 12)
        assert out["pfs"].shape == (2, 144, 144)
        np.testing.assert_allclose(out["pfs"].M.sum(-1), 1, atol=1e-5)


def test_forward_deterministic_and_gamma_zero_identity(rng):
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    net = build(student_spec(), 1)
    a, b = net.forward(x), net.forward(x)
    assert np.array_equal(a["logits"], b["logits"])
    plain_spec = student_spec()
    plain_spec.pfs_variant = "none"
    plain = build(plain_spec, 1)
    assert np.array_equal(plain.forward(x)["logits"], a["logits"])


def test_forward_rejects_bad_size(rng):
    with pytest.raises(ValueError):
        build(student_spec(), 0).forward(rng.random((1, 3, 18, 18)))


def test_invalid_spec():
    with pytest.raises(ValueError):
        SegNetSpec(stem=[(8, 2)], body=[(8, 2)], pfs_variant="fancy")


def test_checkpoint_round_trip(tmp_path, rng):
    net = build(teacher_spec(), 5)
    net.params["pfs.gamma"] = np.array(0.25, np.float32)
    p = tmp_path / "t.pfck"
    save_checkpoint(net, p)
    back = load_checkpoint(p)
    assert back.spec == net.spec
    assert checkpoint_bytes(back) == checkpoint_bytes(net)
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(back.forward(x)["logits"], net.forward(x)["logits"])


def test_checkpoint_errors():
    buf = checkpoint_bytes(build(student_spec(), 0))
    with pytest.raises(TensorFormatError):
        checkpoint_from_bytes(buf[:-10])
    with pytest.raises(TensorFormatError):
        checkpoint_from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(SpecMismatchError):
        checkpoint_from_bytes(buf, expected=teacher_spec())
