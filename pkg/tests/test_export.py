import numpy as np
import pytest

from pfskd.export import (CoordinateError, class_coverage, dump, feature_coords, heatmap, overlap_scores,
                          pfs_rows, read_pnm, sample_interior, top_decile_overlap)
from pfskd.models import build, student_spec, teacher_spec


def test_feature_coords():
    assert feature_coords(47, 0, 48, 48, 4) == (11, 0)
    for bad in ((-1, 0), (0, 48), (48, 3)):
        with pytest.raises(CoordinateError):
            feature_coords(*bad, 48, 48, 4)


def test_constant_features_give_flat_row():
    # zero padding breaks constancy at the borders of a real net, so make the features constant directly
    net = build(student_spec(), 0)
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k]) if k.endswith("weight") else np.full_like(net.params[k], 0.3)
    row = pfs_rows(net, np.full((3, 16, 16), 0.5, np.float32), [(5, 7)])[0]
    np.testing.assert_allclose(row, 1 / 16, atol=1e-6)
    gray, lo, hi = heatmap(row)
    assert hi - lo < 1e-6


def test_heatmap_scaling_recoverable(rng):
    row = rng.random((4, 5))
    gray, lo, hi = heatmap(row)
    assert gray.min() == 0 and gray.max() == 255
    np.testing.assert_allclose(lo + gray / 255 * (hi - lo), row, atol=(hi - lo) / 510 + 1e-15)


def test_dump_files(tmp_path, rng):
    net = build(teacher_spec(), 0)
    img = rng.random((3, 16, 16)).astype(np.float32)
    paths = dump(net, img, [(3, 9)], tmp_path, tag="x")
    names = sorted(p.name for p in paths)
    assert names == ["x_y3_x9.csv", "x_y3_x9.input.ppm", "x_y3_x9.pgm", "x_y3_x9.scale.txt"]
    gray = read_pnm(tmp_path / "x_y3_x9.pgm")
    assert gray.shape == (4, 4)
    raw = np.loadtxt(tmp_path / "x_y3_x9.csv", delimiter=",")
    assert raw.shape == (4, 4) and raw.sum() == pytest.approx(1, abs=1e-5)
    rgb = read_pnm(tmp_path / "x_y3_x9.input.ppm")
    assert rgb.shape == (16, 16, 3) and tuple(rgb[3, 9]) == (255, 0, 0)
    lo, hi = (float(l.split()[1]) for l in (tmp_path / "x_y3_x9.scale.txt").read_text().splitlines())
    assert lo == raw.min() and hi == raw.max()


def test_dump_rejects_bad_pixel(tmp_path, rng):
    with pytest.raises(CoordinateError):
        dump(build(student_spec(), 0), rng.random((3, 16, 16)), [(-1, 0)], tmp_path)
    assert not any(tmp_path.iterdir())


def test_feature_source_on_pfs_less_net(rng):
    spec = student_spec()
    spec.pfs_variant = "none"
    net = build(spec, 0)
    img = rng.random((3, 16, 16)).astype(np.float32)
    with pytest.raises(ValueError):
        pfs_rows(net, img, [(0, 0)])
    assert pfs_rows(net, img, [(0, 0)], source="feature")[0].shape == (4, 4)


def test_overlap_helpers():
    lbl = np.zeros((8, 8), np.uint8)
    lbl[:4, :4] = 1
    cov = class_coverage(lbl, 1, 4)
    assert np.array_equal(cov, [[1, 0], [0, 0]])
    row = np.array([[0.7, 0.1], [0.1, 0.1]])
    assert top_decile_overlap(row, cov) == 1.0
    lbl[0, :] = 2  # cell (0,0) now 12/16 class 1
    assert class_coverage(lbl, 1, 4)[0, 0] == 0.75


def test_overlap_scores_and_sampling(rng):
    lbls = np.zeros((2, 16, 16), np.uint8)
    lbls[0, 4:12, 4:12] = 1
    picks = sample_interior(lbls, 5, seed=0, stride=4)
    assert all(i == 0 and 4 <= y < 12 and 4 <= x < 12 for i, y, x in picks)
    s = overlap_scores(build(student_spec(), 0), rng.random((3, 16, 16)).astype(np.float32), lbls[0], [(5, 5)])[0]
    assert s.cls == 1 and s.prior == 0.25 and 0 <= s.overlap <= 1
    with pytest.raises(ValueError):
        sample_interior(lbls, 100, seed=0, stride=4)
