import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ktnet import metrics
from ktnet.pointcloud import (
    CATEGORIES, Box, Ellipsoid, ParseError, PointCloud, PrimitiveSpec, Role, UnsupportedFormatError,
    build_dataset, chair_spec, lamp_spec, load, load_dataset, make_partial, normalize,
    random_primitive, resample, sample_primitive, save, split_counts, table_spec, write_dataset,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
clouds = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=finite)


# ------------------------------------------------------------------ model

def test_cloud_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan, 0.0]])
    with pytest.raises(ValueError):
        PointCloud([[0.0, 1.0]])


# -------------------------------------------------------------------- I/O

def test_load_xyz_example(tmp_path):
    f = tmp_path / "a.xyz"
    f.write_text("0 0 0\n1 0 0\n")
    c = load(f)
    assert c.points.tolist() == [[0, 0, 0], [1, 0, 0]]
    assert c.role is Role.COMPLETE and c.category == "unknown"


def test_load_xyz_ignores_comments_and_blank_lines(tmp_path):
    f = tmp_path / "a.xyz"
    f.write_text("# header\n\n1 2 3  # trailing\n")
    assert load(f).points.tolist() == [[1, 2, 3]]


def test_load_xyz_reports_line_number(tmp_path):
    f = tmp_path / "bad.xyz"
    f.write_text("0 0 0\n1 0\n")
    with pytest.raises(ParseError) as e:
        load(f)
    assert e.value.line_no == 2


def test_load_ply_float_example(tmp_path):
    f = tmp_path / "a.ply"
    f.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n")
    assert load(f).points.tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0]]


def test_load_ply_binary_is_unsupported(tmp_path):
    f = tmp_path / "a.ply"
    f.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\n"
                 "property float y\nproperty float z\nend_header\n")
    with pytest.raises(UnsupportedFormatError):
        load(f)


def test_load_ply_bad_header_reports_line(tmp_path):
    f = tmp_path / "a.ply"
    f.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float q\n"
                 "property float z\nend_header\n0 0 0\n")
    with pytest.raises(ParseError):
        load(f)


def test_save_canonical_decimal(tmp_path):
    f = tmp_path / "p.xyz"
    save(PointCloud([[1.0, 2.0, 3.0]]), f)
    assert f.read_text() == "1 2 3\n"


@settings(max_examples=200, deadline=None)
@given(clouds)
def test_xyz_round_trip_bit_exact(tmp_path_factory, pts):
    f = tmp_path_factory.mktemp("rt") / "c.xyz"
    save(PointCloud(pts), f)
    assert np.array_equal(load(f).points, pts)


def test_round_trip_1000_random_clouds(tmp_path):
    rng = np.random.default_rng(7)
    for i in range(1000):
        pts = rng.normal(size=(rng.integers(1, 12), 3)) * 10.0 ** rng.integers(-8, 8)
        f = tmp_path / f"{i % 3}.xyz"
        save(PointCloud(pts), f)
        assert np.array_equal(load(f).points, pts)


def test_ply_round_trip_and_sidecar(tmp_path, rng):
    c = PointCloud(rng.normal(size=(20, 3)), "chair", Role.PARTIAL, "chair-0003")
    f = tmp_path / "c.ply"
    save(c, f, "ply", sidecar=True)
    back = load(f)
    assert np.array_equal(back.points, c.points)
    assert (back.category, back.role, back.instance_id) == ("chair", Role.PARTIAL, "chair-0003")


def test_save_unknown_format(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        save(PointCloud([[0.0, 0.0, 0.0]]), tmp_path / "x.obj", "obj")


# ---------------------------------------------------------- normalisation

def test_normalize_example():
    out, offset, scale = normalize(PointCloud([[2.0, 0, 0], [-2.0, 0, 0]]))
    assert out.points.tolist() == [[1, 0, 0], [-1, 0, 0]]
    assert offset.tolist() == [0, 0, 0] and scale == 2.0


def test_normalize_degenerate():
    with pytest.raises(ValueError):
        normalize(PointCloud([[1.0, 1, 1], [1.0, 1, 1]]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalize_invariants_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(rng.integers(2, 50), 3)) * rng.uniform(0.1, 10) + rng.normal(size=3) * 5
    out, offset, scale = normalize(PointCloud(P))
    assert np.abs(out.points.mean(axis=0)).max() < 1e-9
    norms = np.linalg.norm(out.points, axis=1)
    assert 0 < norms.max() <= 1 + 1e-15
    assert np.allclose(out.points * scale + offset, P, atol=1e-12 * max(1.0, np.abs(P).max()))
    again, _, _ = normalize(out)
    assert np.abs(again.points - out.points).max() < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalize_similarity_invariant(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(rng.integers(2, 40), 3))
    a, t = rng.uniform(0.1, 10), rng.normal(size=3) * 3
    n1, _, _ = normalize(PointCloud(P))
    n2, _, _ = normalize(PointCloud(a * P + t))
    assert np.abs(n1.points - n2.points).max() < 1e-12


# -------------------------------------------------------------- partials

def test_make_partial_near_one_keeps_999():
    rng = np.random.default_rng(0)
    c, _, _ = normalize(PointCloud(rng.normal(size=(1000, 3))))
    assert len(make_partial(c, [0, 0, 1], 0.999)) == 999


@pytest.mark.parametrize("bad", [0.0, 1.0, 1.5, -0.2])
def test_make_partial_rejects_fraction(bad):
    with pytest.raises(ValueError, match="keep_fraction"):
        make_partial(PointCloud([[0.0, 0, 0], [1.0, 0, 0]]), [1, 0, 0], bad)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_make_partial_properties(seed, frac):
    rng = np.random.default_rng(seed)
    c, _, _ = normalize(PointCloud(rng.normal(size=(rng.integers(2, 80), 3))))
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    part = make_partial(c, v, frac)
    assert part.role is Role.PARTIAL
    assert len(part) == max(1, int(np.ceil(frac * len(c) - 1e-9)))
    # subset in original order
    rows = {tuple(p) for p in c.points}
    assert all(tuple(p) in rows for p in part.points)
    kept = np.array([any(np.array_equal(p, q) for q in part.points) for p in c.points])
    if (~kept).any():
        assert (c.points[kept] @ v).min() >= (c.points[~kept] @ v).max()
    assert metrics.ucd(part.points, c.points) == 0.0


def test_resample_sizes(rng):
    P = rng.normal(size=(10, 3))
    assert resample(P, 10, rng) is P
    down = resample(P, 4, rng)
    assert len(down) == 4 and all(any(np.array_equal(d, p) for p in P) for d in down)
    up = resample(P, 25, rng)
    assert len(up) == 25 and np.array_equal(up[:10], P)


# ------------------------------------------------------------- primitives

def test_sample_primitive_deterministic():
    spec = random_primitive("chair", np.random.default_rng(3))
    a, b = sample_primitive(spec, 300, 11), sample_primitive(spec, 300, 11)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, sample_primitive(spec, 300, 12).points)


@pytest.mark.parametrize("kind", CATEGORIES)
def test_sampled_points_lie_on_part_surfaces(kind):
    spec = random_primitive(kind, np.random.default_rng(1))
    pts = sample_primitive(spec, 2000, 5).points
    dist = np.min([p.surface_distance(pts) for p in spec.parts], axis=0)
    assert dist.max() < 1e-9


def test_box_face_area_and_ellipsoid_sphere_area():
    assert Box((0, 0, 0), (1, 2, 3)).area() == pytest.approx(2 * (4 * 2 * 3 + 4 * 1 * 3 + 4 * 1 * 2))
    assert Ellipsoid((0, 0, 0), (2, 2, 2)).area() == pytest.approx(4 * np.pi * 4)


def test_ellipsoid_area_matches_quadrature():
    # surface integral in spherical coordinates, midpoint rule
    a, b, c = 0.3, 0.25, 0.18
    th = (np.arange(2000) + 0.5) * np.pi / 2000
    ph = (np.arange(4000) + 0.5) * 2 * np.pi / 4000
    T, Ph = np.meshgrid(th, ph, indexing="ij")
    st_, ct = np.sin(T), np.cos(T)
    cp, sp = np.cos(Ph), np.sin(Ph)
    n = np.stack([b * c * st_**2 * cp, a * c * st_**2 * sp, a * b * st_ * ct])
    area = np.linalg.norm(n, axis=0).sum() * (np.pi / 2000) * (2 * np.pi / 4000)
    assert Ellipsoid((0, 0, 0), (a, b, c)).area() == pytest.approx(area, rel=1e-5)


SEPARATED = PrimitiveSpec("table", (
    Box((0.0, 0.0, 0.0), (0.5, 0.2, 0.05)),
    Box((2.0, 0.0, 0.0), (0.05, 0.05, 0.6)),
    Ellipsoid((0.0, 3.0, 0.0), (0.3, 0.2, 0.15)),
))


@pytest.mark.parametrize("spec", [SEPARATED, lamp_spec(1.0, 0.06, (0.3, 0.25, 0.2))])
def test_part_fractions_follow_area(spec):
    # parts that touch at most on a measure-zero set, so nearest-part ownership is exact
    n = 10000
    pts = sample_primitive(spec, n, 9).points
    owner = np.stack([p.surface_distance(pts) for p in spec.parts]).argmin(axis=0)
    p = spec.areas() / spec.areas().sum()
    counts = np.bincount(owner, minlength=len(p))
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_ellipsoid_sampling_is_area_uniform():
    # upper and lower caps of a squashed ellipsoid get area-proportional shares
    e = Ellipsoid((0, 0, 0), (0.3, 0.3, 0.1))
    pts = e.sample(20000, np.random.default_rng(0))
    frac_band = np.mean(np.abs(pts[:, 2]) < 0.05)
    # band |z| < c/2 by quadrature on the surface of revolution
    z = np.linspace(-0.1, 0.1, 400001)
    r = 0.3 * np.sqrt(np.clip(1 - (z / 0.1) ** 2, 0, None))
    dr = np.gradient(r, z)
    w = 2 * np.pi * r * np.sqrt(1 + dr**2)
    band = np.trapezoid(np.where(np.abs(z) < 0.05, w, 0), z) / e.area()
    assert frac_band == pytest.approx(band, abs=4 * np.sqrt(band * (1 - band) / 20000))


@pytest.mark.parametrize("maker,args", [
    (table_spec, (1.0, 0.8, 0.7, 0.0, 0.05)),
    (table_spec, (1.0, 0.8, 0.05, 0.1, 0.05)),
    (chair_spec, (0.5, 0.5, 0.45, 0.05, -0.5, 0.05, 0.05)),
    (lamp_spec, (1.0, 0.05, (0.2, 0.0, 0.2))),
])
def test_invalid_primitive_dimensions(maker, args):
    with pytest.raises(ValueError):
        maker(*args)


def test_unknown_primitive_kind():
    with pytest.raises(ValueError):
        random_primitive("sofa", np.random.default_rng(0))


# ---------------------------------------------------------------- dataset

def test_split_counts():
    assert split_counts(30) == (12, 12, 6)
    with pytest.raises(ValueError):
        split_counts(2)


def test_build_dataset_sizes_and_disjointness():
    ds = build_dataset(counts=30, seed=0, n_points=64)
    for cat in CATEGORIES:
        sub = ds.for_category(cat)
        assert (len(sub.complete_train), len(sub.partial_train), len(sub.paired_test)) == (12, 12, 6)
        ids = [{c.instance_id for c in sub.complete_train}, {c.instance_id for c in sub.partial_train},
               {g.instance_id for _, g in sub.paired_test}]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
        for part, gt in sub.paired_test:
            assert part.instance_id == gt.instance_id
            assert metrics.ucd(part.points, gt.points) == 0.0
    assert ds.categories() == sorted(CATEGORIES)


def test_build_dataset_roles():
    ds = build_dataset(categories=("lamp",), counts=5, n_points=32)
    assert all(c.role is Role.COMPLETE for c in ds.complete_train)
    assert all(c.role is Role.PARTIAL for c in ds.partial_train)
    assert all(p.role is Role.PARTIAL and g.role is Role.COMPLETE for p, g in ds.paired_test)


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_dataset_write_is_byte_identical_and_loads(tmp_path):
    a = write_dataset(build_dataset(counts=6, seed=3, n_points=32), tmp_path / "a", {"seed": 3})
    b = write_dataset(build_dataset(counts=6, seed=3, n_points=32), tmp_path / "b", {"seed": 3})
    assert _tree_bytes(a.parent) == _tree_bytes(b.parent)
    manifest = json.loads(a.read_text())
    assert {e["split"] for e in manifest["clouds"]} == {"complete_train", "partial_train", "test"}
    back = load_dataset(a)
    orig = build_dataset(counts=6, seed=3, n_points=32)
    assert [c.instance_id for c in back.complete_train] == [c.instance_id for c in orig.complete_train]
    assert all(np.array_equal(x.points, y.points) for x, y in zip(back.partial_train, orig.partial_train))
    assert len(back.paired_test) == len(orig.paired_test)


def test_dataset_seed_changes_output():
    a = build_dataset(categories=("table",), counts=3, seed=0, n_points=16)
    b = build_dataset(categories=("table",), counts=3, seed=1, n_points=16)
    assert not np.array_equal(a.complete_train[0].points, b.complete_train[0].points)
