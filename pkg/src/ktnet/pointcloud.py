"""Point clouds: data model, xyz/PLY I/O, normalisation and the synthetic
unpaired dataset (tables, chairs, lamps built from boxes and ellipsoids)."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ellipeinc, ellipkinc


class Role(str, enum.Enum):
    COMPLETE = "complete"
    PARTIAL = "partial"
    PREDICTED = "predicted"


class ParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class UnsupportedFormatError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    category: str = "unknown"
    role: Role = Role.COMPLETE
    instance_id: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts
        self.role = Role(self.role)

    def __len__(self):
        return len(self.points)

    def with_points(self, points, role: Role | None = None) -> PointCloud:
        return PointCloud(points, self.category, role or self.role, self.instance_id)


def as_points(x) -> np.ndarray:
    """Coerce a PointCloud or array-like to a float64 (N, 3) array."""
    if isinstance(x, PointCloud):
        return x.points
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


# ---------------------------------------------------------------- file I/O

def format_coord(x: float) -> str:
    """Shortest decimal that round-trips the float64 exactly ("1" for 1.0)."""
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save(cloud: PointCloud, path, fmt: str = "xyz", sidecar: bool = False):
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    path = Path(path)
    if len(cloud.points) == 0:
        raise ValueError("refusing to write an empty cloud")
    lines = [" ".join(format_coord(c) for c in p) for p in cloud.points]
    if fmt == "xyz":
        text = "\n".join(lines) + "\n"
    elif fmt == "ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(lines)}",
                  "property double x", "property double y", "property double z", "end_header"]
        text = "\n".join(header + lines) + "\n"
    else:
        raise UnsupportedFormatError(f"unknown point-cloud format {fmt!r}")
    path.write_text(text)
    if sidecar:
        meta = {"category": cloud.category, "role": cloud.role.value, "instance_id": cloud.instance_id}
        _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def _parse_xyz(path, lines) -> list[list[float]]:
    pts = []
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(path, no, f"expected 3 coordinates, got {len(parts)}")
        try:
            pts.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(path, no, f"non-numeric coordinate in {line!r}") from None
    return pts


_PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}


def _parse_ply(path, lines) -> list[list[float]]:
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic")
    n_vertex = None
    props = []
    body_start = None
    for no in range(2, len(lines) + 1):
        tok = lines[no - 1].split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise UnsupportedFormatError(f"{path}: only ASCII PLY is supported, got {' '.join(tok[1:])}")
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex":
                raise ParseError(path, no, f"unsupported element {' '.join(tok[1:])!r}")
            try:
                n_vertex = int(tok[2])
            except ValueError:
                raise ParseError(path, no, "vertex count is not an integer") from None
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] not in _PLY_FLOAT_TYPES:
                raise ParseError(path, no, f"unsupported property {' '.join(tok[1:])!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = no
            break
        else:
            raise ParseError(path, no, f"unexpected header line {lines[no - 1]!r}")
    if body_start is None:
        raise ParseError(path, len(lines), "missing end_header")
    if n_vertex is None:
        raise ParseError(path, body_start, "missing 'element vertex' declaration")
    if props != ["x", "y", "z"]:
        raise ParseError(path, body_start, f"vertex properties must be x y z, got {props}")
    body = [(body_start + i + 1, ln) for i, ln in enumerate(lines[body_start:]) if ln.strip()]
    if len(body) != n_vertex:
        raise ParseError(path, body_start, f"header declares {n_vertex} vertices, found {len(body)}")
    pts = []
    for no, ln in body:
        parts = ln.split()
        if len(parts) != 3:
            raise ParseError(path, no, f"expected 3 values, got {len(parts)}")
        try:
            pts.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(path, no, f"non-numeric value in {ln.strip()!r}") from None
    return pts


def load(path, fmt: str | None = None) -> PointCloud:
    """Read an xyz or ASCII-PLY file; category/role come from a
    ``<file>.json`` sidecar when present."""
    path = Path(path)
    if fmt is None:
        fmt = "ply" if path.suffix.lower() == ".ply" else "xyz"
    raw = path.read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise UnsupportedFormatError(f"{path}: not an ASCII file (binary PLY is unsupported)") from None
    lines = text.splitlines()
    if fmt == "xyz":
        pts = _parse_xyz(path, lines)
    elif fmt == "ply":
        pts = _parse_ply(path, lines)
    else:
        raise UnsupportedFormatError(f"unknown point-cloud format {fmt!r}")
    if not pts:
        raise ParseError(path, len(lines), "no points in file")
    meta = {}
    sc = _sidecar(path)
    if sc.exists():
        meta = json.loads(sc.read_text())
    return PointCloud(np.array(pts, dtype=np.float64), meta.get("category", "unknown"),
                      Role(meta.get("role", "complete")), meta.get("instance_id"))


# ---------------------------------------------------------- preprocessing

def normalize(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """Centre on the centroid and scale the farthest point to unit norm.

    Returns ``(normalized, offset, scale)`` with
    ``original = normalized * scale + offset``.
    """
    pts = as_points(cloud)
    offset = pts.mean(axis=0)
    centered = pts - offset
    scale = float(np.sqrt((centered**2).sum(axis=1)).max())
    if not scale > 0:
        raise ValueError("cannot normalize a degenerate cloud (all points identical)")
    out = centered / scale
    if isinstance(cloud, PointCloud):
        return cloud.with_points(out), offset, scale
    return PointCloud(out), offset, scale


def make_partial(cloud: PointCloud, viewpoint, keep_fraction: float) -> PointCloud:
    """Keep the ceil(keep_fraction * N) points facing ``viewpoint``.

    Points are ranked by their dot product with the view direction; kept
    points stay in their original order, so the result is a subset.
    """
    if not 0.0 < keep_fraction < 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1), got {keep_fraction}")
    v = np.asarray(viewpoint, dtype=np.float64)
    v = v / np.linalg.norm(v)
    pts = as_points(cloud)
    # tolerance stops float noise in keep_fraction * N from rounding up a whole count
    n_keep = max(1, math.ceil(keep_fraction * len(pts) - 1e-9))
    score = pts @ v
    keep = np.sort(np.argsort(-score, kind="stable")[:n_keep])
    base = cloud if isinstance(cloud, PointCloud) else PointCloud(pts)
    return base.with_points(pts[keep], role=Role.PARTIAL)


def resample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Return exactly ``n`` points: random subset, or all plus random repeats."""
    m = len(points)
    if m == n:
        return points
    if m > n:
        return points[np.sort(rng.choice(m, n, replace=False))]
    extra = rng.choice(m, n - m, replace=True)
    return np.concatenate([points, points[extra]], axis=0)


# ------------------------------------------------------- synthetic shapes

@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def __post_init__(self):
        if min(self.half) <= 0:
            raise ValueError(f"box half-extents must be positive, got {self.half}")

    def face_areas(self) -> np.ndarray:
        hx, hy, hz = self.half
        # faces: -x, +x, -y, +y, -z, +z
        return np.array([4 * hy * hz] * 2 + [4 * hx * hz] * 2 + [4 * hx * hy] * 2)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        areas = self.face_areas()
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        u[np.arange(n), axis] = sign
        return np.asarray(self.center) + u * np.asarray(self.half)

    def surface_distance(self, pts: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to the box surface."""
        q = np.abs(pts - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def __post_init__(self):
        if min(self.radii) <= 0:
            raise ValueError(f"ellipsoid radii must be positive, got {self.radii}")

    def area(self) -> float:
        a, b, c = sorted(self.radii, reverse=True)
        if a - c <= 1e-12 * a:
            return 4.0 * math.pi * a * a
        phi = math.acos(c / a)
        m = (a * a * (b * b - c * c)) / (b * b * (a * a - c * c))
        s = math.sin(phi)
        return 2 * math.pi * c * c + 2 * math.pi * a * b / s * (
            ellipeinc(phi, m) * s * s + ellipkinc(phi, m) * math.cos(phi) ** 2)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # sphere sample mapped through the axes, thinned by the local area factor
        a, b, c = self.radii
        gmax = max(b * c, a * c, a * b)
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.normal(size=(2 * (n - len(out)) + 16, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
            acc = u[rng.uniform(size=len(u)) * gmax < g]
            out = np.concatenate([out, acc * np.asarray(self.radii)])
        return np.asarray(self.center) + out[:n]

    def surface_distance(self, pts: np.ndarray) -> np.ndarray:
        # implicit-function residual; exact zero set is the surface
        q = (pts - np.asarray(self.center)) / np.asarray(self.radii)
        return np.abs(np.sqrt((q**2).sum(axis=1)) - 1.0) * min(self.radii)


CATEGORIES = ("table", "chair", "lamp")


@dataclass(frozen=True)
class PrimitiveSpec:
    kind: str
    parts: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in CATEGORIES:
            raise ValueError(f"unknown primitive kind {self.kind!r}; expected one of {CATEGORIES}")
        if not self.parts:
            raise ValueError("a primitive needs at least one part")

    def areas(self) -> np.ndarray:
        return np.array([p.area() for p in self.parts])


def table_spec(width, depth, height, top_thick, leg_thick) -> PrimitiveSpec:
    if min(width, depth, height, top_thick, leg_thick) <= 0:
        raise ValueError("table dimensions must be positive")
    leg_h = height - top_thick
    if leg_h <= 0 or 2 * leg_thick >= min(width, depth):
        raise ValueError("table legs do not fit under the top")
    parts = [Box((0.0, 0.0, height - top_thick / 2), (width / 2, depth / 2, top_thick / 2))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx = sx * (width / 2 - leg_thick / 2)
            cy = sy * (depth / 2 - leg_thick / 2)
            parts.append(Box((cx, cy, leg_h / 2), (leg_thick / 2, leg_thick / 2, leg_h / 2)))
    return PrimitiveSpec("table", tuple(parts))


def chair_spec(width, depth, seat_height, seat_thick, back_height, back_thick, leg_thick) -> PrimitiveSpec:
    base = table_spec(width, depth, seat_height, seat_thick, leg_thick)
    if min(back_height, back_thick) <= 0 or back_thick >= depth:
        raise ValueError("chair back dimensions must be positive and thinner than the seat")
    back = Box((0.0, -depth / 2 + back_thick / 2, seat_height + back_height / 2),
               (width / 2, back_thick / 2, back_height / 2))
    return PrimitiveSpec("chair", base.parts + (back,))


def lamp_spec(stem_height, stem_thick, head_radii) -> PrimitiveSpec:
    if min(stem_height, stem_thick, *head_radii) <= 0:
        raise ValueError("lamp dimensions must be positive")
    stem = Box((0.0, 0.0, stem_height / 2), (stem_thick / 2, stem_thick / 2, stem_height / 2))
    head = Ellipsoid((0.0, 0.0, stem_height + head_radii[2]), tuple(head_radii))
    return PrimitiveSpec("lamp", (stem, head))


def random_primitive(kind: str, rng: np.random.Generator) -> PrimitiveSpec:
    """Draw a primitive of ``kind`` with dimensions from fixed ranges."""
    U = rng.uniform
    if kind == "table":
        return table_spec(U(1.0, 1.6), U(0.6, 1.0), U(0.6, 0.9), U(0.04, 0.1), U(0.05, 0.1))
    if kind == "chair":
        return chair_spec(U(0.45, 0.6), U(0.45, 0.6), U(0.4, 0.5), U(0.04, 0.08),
                          U(0.4, 0.6), U(0.04, 0.08), U(0.04, 0.07))
    if kind == "lamp":
        return lamp_spec(U(0.8, 1.4), U(0.04, 0.1), (U(0.2, 0.35), U(0.2, 0.35), U(0.15, 0.3)))
    raise ValueError(f"unknown primitive kind {kind!r}; expected one of {CATEGORIES}")


def sample_primitive(spec: PrimitiveSpec, n: int, seed: int) -> PointCloud:
    """Sample ``n`` points uniformly by area over all part surfaces."""
    if n < 1:
        raise ValueError(f"need at least one point, got {n}")
    rng = np.random.default_rng(seed)
    areas = spec.areas()
    counts = rng.multinomial(n, areas / areas.sum())
    pts = np.concatenate([part.sample(int(c), rng) for part, c in zip(spec.parts, counts) if c > 0])
    # interleave parts so point order carries no part information
    pts = pts[rng.permutation(n)]
    return PointCloud(pts, spec.kind, Role.COMPLETE)


# ---------------------------------------------------------------- dataset

@dataclass
class DatasetSplit:
    complete_train: list[PointCloud] = field(default_factory=list)
    partial_train: list[PointCloud] = field(default_factory=list)
    paired_test: list[tuple[PointCloud, PointCloud]] = field(default_factory=list)

    def categories(self) -> list[str]:
        cats = {c.category for c in self.complete_train} | {c.category for c in self.partial_train}
        cats |= {gt.category for _, gt in self.paired_test}
        return sorted(cats)

    def for_category(self, category: str) -> DatasetSplit:
        return DatasetSplit(
            [c for c in self.complete_train if c.category == category],
            [c for c in self.partial_train if c.category == category],
            [(p, g) for p, g in self.paired_test if g.category == category],
        )


def split_counts(count: int, split=(0.4, 0.4, 0.2)) -> tuple[int, int, int]:
    if count < 3:
        raise ValueError(f"need at least 3 instances per category to split, got {count}")
    n_c = int(round(count * split[0]))
    n_p = int(round(count * split[1]))
    n_t = count - n_c - n_p
    if min(n_c, n_p, n_t) < 1:
        raise ValueError(f"{count} instances are too few for split {split}")
    return n_c, n_p, n_t


def random_viewpoint(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def make_instance(category: str, index: int, n_points: int, seed: int) -> PointCloud:
    ss = np.random.SeedSequence([seed, CATEGORIES.index(category), index])
    shape_seed, sample_seed = ss.generate_state(2)
    spec = random_primitive(category, np.random.default_rng(shape_seed))
    cloud, _, _ = normalize(sample_primitive(spec, n_points, int(sample_seed)))
    cloud.instance_id = f"{category}-{index:04d}"
    return cloud


def build_dataset(categories=CATEGORIES, counts=30, seed: int = 0, n_points: int = 256,
                  keep_fraction: float = 0.5, split=(0.4, 0.4, 0.2)) -> DatasetSplit:
    """Generate an instance-disjoint unpaired split.

    Per category the instance pool is cut three ways: complete clouds for
    training, partial views of *other* instances for training, and
    (partial, complete) pairs of a third set for testing.
    """
    if isinstance(counts, int):
        counts = {c: counts for c in categories}
    ds = DatasetSplit()
    for cat in categories:
        n_c, n_p, n_t = split_counts(counts[cat], split)
        view_rng = np.random.default_rng(np.random.SeedSequence([seed, CATEGORIES.index(cat), 1_000_003]))
        for i in range(n_c + n_p + n_t):
            full = make_instance(cat, i, n_points, seed)
            view = random_viewpoint(view_rng)
            if i < n_c:
                ds.complete_train.append(full)
            elif i < n_c + n_p:
                ds.partial_train.append(make_partial(full, view, keep_fraction))
            else:
                ds.paired_test.append((make_partial(full, view, keep_fraction), full))
    return ds


def write_dataset(ds: DatasetSplit, out_dir, meta: dict | None = None) -> Path:
    """Write every cloud as xyz plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    entries = []

    def put(cloud: PointCloud, split: str):
        rel = Path(split) / cloud.role.value / f"{cloud.instance_id}.xyz"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        save(cloud, out / rel, "xyz", sidecar=True)
        entries.append({"path": rel.as_posix(), "category": cloud.category, "role": cloud.role.value,
                        "instance_id": cloud.instance_id, "split": split})

    for c in ds.complete_train:
        put(c, "complete_train")
    for c in ds.partial_train:
        put(c, "partial_train")
    for p, g in ds.paired_test:
        put(p, "test")
        put(g, "test")
    manifest = {"version": 1, "meta": meta or {}, "clouds": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> DatasetSplit:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    ds = DatasetSplit()
    test: dict[str, dict[str, PointCloud]] = {}
    for e in manifest["clouds"]:
        cloud = load(root / e["path"])
        cloud.category = e["category"]
        cloud.role = Role(e["role"])
        cloud.instance_id = e["instance_id"]
        if e["split"] == "complete_train":
            ds.complete_train.append(cloud)
        elif e["split"] == "partial_train":
            ds.partial_train.append(cloud)
        elif e["split"] == "test":
            test.setdefault(e["instance_id"], {})[e["role"]] = cloud
        else:
            raise ValueError(f"unknown split {e['split']!r} in {manifest_path}")
    for iid, pair in test.items():
        if set(pair) != {"partial", "complete"}:
            raise ValueError(f"test instance {iid} lacks a partial/complete pair")
        ds.paired_test.append((pair["partial"], pair["complete"]))
    return ds
