"""Mesh and point-cloud input, normalization, and occupancy sampling.

Everything downstream trains and evaluates inside the unit box
[-0.5, 0.5]^3; `normalize_to_unit_box` produces the world-to-normalized
map and its record so exports can undo it.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

BOX_HALF = 0.5  # normalized shapes live in [-BOX_HALF, BOX_HALF]^3
SURFACE_BAND = 1.0 / 64.0  # near-surface offset scale, normalized units

# occupancy point origin tags
ORIGIN_NEAR_SURFACE = 0
ORIGIN_UNIFORM = 1
ORIGIN_NORMAL_OFFSET = 2

N_NEAR_SURFACE = 24576
N_UNIFORM = 4096
N_CLOUD_OFFSETS = 8

_OCC_MAGIC = b"D2CS"
_OCC_VERSION = 1
_OCC_RECORD = np.dtype([("xyz", "<f4", 3), ("inside", "u1"), ("origin", "u1")])


@dataclass
class NormalizationTransform:
    """Maps world coordinates into the unit box: x_n = scale * x_w + translate."""

    scale: float
    translate: np.ndarray  # (3,) float64

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts * self.scale + self.translate

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.translate) / self.scale

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "translate": [float(v) for v in self.translate]}

    @staticmethod
    def from_dict(d: dict) -> "NormalizationTransform":
        return NormalizationTransform(
            scale=float(d["scale"]),
            translate=np.asarray(d["translate"], dtype=np.float64),
        )

    @staticmethod
    def identity() -> "NormalizationTransform":
        return NormalizationTransform(scale=1.0, translate=np.zeros(3))


@dataclass
class TriangleMesh:
    """Indexed triangle mesh; the watertight flag is computed on first use."""

    vertices: np.ndarray  # (nv, 3) float64
    faces: np.ndarray  # (nf, 3) int64
    n_degenerate_dropped: int = 0
    _watertight: bool | None = field(default=None, repr=False)

    def face_normals_areas(self):
        v = self.vertices
        f = self.faces
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        cross = np.cross(e1, e2)
        double_area = np.linalg.norm(cross, axis=1)
        areas = 0.5 * double_area
        safe = np.where(double_area > 0, double_area, 1.0)
        normals = cross / safe[:, None]
        return normals, areas

    def is_watertight(self) -> bool:
        """True iff every undirected edge is shared by exactly two triangles."""
        if self._watertight is None:
            edges = np.concatenate(
                [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
            )
            edges = np.sort(edges, axis=1)
            _, counts = np.unique(edges, axis=0, return_counts=True)
            self._watertight = bool(np.all(counts == 2))
        return self._watertight


@dataclass
class OrientedPointCloud:
    points: np.ndarray  # (n, 3) float64
    normals: np.ndarray  # (n, 3) float64, unit length


@dataclass
class OccupancySet:
    """Labeled query points with an origin tag per point.

    Origin is one of ORIGIN_NEAR_SURFACE, ORIGIN_UNIFORM, ORIGIN_NORMAL_OFFSET.
    """

    points: np.ndarray  # (n, 3) float32, inside the unit box
    inside: np.ndarray  # (n,) bool
    origin: np.ndarray  # (n,) uint8


def _drop_degenerate(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, int]:
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    areas = np.linalg.norm(np.cross(e1, e2), axis=1)
    keep = areas > 0.0
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"dropped {dropped} zero-area triangles")
    return faces[keep], dropped


def _finish_mesh(vertices: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    if len(vertices) == 0 or len(faces) == 0:
        raise ValueError("empty mesh")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise ValueError("face index out of range")
    faces, dropped = _drop_degenerate(vertices, faces)
    if len(faces) == 0:
        raise ValueError("empty mesh after dropping degenerate triangles")
    return TriangleMesh(vertices=vertices, faces=faces, n_degenerate_dropped=dropped)


# ---------------------------------------------------------------------------
# file input


def load_mesh(path: str) -> TriangleMesh:
    """Read an OBJ, STL (binary or ascii), or OFF file by extension."""
    lower = path.lower()
    if lower.endswith(".obj"):
        return _load_obj(path)
    if lower.endswith(".stl"):
        return _load_stl(path)
    if lower.endswith(".off"):
        return _load_off(path)
    raise ValueError(f"unsupported mesh format: {path}")


def _load_obj(path: str) -> TriangleMesh:
    verts = []
    faces = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                parts = line.split()
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif line.startswith("f "):
                idx = [int(tok.split("/")[0]) for tok in line.split()[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise ValueError(f"no geometry in {path}")
    return _finish_mesh(
        np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)
    )


def _load_stl(path: str) -> TriangleMesh:
    with open(path, "rb") as fh:
        head = fh.read(5)
    if head == b"solid":
        try:
            return _load_stl_ascii(path)
        except ValueError:
            pass  # some binary STLs start with "solid"; fall through
    return _load_stl_binary(path)


def _load_stl_ascii(path: str) -> TriangleMesh:
    tris = []
    with open(path) as fh:
        cur = []
        for line in fh:
            parts = line.split()
            if parts and parts[0] == "vertex":
                cur.append([float(parts[1]), float(parts[2]), float(parts[3])])
                if len(cur) == 3:
                    tris.append(cur)
                    cur = []
    if not tris:
        raise ValueError(f"no facets in {path}")
    return _weld(np.asarray(tris, dtype=np.float64))


def _load_stl_binary(path: str) -> TriangleMesh:
    with open(path, "rb") as fh:
        fh.seek(80)
        count_bytes = fh.read(4)
        if len(count_bytes) != 4:
            raise ValueError(f"unreadable file: {path}")
        (n,) = struct.unpack("<I", count_bytes)
        raw = np.frombuffer(fh.read(n * 50), dtype=np.uint8)
    if raw.size != n * 50:
        raise ValueError(f"unreadable file: {path}")
    rec = raw.reshape(n, 50)
    floats = rec[:, :48].copy().view("<f4").reshape(n, 12)
    tris = floats[:, 3:12].astype(np.float64).reshape(n, 3, 3)
    return _weld(tris)


def _weld(tris: np.ndarray) -> TriangleMesh:
    """Merge exactly-equal vertices of a triangle soup into an indexed mesh."""
    flat = tris.reshape(-1, 3)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    faces = inverse.reshape(-1, 3).astype(np.int64)
    return _finish_mesh(uniq, faces)


def _load_off(path: str) -> TriangleMesh:
    with open(path) as fh:
        tokens = []
        for line in fh:
            hash_pos = line.find("#")
            if hash_pos >= 0:
                line = line[:hash_pos]
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"not an OFF file: {path}")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4  # skip OFF nv nf ne
        verts = np.asarray(tokens[pos : pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            k = int(tokens[pos])
            idx = [int(t) for t in tokens[pos + 1 : pos + 1 + k]]
            pos += 1 + k
            for j in range(1, k - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
    except (IndexError, ValueError) as e:
        raise ValueError(f"unreadable file: {path}") from e
    return _finish_mesh(verts, np.asarray(faces, dtype=np.int64))


def load_xyz(path: str) -> OrientedPointCloud:
    """Read an .xyz point cloud: x y z nx ny nz per line."""
    data = np.loadtxt(path, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if data.shape[1] < 6:
        raise ValueError(f"expected 6 columns (point + normal) in {path}")
    normals = data[:, 3:6]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"zero-length normals in {path}")
    return OrientedPointCloud(points=data[:, :3].copy(), normals=normals / norms)


# ---------------------------------------------------------------------------
# normalization


def _fit_transform(pts: np.ndarray) -> NormalizationTransform:
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ValueError("degenerate input: zero extent")
    scale = 1.0 / extent
    center = 0.5 * (lo + hi)
    return NormalizationTransform(scale=scale, translate=-center * scale)


def normalize_to_unit_box(mesh: TriangleMesh):
    """Scale and center so the longest axis spans exactly [-0.5, 0.5].

    Returns:
        (normalized mesh, NormalizationTransform with x_n = s*x_w + t).
    """
    tr = _fit_transform(mesh.vertices)
    out = TriangleMesh(
        vertices=tr.apply(mesh.vertices),
        faces=mesh.faces,
        n_degenerate_dropped=mesh.n_degenerate_dropped,
    )
    out._watertight = mesh._watertight
    return out, tr


def normalize_pointcloud(cloud: OrientedPointCloud):
    tr = _fit_transform(cloud.points)
    return OrientedPointCloud(points=tr.apply(cloud.points), normals=cloud.normals), tr


# ---------------------------------------------------------------------------
# surface sampling


def _sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator):
    normals, areas = mesh.face_normals_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    probs = areas / total
    face_idx = rng.choice(len(areas), size=n, p=probs)
    # uniform barycentric via the sqrt trick
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    u = 1.0 - r1
    v = r1 * (1.0 - r2)
    w = r1 * r2
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = u[:, None] * tri[:, 0] + v[:, None] * tri[:, 1] + w[:, None] * tri[:, 2]
    return pts, normals[face_idx]


def sample_surface_points(mesh: TriangleMesh, count: int, seed: int):
    """Area-uniform surface samples with face normals; deterministic per seed.

    Returns:
        (points: count x 3, normals: count x 3).
    """
    return _sample_surface(mesh, count, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# inside tests


def winding_number(points: np.ndarray, mesh: TriangleMesh, chunk: int = 512) -> np.ndarray:
    """Generalized winding number of each query point (~1 inside, ~0 outside).

    Sums the signed solid angle of every face as seen from each point,
    chunked over queries to bound memory.
    """
    v = mesh.vertices
    f = mesh.faces
    out = np.empty(len(points), dtype=np.float64)
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        a = v[f[:, 0]][None, :, :] - p[:, None, :]
        b = v[f[:, 1]][None, :, :] - p[:, None, :]
        c = v[f[:, 2]][None, :, :] - p[:, None, :]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        numer = np.einsum("qfi,qfi->qf", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("qfi,qfi->qf", a, b) * lc
            + np.einsum("qfi,qfi->qf", b, c) * la
            + np.einsum("qfi,qfi->qf", c, a) * lb
        )
        omega = 2.0 * np.arctan2(numer, denom)
        out[start : start + chunk] = omega.sum(axis=1) / (4.0 * np.pi)
    return out


def inside_test(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """True where the generalized winding number exceeds 0.5."""
    if not mesh.is_watertight():
        warnings.warn("mesh is not watertight; winding-number labels may be unreliable")
    return winding_number(points, mesh) > 0.5


# ---------------------------------------------------------------------------
# occupancy protocols


def _clamp_box(pts: np.ndarray) -> np.ndarray:
    # per-coordinate clamping never increases distance to a surface point
    # that itself lies in the box, so the 1/64 band survives it
    return np.clip(pts, -BOX_HALF, BOX_HALF)


def _unit_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.where(norms > 0, norms, 1.0)


def sample_occupancy_from_mesh(mesh: TriangleMesh, seed: int) -> OccupancySet:
    """Mesh occupancy protocol: near-surface offsets plus uniform box fill.

    Near-surface points are area-uniform surface samples displaced by a
    uniform-random direction times a uniform magnitude in [0, 1/64];
    uniform points fill the whole box. Labels come from inside_test.
    """
    rng = np.random.default_rng(seed)
    surf_pts, _ = _sample_surface(mesh, N_NEAR_SURFACE, rng)
    dirs = _unit_directions(N_NEAR_SURFACE, rng)
    mags = rng.uniform(0.0, SURFACE_BAND, size=N_NEAR_SURFACE)
    near = _clamp_box(surf_pts + dirs * mags[:, None])
    uniform = rng.uniform(-BOX_HALF, BOX_HALF, size=(N_UNIFORM, 3))
    pts = np.concatenate([near, uniform], axis=0)
    inside = inside_test(mesh, pts)
    origin = np.full(len(pts), ORIGIN_UNIFORM, dtype=np.uint8)
    origin[:N_NEAR_SURFACE] = ORIGIN_NEAR_SURFACE
    return OccupancySet(points=pts.astype(np.float32), inside=inside, origin=origin)


def sample_occupancy_from_pointcloud(pc: OrientedPointCloud, seed: int) -> OccupancySet:
    """Point-cloud occupancy protocol: Gaussian offsets along each normal.

    Each input point spawns N_CLOUD_OFFSETS queries p + t*n with
    t ~ N(0, (1/64)^2); t < 0 labels inside (against the outward normal),
    t >= 0 outside.
    """
    norms = np.linalg.norm(pc.normals, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("point-cloud normals must be unit length")
    rng = np.random.default_rng(seed)
    n = len(pc.points)
    t = rng.normal(0.0, SURFACE_BAND, size=(n, N_CLOUD_OFFSETS))
    pts = pc.points[:, None, :] + t[:, :, None] * pc.normals[:, None, :]
    pts = _clamp_box(pts.reshape(-1, 3))
    inside = (t < 0).reshape(-1)
    origin = np.full(len(pts), ORIGIN_NORMAL_OFFSET, dtype=np.uint8)
    return OccupancySet(points=pts.astype(np.float32), inside=inside, origin=origin)


# ---------------------------------------------------------------------------
# occupancy file format
#
# magic "D2CS" | u32 version | u64 n | n records of
#   f32 x, f32 y, f32 z, u8 inside, u8 origin
# all little-endian


def save_occupancy(path: str, occ: OccupancySet) -> None:
    n = len(occ.points)
    rec = np.zeros(n, dtype=_OCC_RECORD)
    rec["xyz"] = occ.points.astype("<f4")
    rec["inside"] = occ.inside.astype("u1")
    rec["origin"] = occ.origin
    with open(path, "wb") as fh:
        fh.write(_OCC_MAGIC)
        fh.write(struct.pack("<I", _OCC_VERSION))
        fh.write(struct.pack("<Q", n))
        fh.write(rec.tobytes())


def load_occupancy(path: str) -> OccupancySet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _OCC_MAGIC:
            raise ValueError(f"bad occupancy magic in {path}: {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _OCC_VERSION:
            raise ValueError(f"unsupported occupancy version {version}")
        (n,) = struct.unpack("<Q", fh.read(8))
        rec = np.frombuffer(fh.read(n * _OCC_RECORD.itemsize), dtype=_OCC_RECORD)
    if rec.size != n:
        raise ValueError(f"truncated occupancy file: {path}")
    return OccupancySet(
        points=rec["xyz"].astype(np.float32),
        inside=rec["inside"].astype(bool),
        origin=rec["origin"].astype(np.uint8),
    )
