"""CSG tree recovery from a quantized model, iso-surfacing, compactness.

The selection stage leaves a binary program behind: each attention weight
keeps or drops an intermediate shape, each selection-matrix entry keeps or
drops a primitive row inside it.  This module turns that program into an
explicit boolean tree, cross-checks the tree against the network field,
meshes the field for the metrics, and counts how compact the result is.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import BOX_HALF, NormalizationTransform, TriangleMesh, sample_surface_points
from .network import FittedModel, field_values, model_primitives, query_features

SEG_SAMPLES = 8192
SEG_MIN_OWNED = 10
DEFAULT_GRID = 128


# ---------------------------------------------------------------------------
# tree types


@dataclass(frozen=True)
class Leaf:
    """One quadric primitive: inside iff coeffs . (x²,y²,z²,x,y,z,1) <= 0."""

    coeffs: tuple  # 7 floats
    inverted: bool  # True for rows drawn from the complement half
    row: int  # source row in the primitive matrix
    branch: str  # "cover" | "residual"

    def value(self, points: np.ndarray) -> np.ndarray:
        return query_features(points) @ np.asarray(self.coeffs, dtype=np.float64)


@dataclass
class CsgTree:
    """difference(union of intersections, union of intersections)."""

    cover: list  # list[list[Leaf]]
    residual: list  # list[list[Leaf]]
    transform: NormalizationTransform | None = None

    @property
    def universal_columns(self) -> list:
        """(branch, index) of leafless inters: vacuous intersections, i.e.
        shapes equal to the whole space."""
        return [(name, i)
                for name, nodes in (("cover", self.cover),
                                    ("residual", self.residual))
                for i, inter in enumerate(nodes) if not inter]

    def leaves(self):
        for inter in self.cover + self.residual:
            yield from inter

    def distinct_leaves(self, shared: bool = False):
        """Leaves deduplicated by identity: (branch, row), or row alone when
        both branches draw from one primitive matrix."""
        seen = {}
        for leaf in self.leaves():
            key = leaf.row if shared else (leaf.branch, leaf.row)
            seen.setdefault(key, leaf)
        return list(seen.values())


# ---------------------------------------------------------------------------
# extraction


def extract_tree(model: FittedModel) -> CsgTree:
    """Read the boolean program out of a quantized (phase-2) model.

    One InterNode per kept attention column.  A kept column that selects
    no primitive stays in the tree as a leafless inter — its Con is
    identically zero, so the shape is the whole space, and dropping it
    would change the solid.  Such columns are also reported on the tree.
    Raises ValueError for a model still in a soft phase, and for a
    program whose cover is empty ("empty reconstruction": the difference
    of nothing).
    """
    if model.phase != 2:
        raise ValueError(f"tree extraction needs a quantized model, got phase {model.phase}")
    for name, arr in (("T_C", model.T_C), ("T_R", model.T_R),
                      ("W_C", model.W_C), ("W_R", model.W_R)):
        vals = np.unique(arr)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValueError(f"{name} is not binary: values {vals[:8]}")

    pc, pr = model_primitives(model)
    half = model.hp.p // 2
    tree = CsgTree(cover=[], residual=[], transform=model.transform)
    for branch, P, T, W in (("cover", pc, model.T_C, model.W_C),
                            ("residual", pr, model.T_R, model.W_R)):
        target = tree.cover if branch == "cover" else tree.residual
        for i in range(model.hp.c):
            if W[0, i] != 1.0:
                continue
            rows = np.nonzero(T[:, i])[0]
            if len(rows) == 0:
                target.append([])  # empty selection: the whole space
                continue
            target.append([
                Leaf(coeffs=tuple(float(v) for v in P[k]),
                     inverted=bool(k >= half), row=int(k), branch=branch)
                for k in rows
            ])
    if not tree.cover:
        raise ValueError("empty reconstruction: no kept cover shape selects any primitive")
    return tree


def eval_tree(tree: CsgTree, points: np.ndarray) -> np.ndarray:
    """Pure set semantics: leaf quadric <= 0, AND within an intermediate,
    OR across them, cover minus residual at the root.  No margins, no
    attention shifts — the reference the network field is checked against.
    """
    points = np.asarray(points, dtype=np.float64)
    q = query_features(points)

    def union_of_inters(nodes):
        acc = np.zeros(len(points), dtype=bool)
        for inter in nodes:
            # (-1, 7) keeps leafless inters as (0, 7): vacuously all-true
            coeffs = np.array([leaf.coeffs for leaf in inter],
                              dtype=np.float64).reshape(-1, 7)
            acc |= (q @ coeffs.T <= 0.0).all(axis=1)
        return acc

    return union_of_inters(tree.cover) & ~union_of_inters(tree.residual)


# ---------------------------------------------------------------------------
# serialization


def tree_to_json_dict(tree: CsgTree) -> dict:
    def branch(nodes):
        return [[{"coeffs": list(leaf.coeffs), "inverted": leaf.inverted,
                  "row": leaf.row} for leaf in inter] for inter in nodes]

    return {
        "cover": branch(tree.cover),
        "residual": branch(tree.residual),
        "transform": tree.transform.to_dict() if tree.transform else None,
    }


def tree_from_json_dict(doc: dict) -> CsgTree:
    def branch(nodes, name):
        return [[Leaf(coeffs=tuple(l["coeffs"]), inverted=bool(l["inverted"]),
                      row=int(l.get("row", -1)), branch=name) for l in inter]
                for inter in nodes]

    tr = doc.get("transform")
    return CsgTree(
        cover=branch(doc["cover"], "cover"),
        residual=branch(doc["residual"], "residual"),
        transform=NormalizationTransform.from_dict(tr) if tr else None,
    )


def save_tree(tree: CsgTree, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree_to_json_dict(tree), fh, indent=2)
        fh.write("\n")


def load_tree(path) -> CsgTree:
    with open(path, encoding="utf-8") as fh:
        return tree_from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# iso-surface extraction


@dataclass
class IsoMesh:
    vertices: np.ndarray  # (nv, 3) float64
    triangles: np.ndarray  # (nf, 3) int64
    normals: np.ndarray  # (nv, 3) float64, outward (field-ascent) direction

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def as_triangle_mesh(self) -> TriangleMesh:
        return TriangleMesh(vertices=self.vertices, faces=self.triangles)


def _empty_iso() -> IsoMesh:
    return IsoMesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), dtype=np.int64),
                   normals=np.zeros((0, 3)))


def field_on_grid(model: FittedModel, resolution: int) -> np.ndarray:
    """s* sampled on a (resolution+1)³ lattice over the unit box.

    The primitive matrices come out of the MLP once; the per-point work is
    only the quadric/selection/min pipeline.
    """
    axis = np.linspace(-BOX_HALF, BOX_HALF, resolution + 1)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    s = field_values(model, pts)["s_star"]
    return s.reshape(resolution + 1, resolution + 1, resolution + 1)


def marching_cubes(model: FittedModel, resolution: int = DEFAULT_GRID) -> IsoMesh:
    """Mesh the s* = alpha/2 level set (the inside/outside decision surface).

    The quantized field is 0 on the inside and grows outward, so the level
    sits strictly between the two; level 0 itself is the inside plateau's
    boundary and meshes poorly.  A field with no crossing yields an empty
    mesh plus a warning.
    """
    if model.phase != 2:
        raise ValueError("iso-surface extraction needs a quantized model")
    if resolution < 16:
        raise ValueError(f"resolution {resolution} < 16")
    from skimage import measure

    level = model.hp.alpha / 2.0
    vol = field_on_grid(model, resolution)
    if not (vol.min() < level < vol.max()):
        warnings.warn("iso-surface is empty: field never crosses the decision level")
        return _empty_iso()
    spacing = 1.0 / resolution
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=level, spacing=(spacing,) * 3, gradient_direction="ascent")
    verts = verts.astype(np.float64) - BOX_HALF  # grid index space -> unit box
    # The field is identically zero on the inside, so linear interpolation
    # between a plateau corner and an outside corner lands vertices with
    # cell-scale jitter (a staircase that wrecks face normals).  Two Newton
    # steps along the true field gradient put them on the smooth level set.
    verts = _project_to_level(model, verts, level, spacing)
    normals = _field_normals(model, verts, h=spacing)
    return IsoMesh(vertices=verts, triangles=faces.astype(np.int64),
                   normals=normals)


def _project_to_level(model: FittedModel, verts: np.ndarray, level: float,
                      spacing: float, steps: int = 2) -> np.ndarray:
    v = verts.copy()
    cap = 1.5 * spacing  # never move further than the grid already guarantees
    for _ in range(steps):
        s = field_values(model, v)["s_star"]
        g = _field_gradient(model, v, h=spacing)
        g2 = (g * g).sum(axis=1)
        move = -(s - level)[:, None] * g / np.maximum(g2, 1e-12)[:, None]
        norm = np.linalg.norm(move, axis=1, keepdims=True)
        move *= np.minimum(1.0, cap / np.maximum(norm, 1e-12))
        flat = g2 < 1e-12  # plateau vertices have nowhere to go
        move[flat] = 0.0
        v = np.clip(v + move, -BOX_HALF, BOX_HALF)
    return v


def _field_gradient(model: FittedModel, verts: np.ndarray, h: float) -> np.ndarray:
    """Central differences of s*; the step must span a grid cell because the
    inside of the shape is an exact zero plateau."""
    grad = np.empty_like(verts)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        hi = field_values(model, verts + e)["s_star"]
        lo = field_values(model, verts - e)["s_star"]
        grad[:, axis] = (hi - lo) / (2 * h)
    return grad


def _field_normals(model: FittedModel, verts: np.ndarray, h: float) -> np.ndarray:
    """Outward unit normals: s* increases outward, so its gradient already
    points out of the shape."""
    if len(verts) == 0:
        return np.zeros((0, 3))
    grad = _field_gradient(model, verts, h)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    # a vertex deep in a flat region has no gradient; any unit vector serves
    bad = norm[:, 0] < 1e-12
    grad[bad] = (0.0, 0.0, 1.0)
    norm[bad] = 1.0
    return grad / norm


def export_obj(mesh: IsoMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# d2csg reconstruction\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for n in mesh.normals:
            fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]}//{t[0]} {t[1]}//{t[1]} {t[2]}//{t[2]}\n")


# ---------------------------------------------------------------------------
# mesh topology helpers


def _unique_edges(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def euler_characteristic(mesh: IsoMesh) -> int:
    if mesh.is_empty:
        return 0
    edges, _ = _unique_edges(mesh.triangles)
    return len(mesh.vertices) - len(edges) + len(mesh.triangles)


def is_watertight(mesh: IsoMesh) -> bool:
    if mesh.is_empty:
        return False
    _, counts = _unique_edges(mesh.triangles)
    return bool((counts == 2).all())


# ---------------------------------------------------------------------------
# compactness


def compactness(tree: CsgTree, model: FittedModel, surface: IsoMesh,
                seed: int = 0) -> dict:
    """#P, #IS, #Seg for one reconstruction.

    #P: distinct primitive rows used as leaves ((branch, row) identity, or
    row alone under a shared primitive matrix).  #IS: intermediate shapes
    (InterNodes) across both branches.  #Seg: leaves owning at least 10 of
    8,192 surface samples, each sample labeled by the active leaf whose
    |quadric value| there is smallest.
    """
    shared = model.hp.shared_primitives
    leaves = tree.distinct_leaves(shared=shared)
    num_p = len(leaves)
    num_is = len(tree.cover) + len(tree.residual)
    if surface.is_empty or not leaves:
        return {"numP": num_p, "numIS": num_is, "numSeg": 0}

    pts, _ = sample_surface_points(surface.as_triangle_mesh(), SEG_SAMPLES, seed)
    q = query_features(pts)
    coeffs = np.array([leaf.coeffs for leaf in leaves], dtype=np.float64)
    owner = np.abs(q @ coeffs.T).argmin(axis=1)
    counts = np.bincount(owner, minlength=len(leaves))
    return {"numP": num_p, "numIS": num_is,
            "numSeg": int((counts >= SEG_MIN_OWNED).sum())}
