"""OpenSCAD export: quadric leaves become editable basic primitives.

Classification is symbolic and exact: a sphere/ellipsoid/cylinder/slab/
half-space label is only assigned when the quadric *is* that solid (up to
a relative tolerance on vanishing coefficients), so classified leaves
reproduce the field's membership exactly.  Leaves that fit no closed form
are meshed into polyhedra at a fixed resolution — the only approximate
step, and the only place the emitted program may disagree with the tree.

The script always has the fixed two-branch scaffold::

    difference() { union() { <cover> } union() { <residual> } }

and each mixed intermediate shape becomes
``difference(){ intersection(){convex} union(){convexified inverses} }``
(intersecting with a complement is subtracting the convex form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import __version__
from .extract import CsgTree, Leaf
from .geometry import BOX_HALF, NormalizationTransform, TriangleMesh, winding_number
from .network import query_features

CLASSIFY_TOL = 1e-3
AXIS_ALIGN_TOL = 1e-3
BIG = 10.0  # span of the cubes/cylinders standing in for unbounded solids
POLY_RESOLUTION = 64
POLY_PAD = 0.02  # grid margin so box-clipped leaves still close up
_AXES = "xyz"


# ---------------------------------------------------------------------------
# quadric classification


@dataclass(frozen=True)
class BasicPrimitive:
    """A closed-form solid equal to some quadric's inside set."""

    kind: str  # sphere | ellipsoid | cylinder | half_space | slab
    params: dict

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "sphere":
            return ((pts - p["center"]) ** 2).sum(axis=1) <= p["radius"] ** 2
        if self.kind == "ellipsoid":
            return (((pts - p["center"]) / p["radii"]) ** 2).sum(axis=1) <= 1.0
        if self.kind == "cylinder":
            i, j = [k for k in range(3) if k != p["axis"]]
            u = (pts[:, i] - p["center"][i]) / p["radii"][0]
            v = (pts[:, j] - p["center"][j]) / p["radii"][1]
            return u * u + v * v <= 1.0
        if self.kind == "half_space":
            return pts @ p["normal"] <= p["offset"]
        if self.kind == "slab":
            return np.abs(pts[:, p["axis"]] - p["center_u"]) <= p["half_width"]
        raise ValueError(f"unknown kind {self.kind}")


def classify_quadric(coeffs, tol: float = CLASSIFY_TOL) -> BasicPrimitive | None:
    """Match a convex-form quadric to a basic solid, or None.

    "Vanishing" is relative: |coef| < tol * max|coef|.  A zero-curvature
    axis with a surviving linear term is a paraboloid sheet, not a
    cylinder or slab, and stays unclassified.  Empty inside sets
    (negative squared radius) also stay unclassified.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    m = np.abs(c).max()
    if m == 0.0:
        return None
    sq, lin, g = c[:3], c[3:6], c[6]
    if (sq < -tol * m).any():
        return None  # not a convex form; negate inverse leaves first
    curved = np.abs(sq) >= tol * m
    flat = np.nonzero(~curved)[0]
    axes = np.nonzero(curved)[0]

    if len(axes) == 0:
        n = lin.copy()
        norm = np.linalg.norm(n)
        if norm < tol * m:
            return None  # constant: degenerate
        return BasicPrimitive("half_space", {"normal": n / norm, "offset": -g / norm})

    # every flat axis must carry no linear term, or the set is parabolic
    if np.abs(lin[flat]).max(initial=0.0) >= tol * m:
        return None
    center = np.zeros(3)
    center[axes] = -lin[axes] / (2 * sq[axes])
    k = (sq[axes] * center[axes] ** 2).sum() - g
    if k <= 0:
        return None  # empty or a single point
    radii = np.sqrt(k / sq[axes])

    if len(axes) == 3:
        if radii.max() - radii.min() <= tol * radii.max():
            return BasicPrimitive("sphere", {"center": center,
                                             "radius": float(radii.mean())})
        return BasicPrimitive("ellipsoid", {"center": center, "radii": radii})
    if len(axes) == 2:
        return BasicPrimitive("cylinder", {"axis": int(flat[0]), "center": center,
                                           "radii": radii})
    return BasicPrimitive("slab", {"axis": int(axes[0]),
                                   "center_u": float(center[axes[0]]),
                                   "half_width": float(radii[0])})


# ---------------------------------------------------------------------------
# script IR


@dataclass
class Node:
    op: str  # difference | union | intersection | solid | polyhedron | cube_box | empty
    children: list | None = None
    prim: BasicPrimitive | None = None
    mesh: TriangleMesh | None = None
    box: tuple | None = None  # (lo, hi) arrays for cube_box
    leaf: Leaf | None = None


def _leaf_polyhedron(coeffs) -> TriangleMesh | None:
    """Mesh one quadric's inside set clipped to the box; None if empty."""
    from skimage import measure

    r = POLY_RESOLUTION
    lim = BOX_HALF + POLY_PAD
    axis = np.linspace(-lim, lim, r + 1)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    q = query_features(pts) @ np.asarray(coeffs, dtype=np.float64)
    clip = np.abs(pts).max(axis=1) - BOX_HALF
    vol = np.maximum(q, clip).reshape(r + 1, r + 1, r + 1)
    if not (vol.min() < 0.0 < vol.max()):
        return None
    spacing = 2 * lim / r
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0,
                                                spacing=(spacing,) * 3,
                                                gradient_direction="ascent")
    return TriangleMesh(vertices=verts - lim, faces=faces.astype(np.int64))


def _solid_node(leaf: Leaf, classify: bool) -> Node:
    coeffs = np.asarray(leaf.coeffs)
    if leaf.inverted:
        coeffs = -coeffs  # classify the convex complement form
    prim = classify_quadric(coeffs) if classify else None
    if prim is not None:
        return Node("solid", prim=prim, leaf=leaf)
    mesh = _leaf_polyhedron(coeffs)
    if mesh is None:
        return Node("empty", leaf=leaf)
    return Node("polyhedron", mesh=mesh, leaf=leaf)


def _box_collapse(nodes: list) -> Node | None:
    """Fold an intersection of >= 6 axis-aligned half-spaces into one cube."""
    if len(nodes) < 6:
        return None
    lo = np.full(3, -np.inf)
    hi = np.full(3, np.inf)
    for nd in nodes:
        if nd.op != "solid" or nd.prim.kind != "half_space":
            return None
        n = nd.prim.params["normal"]
        axis = int(np.abs(n).argmax())
        if np.abs(np.abs(n[axis]) - 1.0) > AXIS_ALIGN_TOL:
            return None
        if np.abs(n[[a for a in range(3) if a != axis]]).max() > AXIS_ALIGN_TOL:
            return None
        off = nd.prim.params["offset"]
        if n[axis] > 0:
            hi[axis] = min(hi[axis], off / n[axis])
        else:
            lo[axis] = max(lo[axis], off / n[axis])
    if not (np.isfinite(lo).all() and np.isfinite(hi).all() and (lo < hi).all()):
        return None
    return Node("cube_box", box=(lo, hi),
                children=nodes)  # children kept for provenance lines


def _inter_node(inter: list, classify: bool) -> Node:
    convex = [_solid_node(l, classify) for l in inter if not l.inverted]
    inverse = [_solid_node(l, classify) for l in inter if l.inverted]
    if any(nd.op == "empty" for nd in convex):
        return Node("empty")
    inverse = [nd for nd in inverse if nd.op != "empty"]  # empty cut = no-op

    if convex:
        folded = _box_collapse(convex)
        if folded is not None:
            positive = folded
        elif len(convex) == 1:
            positive = convex[0]
        else:
            positive = Node("intersection", children=convex)
    else:
        # complement-only shape: bounded by the modeling domain
        half = BIG / 2
        positive = Node("cube_box", box=(np.full(3, -half), np.full(3, half)),
                        children=[])
    if not inverse:
        return positive
    return Node("difference", children=[positive, Node("union", children=inverse)])


def build_ir(tree: CsgTree, classify: bool = True) -> Node:
    cover = [_inter_node(i, classify) for i in tree.cover]
    cover = [nd for nd in cover if nd.op != "empty"]
    residual = [_inter_node(i, classify) for i in tree.residual]
    residual = [nd for nd in residual if nd.op != "empty"]
    if not cover:
        raise ValueError("empty tree: nothing to export")
    return Node("difference", children=[Node("union", children=cover),
                                        Node("union", children=residual)])


# ---------------------------------------------------------------------------
# membership interpreter (the exporter's self-check)


def eval_ir(node: Node, pts: np.ndarray) -> np.ndarray:
    if node.op == "difference":
        acc = eval_ir(node.children[0], pts)
        for child in node.children[1:]:
            acc &= ~eval_ir(child, pts)
        return acc
    if node.op == "union":
        acc = np.zeros(len(pts), dtype=bool)
        for child in node.children:
            acc |= eval_ir(child, pts)
        return acc
    if node.op == "intersection":
        acc = np.ones(len(pts), dtype=bool)
        for child in node.children:
            acc &= eval_ir(child, pts)
        return acc
    if node.op == "solid":
        return node.prim.contains(pts)
    if node.op == "cube_box":
        lo, hi = node.box
        return ((pts >= lo) & (pts <= hi)).all(axis=1)
    if node.op == "polyhedron":
        return np.abs(winding_number(pts, node.mesh)) > 0.5
    if node.op == "empty":
        return np.zeros(len(pts), dtype=bool)
    raise ValueError(f"unknown op {node.op}")


# ---------------------------------------------------------------------------
# text rendering


def _fmt(x) -> str:
    return f"{float(x) + 0.0:.9g}"  # + 0.0 folds -0.0 into 0


def _vec(v) -> str:
    return "[" + ", ".join(_fmt(x) for x in v) + "]"


def _provenance(leaf: Leaf | None) -> str:
    if leaf is None:
        return ""
    return f" // d2csg: {leaf.branch} row {leaf.row}" + (" (inverted)" if leaf.inverted else "")


def _render_solid(nd: Node, out: list, indent: str) -> None:
    p = nd.prim.params
    tag = _provenance(nd.leaf)
    k = nd.prim.kind
    if k == "sphere":
        out.append(f"{indent}translate({_vec(p['center'])}) sphere(r={_fmt(p['radius'])});{tag}")
    elif k == "ellipsoid":
        out.append(f"{indent}translate({_vec(p['center'])}) scale({_vec(p['radii'])}) "
                   f"sphere(r=1);{tag}")
    elif k == "cylinder":
        axis = p["axis"]
        rot = {0: " rotate(a=90, v=[0, 1, 0])", 1: " rotate(a=90, v=[1, 0, 0])", 2: ""}[axis]
        sc = np.ones(3)  # world-frame scale: unit along the axis, radii across
        sc[[a for a in range(3) if a != axis]] = p["radii"]
        ctr = p["center"].copy()
        ctr[axis] = 0.0
        out.append(f"{indent}translate({_vec(ctr)}) scale({_vec(sc)}){rot} "
                   f"cylinder(h={_fmt(BIG)}, r=1, center=true);{tag}")
    elif k == "half_space":
        n = p["normal"]
        ctr = n * (p["offset"] - BIG / 2)
        z = np.array([0.0, 0.0, 1.0])
        axis_v = np.cross(z, n)
        s = np.linalg.norm(axis_v)
        ang = float(np.degrees(np.arctan2(s, n[2])))
        rot = "" if s < 1e-12 and n[2] > 0 else (
            f" rotate(a=180, v=[1, 0, 0])" if s < 1e-12
            else f" rotate(a={_fmt(ang)}, v={_vec(axis_v / s)})")
        out.append(f"{indent}translate({_vec(ctr)}){rot} "
                   f"cube([{_fmt(BIG)}, {_fmt(BIG)}, {_fmt(BIG)}], center=true);{tag}")
    elif k == "slab":
        size = np.full(3, BIG)
        size[p["axis"]] = 2 * p["half_width"]
        ctr = np.zeros(3)
        ctr[p["axis"]] = p["center_u"]
        out.append(f"{indent}translate({_vec(ctr)}) cube({_vec(size)}, center=true);{tag}")
    else:
        raise ValueError(k)


def _render(nd: Node, out: list, indent: str = "") -> None:
    step = indent + "  "
    if nd.op in ("difference", "union", "intersection"):
        kids = [c for c in nd.children or []]
        out.append(f"{indent}{nd.op}() {{")
        for c in kids:
            _render(c, out, step)
        out.append(f"{indent}}}")
    elif nd.op == "solid":
        _render_solid(nd, out, indent)
    elif nd.op == "cube_box":
        lo, hi = nd.box
        if nd.children:
            rows = ", ".join(f"{c.leaf.branch} row {c.leaf.row}"
                             for c in nd.children if c.leaf)
            note = f" // d2csg: box of {len(nd.children)} half-spaces ({rows})"
        else:
            note = " // d2csg: modeling domain"
        out.append(f"{indent}translate({_vec((lo + hi) / 2)}) "
                   f"cube({_vec(hi - lo)}, center=true);{note}")
    elif nd.op == "polyhedron":
        m = nd.mesh
        pts = ", ".join(_vec(v) for v in m.vertices)
        # OpenSCAD wants faces clockwise seen from outside; flip the
        # counter-clockwise marching-cubes winding
        fcs = ", ".join("[" + ", ".join(str(i) for i in f[::-1]) + "]" for f in m.faces)
        tag = _provenance(nd.leaf)
        out.append(f"{indent}polyhedron(points=[{pts}], faces=[{fcs}]);{tag}")
    elif nd.op == "empty":
        out.append(f"{indent}// d2csg: empty leaf elided")
    else:
        raise ValueError(nd.op)


def emit_openscad(tree: CsgTree, transform: NormalizationTransform | None = None,
                  classify: bool = True, seed: int | None = None) -> str:
    """Render the tree as an OpenSCAD script (normalized space unless a
    transform is given, in which case one outer wrapper restores world
    coordinates).  Raises on an empty tree."""
    ir = build_ir(tree, classify=classify)
    lines = [
        f"// d2csg: tool {__version__}",
        f"// d2csg: {len(tree.cover)} cover / {len(tree.residual)} residual shapes, "
        f"{len(tree.distinct_leaves())} leaves",
        f"// d2csg: unbounded solids rendered {_fmt(BIG)} units long",
    ]
    if seed is not None:
        lines.append(f"// d2csg: seed {seed}")
    body: list = []
    if transform is not None and not (transform.scale == 1.0
                                      and not transform.translate.any()):
        s, t = transform.scale, transform.translate
        lines.append(f"// d2csg: world space via x_w = (x_n - {_vec(t)}) / {_fmt(s)}")
        body.append(f"translate({_vec(-t / s)}) scale({_fmt(1 / s)})")
        _render(ir, body_block := [], "  ")
        body = [body[0] + " {"] + body_block + ["}"]
    else:
        lines.append("// d2csg: normalized space")
        _render(ir, body)
    return "\n".join(lines + body) + "\n"
