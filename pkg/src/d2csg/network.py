"""The fixed dual-branch CSG forward model.

Latent code -> primitive matrices -> approximate signed distances ->
intersections -> unions -> difference field, for a cover branch and a
residual branch. The same pipeline exists twice here:

  * numpy functions (f64) with the canonical semantics, used for
    evaluation, extraction, and the importance metric;
  * graph builders over autodiff Tensors, used by the trainer.

Primitive layout convention: each branch matrix holds p rows of quadric
coefficients (a,b,c,d,e,f,g); rows 0..p/2 are convex (a,b,c >= 0), rows
p/2..p are inverse (a,b,c <= 0). Inside the differentiable graph the
matrix is kept coefficient-major as 7 x p so the signed-distance product
is a plain matmul.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .geometry import NormalizationTransform

_CKPT_MAGIC = b"D2CM"
_CKPT_VERSION = 1


@dataclass
class HyperParams:
    p: int = 512
    c: int = 32
    code_size: int = 256
    hidden: int = 512
    alpha: float = 0.2
    eta: float = 0.01
    sigma: float = 3.0
    theta: float = 100.0
    iters_per_stage: int = 12000
    dropout_interval: int = 4000
    lr: float = 1e-4
    batch: int = 4096
    seed: int = 0
    # ablation toggles
    shared_primitives: bool = False
    dropout_enabled: bool = True
    # importance metric reading: "flips" (per-point symmetric difference)
    # or "count" (absolute change of the inside count)
    delta_mode: str = "flips"

    def validate(self) -> None:
        if self.p < 2 or self.p % 2 != 0:
            raise ValueError("p must be even and >= 2")
        if self.c < 1:
            raise ValueError("c must be >= 1")
        if self.code_size < 1 or self.hidden < 1:
            raise ValueError("code_size and hidden must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.theta <= self.alpha:
            raise ValueError("theta must exceed alpha")
        if self.batch < 1 or self.iters_per_stage < 0 or self.dropout_interval < 1:
            raise ValueError("bad iteration/batch settings")
        if self.delta_mode not in ("flips", "count"):
            raise ValueError(f"unknown delta_mode {self.delta_mode!r}")


def _sphere_bias(p: int, rng: np.random.Generator,
                 live_inverse: bool) -> np.ndarray:
    """Output-head bias encoding p random balls, coefficient-major.

    With z ~ N(0, 0.02^2) the data-dependent part of the head output is
    ~1e-3, so the bias alone decides the starting primitives.  Zero bias
    starts every quadric at ~0: the selection matrix then sees no spatial
    structure, its gradient averages out over the batch, and training
    stalls.  Moderate balls scattered over the unit box give every
    t(k, i) a sign-consistent gradient from the first iteration.

    Columns < p/2 start as solid axis-aligned ellipsoids (independent
    per-axis radii, so thin shapes see some flat starters).  Columns
    >= p/2 (the rows the sign masks force to inverted quadrics) start,
    when live_inverse, as complements of ellipsoids — ready-made carving
    tools; otherwise as the always-true set |x|^2 <= -1 whose rectified
    field is identically zero over the box, so neither their selection
    weights nor their coefficients ever receive a gradient and the half
    stays inert.
    """
    half = p // 2
    centers = rng.uniform(-0.35, 0.35, size=(3, p))
    radii = rng.uniform(0.15, 0.45, size=(3, p))
    curv = 1.0 / radii ** 2  # sum_i curv_i (x_i - c_i)^2 - 1 <= 0
    bias = np.empty((7, p), dtype=np.float32)
    bias[0:3] = curv
    bias[3:6, :half] = -2.0 * curv[:, :half] * centers[:, :half]
    bias[6, :half] = (curv[:, :half] * centers[:, :half] ** 2).sum(axis=0) - 1.0
    if live_inverse:
        # after the sign flip the column reads 1 - sum_i curv_i (x_i - c_i)^2:
        # inside iff outside the ellipsoid
        bias[3:6, half:] = 2.0 * curv[:, half:] * centers[:, half:]
        bias[6, half:] = 1.0 - (curv[:, half:] * centers[:, half:] ** 2).sum(axis=0)
    else:
        bias[3:6, half:] = 0.0
        bias[6, half:] = -1.0
    return bias.reshape(1, 7 * p)


@dataclass
class PrimitivePredictor:
    """Two-layer MLP: code -> hidden (leaky rectifier) -> two 7p heads."""

    W1: np.ndarray  # (code, H)
    b1: np.ndarray  # (1, H)
    W2c: np.ndarray  # (H, 7p) cover head, coefficient-major columns
    b2c: np.ndarray  # (1, 7p)
    W2r: np.ndarray  # (H, 7p) residual head
    b2r: np.ndarray  # (1, 7p)
    slope: float = 0.01

    @staticmethod
    def init(code_size: int, hidden: int, p: int, rng: np.random.Generator):
        def w(*shape):
            return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

        return PrimitivePredictor(
            W1=w(code_size, hidden),
            b1=np.zeros((1, hidden), dtype=np.float32),
            W2c=w(hidden, 7 * p),
            b2c=_sphere_bias(p, rng, live_inverse=False),
            W2r=w(hidden, 7 * p),
            b2r=_sphere_bias(p, rng, live_inverse=True),
        )

    def copy(self) -> "PrimitivePredictor":
        return PrimitivePredictor(
            W1=self.W1.copy(), b1=self.b1.copy(),
            W2c=self.W2c.copy(), b2c=self.b2c.copy(),
            W2r=self.W2r.copy(), b2r=self.b2r.copy(),
            slope=self.slope,
        )


@dataclass
class FittedModel:
    """Complete network state for one shape."""

    hp: HyperParams
    z: np.ndarray  # (1, code) f32
    net: PrimitivePredictor
    T_C: np.ndarray  # (p, c) f32
    T_R: np.ndarray  # (p, c) f32
    W_C: np.ndarray  # (1, c) f32
    W_R: np.ndarray  # (1, c) f32
    phase: int = 0  # 0, 1, or 2; binary T/W iff 2
    transform: NormalizationTransform | None = None

    def copy(self) -> "FittedModel":
        return FittedModel(
            hp=replace(self.hp),
            z=self.z.copy(),
            net=self.net.copy(),
            T_C=self.T_C.copy(), T_R=self.T_R.copy(),
            W_C=self.W_C.copy(), W_R=self.W_R.copy(),
            phase=self.phase,
            transform=self.transform,
        )


def init_model(hp: HyperParams, rng: np.random.Generator,
               transform: NormalizationTransform | None = None) -> FittedModel:
    """Fresh trainable state.

    z and T start at N(0, 0.02^2).  The attention weights start
    asymmetrically.  Cover at 1/c: at exactly 1.0 the weighted sum of c
    near-one clipped terms sits deep in the flat region of the outer clip
    (sum ~ c) where the subgradient is zero, so nothing trains; near 1/c
    the sum starts at ~1, the boundary of the live region.  Residual at
    ~0: with both branches starting near full occupancy the cover gradient
    d(a_C (1 - a_R))/d a_C vanishes and the residual branch alone races to
    fit the *complement* of the target under an everything-passes cover —
    a perfect-loss solution the later stages never leave.  An empty-ish
    residual start keeps the cover path live so the shape lands in the
    cover branch, with the residual recruited only to carve.  The
    attention regularizer still pulls every weight toward 1 during the
    soft stage.
    """
    hp.validate()

    def w(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

    return FittedModel(
        hp=hp,
        z=w(1, hp.code_size),
        net=PrimitivePredictor.init(hp.code_size, hp.hidden, hp.p, rng),
        T_C=w(hp.p, hp.c), T_R=w(hp.p, hp.c),
        W_C=(1.0 / hp.c + w(1, hp.c)).astype(np.float32),
        W_R=w(1, hp.c),
        phase=0,
        transform=transform,
    )


# ---------------------------------------------------------------------------
# sign masks


def quad_sign_masks(p: int, dtype=np.float64):
    """Constant masks enforcing the convex/inverse coefficient signs.

    Returns (M_quad, M_pass), each 7 x p, such that
    P = M_quad * |raw| + M_pass * raw has rows 0..2 (the squared-term
    coefficients) non-negative for columns < p/2 and non-positive for
    columns >= p/2, while rows 3..6 pass through unchanged.
    """
    mq = np.zeros((7, p), dtype=dtype)
    mq[0:3, : p // 2] = 1.0
    mq[0:3, p // 2 :] = -1.0
    mp = np.zeros((7, p), dtype=dtype)
    mp[3:7, :] = 1.0
    return mq, mp


# ---------------------------------------------------------------------------
# numpy pipeline (canonical semantics, f64)


def query_features(points: np.ndarray) -> np.ndarray:
    """Q(j,:) = (x^2, y^2, z^2, x, y, z, 1)."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    q = np.empty((n, 7), dtype=np.float64)
    q[:, 0:3] = pts * pts
    q[:, 3:6] = pts
    q[:, 6] = 1.0
    return q


def _mlp_raw(z: np.ndarray, net: PrimitivePredictor):
    z = z.astype(np.float64)
    h = z @ net.W1.astype(np.float64) + net.b1.astype(np.float64)
    h = np.where(h > 0, h, net.slope * h)
    rawc = h @ net.W2c.astype(np.float64) + net.b2c.astype(np.float64)
    rawr = h @ net.W2r.astype(np.float64) + net.b2r.astype(np.float64)
    return rawc, rawr


def predict_primitives(z: np.ndarray, net: PrimitivePredictor, p: int,
                       shared: bool = False):
    """Evaluate the MLP and apply sign constraints.

    Returns:
        (P_C, P_R): two p x 7 float64 matrices. With shared=True the cover
        head serves both branches.
    """
    rawc, rawr = _mlp_raw(z, net)
    mq, mp = quad_sign_masks(p)
    pc = (mq * np.abs(rawc.reshape(7, p)) + mp * rawc.reshape(7, p)).T
    if shared:
        return pc, pc.copy()
    pr = (mq * np.abs(rawr.reshape(7, p)) + mp * rawr.reshape(7, p)).T
    return pc, pr


def model_primitives(model: FittedModel):
    return predict_primitives(model.z, model.net, model.hp.p,
                              model.hp.shared_primitives)


def asd(Q: np.ndarray, P: np.ndarray) -> np.ndarray:
    """D = Q P^T; D(j,k) <= 0 iff point j is inside primitive k."""
    if Q.shape[1] != 7 or P.shape[1] != 7:
        raise ValueError(f"bad shapes for asd: {Q.shape}, {P.shape}")
    return Q @ P.T


def intersect(D: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Con = relu(D) T; 0 inside an intermediate shape, > 0 outside."""
    if D.shape[1] != T.shape[0]:
        raise ValueError(f"bad shapes for intersect: {D.shape}, {T.shape}")
    return np.maximum(D, 0.0) @ T


def union_min(Con: np.ndarray, W: np.ndarray, theta: float) -> np.ndarray:
    """a*(j) = min_i (Con(j,i) + (1 - W_i) * theta).

    With all W_i = 1 the shift vanishes exactly and this is the plain
    row minimum; a dropped shape (W_i = 0) is pushed theta away and can
    never win the min.
    """
    w = np.asarray(W, dtype=Con.dtype).reshape(1, -1)
    return (Con + (1.0 - w) * theta).min(axis=1)


def union_soft(Con: np.ndarray, W: np.ndarray) -> np.ndarray:
    """a+(j) = clip01( sum_i W_i * clip01(1 - Con(j,i)) ); ~1 in, < 1 out."""
    w = np.asarray(W, dtype=Con.dtype).reshape(1, -1)
    inner = np.clip(1.0 - Con, 0.0, 1.0)
    return np.clip((inner * w).sum(axis=1), 0.0, 1.0)


def difference_field(a_C: np.ndarray, a_R: np.ndarray, alpha: float) -> np.ndarray:
    """s*(j) = max(a*_C(j), alpha - a*_R(j)); 0 in, > 0 out."""
    return np.maximum(a_C, alpha - a_R)


def inside_count(s: np.ndarray, alpha: float) -> int:
    return int(np.count_nonzero(s < alpha / 2.0))


def field_values(model: FittedModel, points: np.ndarray, chunk: int | None = None) -> dict:
    """Full forward pass at f64 over arbitrary many points.

    Masking (the theta shift) applies only to stage-2 models, where W is
    binary; earlier phases evaluate the plain row minimum.

    Returns:
        dict with "a_C", "a_R", "s_star" arrays of length n.
    """
    hp = model.hp
    pc, pr = model_primitives(model)
    tc = model.T_C.astype(np.float64)
    tr = model.T_R.astype(np.float64)
    masked = model.phase == 2
    ones = np.ones(hp.c)
    wc = model.W_C.astype(np.float64).ravel() if masked else ones
    wr = model.W_R.astype(np.float64).ravel() if masked else ones
    if chunk is None:
        chunk = max(1024, int(8e6 / max(hp.p, 1)))
    n = len(points)
    a_c = np.empty(n)
    a_r = np.empty(n)
    for s in range(0, n, chunk):
        q = query_features(points[s : s + chunk])
        a_c[s : s + chunk] = union_min(intersect(asd(q, pc), tc), wc, hp.theta)
        a_r[s : s + chunk] = union_min(intersect(asd(q, pr), tr), wr, hp.theta)
    return {"a_C": a_c, "a_R": a_r, "s_star": difference_field(a_c, a_r, hp.alpha)}


def inside_predicate(model: FittedModel, points: np.ndarray) -> np.ndarray:
    """The quantized occupancy decision s* < alpha/2."""
    return field_values(model, points)["s_star"] < model.hp.alpha / 2.0


# ---------------------------------------------------------------------------
# importance metric


@dataclass
class Removal:
    kind: str  # "shape" | "primitive"
    branch: str  # "C" | "R"
    index: int


class FieldCache:
    """Precomputed relu(D) per branch for repeated T/W edits on fixed points.

    Used by the dropout sweep and by importance_delta so both compute the
    identical arithmetic (same matmul shapes and order).
    """

    def __init__(self, model: FittedModel, points: np.ndarray):
        if model.phase != 2:
            raise ValueError("field cache requires a stage-2 (binary) model")
        self.hp = model.hp
        pc, pr = model_primitives(model)
        q = query_features(points)
        self.relu_d = {
            "C": np.maximum(asd(q, pc), 0.0),
            "R": np.maximum(asd(q, pr), 0.0),
        }
        self.T = {"C": model.T_C.astype(np.float64), "R": model.T_R.astype(np.float64)}
        self.W = {
            "C": model.W_C.astype(np.float64).ravel(),
            "R": model.W_R.astype(np.float64).ravel(),
        }

    def a_branch(self, branch: str, T=None, W=None) -> np.ndarray:
        t = self.T[branch] if T is None else T
        w = self.W[branch] if W is None else W
        return union_min(self.relu_d[branch] @ t, w, self.hp.theta)

    def s_star(self, a_c: np.ndarray, a_r: np.ndarray) -> np.ndarray:
        return difference_field(a_c, a_r, self.hp.alpha)

    def inside(self, a_c: np.ndarray, a_r: np.ndarray) -> np.ndarray:
        return self.s_star(a_c, a_r) < self.hp.alpha / 2.0

    def commit(self, removal: Removal) -> None:
        if removal.kind == "shape":
            self.W[removal.branch] = self.W[removal.branch].copy()
            self.W[removal.branch][removal.index] = 0.0
        else:
            self.T[removal.branch] = self.T[removal.branch].copy()
            self.T[removal.branch][removal.index, :] = 0.0

    def removed_arrays(self, removal: Removal):
        """(T, W) for the removal's branch with the target zeroed, no commit."""
        t = self.T[removal.branch]
        w = self.W[removal.branch]
        if removal.kind == "shape":
            w = w.copy()
            w[removal.index] = 0.0
        else:
            t = t.copy()
            t[removal.index, :] = 0.0
        return t, w


def delta_s(base_inside: np.ndarray, mod_inside: np.ndarray, mode: str) -> int:
    if mode == "flips":
        return int(np.count_nonzero(base_inside != mod_inside))
    if mode == "count":
        return abs(int(base_inside.sum()) - int(mod_inside.sum()))
    raise ValueError(f"unknown delta_mode {mode!r}")


def importance_delta(model: FittedModel, occ, removal: Removal,
                     mode: str | None = None) -> int:
    """Change in the quantized inside set caused by one structural removal.

    Removal means W_i <- 0 for an intermediate shape or T(k,:) <- 0 for a
    primitive; the model itself is untouched. Default reading counts the
    points whose inside decision flips either way; mode="count" takes the
    absolute difference of the inside counts instead.

    Raises:
        ValueError: model not in stage 2, or the target is already inactive.
    """
    if model.phase != 2:
        raise ValueError("importance_delta requires a stage-2 model")
    if removal.branch not in ("C", "R"):
        raise ValueError(f"unknown branch {removal.branch!r}")
    w_arr = model.W_C if removal.branch == "C" else model.W_R
    t_arr = model.T_C if removal.branch == "C" else model.T_R
    if removal.kind == "shape":
        if w_arr.ravel()[removal.index] == 0:
            raise ValueError(f"intermediate shape {removal.branch}{removal.index} already inactive")
    elif removal.kind == "primitive":
        if not np.any(t_arr[removal.index, :] != 0):
            raise ValueError(f"primitive {removal.branch}{removal.index} already inactive")
    else:
        raise ValueError(f"unknown removal kind {removal.kind!r}")
    if mode is None:
        mode = model.hp.delta_mode

    cache = FieldCache(model, occ.points.astype(np.float64))
    a = {b: cache.a_branch(b) for b in ("C", "R")}
    base = cache.inside(a["C"], a["R"])
    t_mod, w_mod = cache.removed_arrays(removal)
    a_mod = cache.a_branch(removal.branch, t_mod, w_mod)
    other = "R" if removal.branch == "C" else "C"
    pair = {removal.branch: a_mod, other: a[other]}
    mod = cache.inside(pair["C"], pair["R"])
    return delta_s(base, mod, mode)


# ---------------------------------------------------------------------------
# differentiable graph builders (Tensors)


def primitives_graph(z, net_leaves: dict, p: int, slope: float, shared: bool):
    """Tape version of predict_primitives; returns 7 x p Tensors."""
    mq, mp = quad_sign_masks(p, dtype=z.values.dtype)
    h = ad.leaky_relu(ad.add(ad.matmul(z, net_leaves["W1"]), net_leaves["b1"]), slope)

    def head(wk, bk):
        raw = ad.reshape(ad.add(ad.matmul(h, net_leaves[wk]), net_leaves[bk]), (7, p))
        return ad.add(ad.mul(ad.Tensor(mq), ad.abs_(raw)), ad.mul(ad.Tensor(mp), raw))

    pc = head("W2c", "b2c")
    if shared:
        return pc, pc
    return pc, head("W2r", "b2r")


def intersect_graph(Q, P_cols, T):
    """Con = relu(Q @ P) @ T with P already in 7 x p layout."""
    return ad.matmul(ad.relu(ad.matmul(Q, P_cols)), T)


def union_min_graph(Con, W=None, theta: float = 100.0):
    """Row minimum, optionally with the (1 - W) * theta dropout shift."""
    if W is None:
        return ad.min_rows(Con)
    shift = ad.scale(ad.sub(1.0, W), theta)
    return ad.min_rows(ad.add(Con, shift))


def union_soft_graph(Con, W, ones_col):
    """clip01( (W * clip01(1 - Con)) @ ones )."""
    inner = ad.clip01(ad.sub(1.0, Con))
    return ad.clip01(ad.matmul(ad.mul(inner, W), ones_col))


def difference_graph(a_C, a_R, alpha: float):
    return ad.maximum(a_C, ad.sub(alpha, a_R))


def soft_difference_graph(a_C, a_R):
    return ad.mul(a_C, ad.sub(1.0, a_R))


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# header: magic "D2CM" | u32 version | u32 p | u32 c | u32 code | u32 H
#         | u32 phase | f32 alpha | f32 eta | f32 sigma | f32 theta
#         | u32 iters_per_stage | u32 dropout_interval | f32 lr | u32 batch
#         | u64 seed | u8 flags | u8 has_transform | [f64 scale, 3 x f64 translate]
# then f32 little-endian arrays in fixed order:
#   z, W1, b1, W2 (cover columns then residual), b2, T_C, T_R, W_C, W_R

_FLAG_SHARED = 1
_FLAG_DROPOUT = 2
_FLAG_DELTA_COUNT = 4


def save_model(path: str, model: FittedModel) -> None:
    hp = model.hp
    flags = (
        (_FLAG_SHARED if hp.shared_primitives else 0)
        | (_FLAG_DROPOUT if hp.dropout_enabled else 0)
        | (_FLAG_DELTA_COUNT if hp.delta_mode == "count" else 0)
    )
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<5I", _CKPT_VERSION, hp.p, hp.c, hp.code_size, hp.hidden))
        fh.write(struct.pack("<I4f", model.phase, hp.alpha, hp.eta, hp.sigma, hp.theta))
        fh.write(struct.pack("<2IfIQ", hp.iters_per_stage, hp.dropout_interval,
                             hp.lr, hp.batch, hp.seed))
        fh.write(struct.pack("<BB", flags, 1 if model.transform is not None else 0))
        if model.transform is not None:
            fh.write(struct.pack("<4d", model.transform.scale, *model.transform.translate))
        net = model.net
        w2 = np.hstack([net.W2c, net.W2r])
        b2 = np.hstack([net.b2c, net.b2r])
        for arr in (model.z, net.W1, net.b1, w2, b2,
                    model.T_C, model.T_R, model.W_C, model.W_R):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str) -> FittedModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        version, p, c, code, hidden = struct.unpack("<5I", fh.read(20))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        phase, alpha, eta, sigma, theta = struct.unpack("<I4f", fh.read(20))
        iters, interval, lr, batch, seed = struct.unpack("<2IfIQ", fh.read(24))
        flags, has_tr = struct.unpack("<BB", fh.read(2))
        transform = None
        if has_tr:
            vals = struct.unpack("<4d", fh.read(32))
            transform = NormalizationTransform(
                scale=vals[0], translate=np.asarray(vals[1:], dtype=np.float64)
            )
        hp = HyperParams(
            p=p, c=c, code_size=code, hidden=hidden,
            alpha=alpha, eta=eta, sigma=sigma, theta=theta,
            iters_per_stage=iters, dropout_interval=interval,
            lr=lr, batch=batch, seed=seed,
            shared_primitives=bool(flags & _FLAG_SHARED),
            dropout_enabled=bool(flags & _FLAG_DROPOUT),
            delta_mode="count" if flags & _FLAG_DELTA_COUNT else "flips",
        )

        def read(*shape):
            n = int(np.prod(shape))
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"truncated checkpoint: {path}")
            return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

        z = read(1, code)
        w1 = read(code, hidden)
        b1 = read(1, hidden)
        w2 = read(hidden, 2 * 7 * p)
        b2 = read(1, 2 * 7 * p)
        t_c = read(p, c)
        t_r = read(p, c)
        w_c = read(1, c)
        w_r = read(1, c)
    net = PrimitivePredictor(
        W1=w1, b1=b1,
        W2c=w2[:, : 7 * p].copy(), b2c=b2[:, : 7 * p].copy(),
        W2r=w2[:, 7 * p :].copy(), b2r=b2[:, 7 * p :].copy(),
    )
    return FittedModel(hp=hp, z=z, net=net, T_C=t_c, T_R=t_r,
                       W_C=w_c, W_R=w_r, phase=phase, transform=transform)
