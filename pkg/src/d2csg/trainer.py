"""Per-shape three-stage optimization.

Stage 0 trains everything through the soft union and keeps T regularized
into [0,1] and W pulled toward 1. Stage 1 switches to the min-union field
with T still float. Stage 2 binarizes T (t > eta), sets W to all-ones,
freezes both, and keeps training only the MLP and the latent code, with
dropout sweeps pruning redundant structure.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network as nw
from .geometry import OccupancySet
from .network import FieldCache, FittedModel, HyperParams, Removal


class TrainingAbort(RuntimeError):
    """Raised when a loss goes non-finite; carries the offending batch."""

    def __init__(self, stage: int, iteration: int, batch_idx: np.ndarray, loss_value: float):
        self.stage = stage
        self.iteration = iteration
        self.batch_idx = batch_idx
        self.loss_value = loss_value
        super().__init__(
            f"non-finite loss {loss_value} at stage {stage} iteration {iteration}; "
            f"batch indices head: {batch_idx[:8].tolist()}"
        )


@dataclass
class StageConfig:
    stage: int
    iters: int
    t_phase: str  # "float" | "binary"
    w_phase: str  # "float" | "binary"
    losses: tuple
    dropout: bool

    @staticmethod
    def for_stage(stage: int, hp: HyperParams) -> "StageConfig":
        table = {
            0: ("float", "float", ("rec_plus", "T", "W"), False),
            1: ("float", "float", ("rec_star", "T"), False),
            2: ("binary", "binary", ("rec_star",), hp.dropout_enabled),
        }
        t_phase, w_phase, losses, dropout = table[stage]
        return StageConfig(stage, hp.iters_per_stage, t_phase, w_phase, losses, dropout)


@dataclass
class TrainState:
    model: FittedModel
    rng: np.random.Generator
    iteration: int = 0
    moments: dict = field(default_factory=dict)


@dataclass
class DropoutRecord:
    sweep: int
    branch: str
    kind: str  # "shape" | "primitive"
    index: int
    delta: int
    removed: bool


@dataclass
class SweepSummary:
    sweep: int
    stage_iteration: int
    inside_before: int
    inside_after: int
    n_removed: int


@dataclass
class DropoutLog:
    records: list = field(default_factory=list)
    sweeps: list = field(default_factory=list)

    def removed(self):
        return [r for r in self.records if r.removed]

    def to_json_dict(self) -> dict:
        return {
            "sweeps": [vars(s) for s in self.sweeps],
            "records": [vars(r) for r in self.records],
        }


@dataclass
class LossReport:
    stage_final: dict = field(default_factory=dict)  # stage -> final loss
    history: list = field(default_factory=list)  # (stage, iteration, loss)
    wall_seconds: float = 0.0
    n_iterations: int = 0

    def to_json_dict(self) -> dict:
        return {
            "stage_final": {str(k): v for k, v in self.stage_final.items()},
            "wall_seconds": self.wall_seconds,
            "n_iterations": self.n_iterations,
            "history": [list(h) for h in self.history],
        }


class Adam:
    """Adaptive moment estimation over named parameter blocks, in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# loss pieces (graph builders over Tensors)


def loss_rec_plus_graph(a_C, a_R, g):
    """MSE between s+ = a+_C * (1 - a+_R) and the 0/1 labels."""
    s_plus = nw.soft_difference_graph(a_C, a_R)
    return ad.mean(ad.square(ad.sub(s_plus, g)))


def loss_rec_star_graph(s_star, mask_in, mask_out, n_in: int, n_out: int, alpha: float):
    """Two-sided hinge: inside points push s* to 0, outside to >= alpha."""
    inside_term = ad.scale(ad.sum_(ad.mul(ad.square(s_star), mask_in)), 1.0 / max(n_in, 1))
    viol = ad.relu(ad.sub(alpha, s_star))
    outside_term = ad.scale(ad.sum_(ad.mul(ad.square(viol), mask_out)), 1.0 / max(n_out, 1))
    return ad.add(inside_term, outside_term)


def loss_T_graph(T_C, T_R):
    """Sum of max(-t, 0) + max(t - 1, 0) over both selection matrices."""
    def one(T):
        return ad.add(ad.sum_(ad.relu(ad.scale(T, -1.0))), ad.sum_(ad.relu(ad.sub(T, 1.0))))

    return ad.add(one(T_C), one(T_R))


def loss_W_graph(W_C, W_R):
    """Sum of |w - 1| over both weight vectors."""
    return ad.add(ad.sum_(ad.abs_(ad.sub(W_C, 1.0))), ad.sum_(ad.abs_(ad.sub(W_R, 1.0))))


def binarize_T(T: np.ndarray, eta: float) -> np.ndarray:
    """t > eta -> 1 else 0 (strict inequality), preserving dtype."""
    return (T > eta).astype(T.dtype)


# ---------------------------------------------------------------------------
# forward/loss assembly for one batch


def _stage_loss(model: FittedModel, cfg: StageConfig, q_batch: np.ndarray,
                labels: np.ndarray):
    """Build the stage's scalar loss on an active tape.

    Returns (loss Tensor, dict of leaf Tensors to update).
    """
    hp = model.hp
    net = model.net
    leaves = {
        "z": ad.Tensor(model.z),
        "W1": ad.Tensor(net.W1), "b1": ad.Tensor(net.b1),
        "W2c": ad.Tensor(net.W2c), "b2c": ad.Tensor(net.b2c),
        "W2r": ad.Tensor(net.W2r), "b2r": ad.Tensor(net.b2r),
    }
    trainable = dict(leaves)
    if hp.shared_primitives:
        trainable.pop("W2r")
        trainable.pop("b2r")
    pc, pr = nw.primitives_graph(leaves["z"], leaves, hp.p, net.slope, hp.shared_primitives)
    q_t = ad.Tensor(q_batch)

    if cfg.t_phase == "float":
        t_c = ad.Tensor(model.T_C)
        t_r = ad.Tensor(model.T_R)
        trainable["T_C"] = t_c
        trainable["T_R"] = t_r
    else:
        t_c = ad.Tensor(model.T_C)  # binary, frozen: not in trainable
        t_r = ad.Tensor(model.T_R)
    con_c = nw.intersect_graph(q_t, pc, t_c)
    con_r = nw.intersect_graph(q_t, pr, t_r)

    if cfg.stage == 0:
        w_c = ad.Tensor(model.W_C)
        w_r = ad.Tensor(model.W_R)
        trainable["W_C"] = w_c
        trainable["W_R"] = w_r
        ones_c = ad.Tensor(np.ones((hp.c, 1), dtype=np.float32))
        a_c = nw.union_soft_graph(con_c, w_c, ones_c)
        a_r = nw.union_soft_graph(con_r, w_r, ones_c)
        g = ad.Tensor(labels[:, None])
        loss = loss_rec_plus_graph(a_c, a_r, g)
        loss = ad.add(loss, loss_T_graph(t_c, t_r))
        loss = ad.add(loss, loss_W_graph(w_c, w_r))
        return loss, trainable

    if cfg.stage == 1:
        a_c = nw.union_min_graph(con_c)
        a_r = nw.union_min_graph(con_r)
    else:
        # binary W, frozen: the (1 - W) * theta shift enters as a constant
        w_c = ad.Tensor(model.W_C)
        w_r = ad.Tensor(model.W_R)
        a_c = nw.union_min_graph(con_c, w_c, hp.theta)
        a_r = nw.union_min_graph(con_r, w_r, hp.theta)
    s_star = nw.difference_graph(a_c, a_r, hp.alpha)
    mask_in = labels[:, None]
    mask_out = 1.0 - mask_in
    n_in = int(mask_in.sum())
    n_out = len(labels) - n_in
    loss = loss_rec_star_graph(
        s_star, ad.Tensor(mask_in), ad.Tensor(mask_out), n_in, n_out, hp.alpha
    )
    if cfg.stage == 1:
        loss = ad.add(loss, loss_T_graph(t_c, t_r))
    return loss, trainable


# ---------------------------------------------------------------------------
# dropout


def dropout_sweep(state: TrainState, occ: OccupancySet, log: DropoutLog) -> None:
    """One greedy pruning pass over intermediate shapes, then primitives.

    Candidates are tested against the current (already-pruned) model,
    cover branch before residual, ascending index; a removal is committed
    iff its importance delta falls below sigma. Every tested candidate is
    logged. The model's T/W arrays are updated in place at the end.
    """
    model = state.model
    hp = model.hp
    sweep_idx = len(log.sweeps)
    cache = FieldCache(model, occ.points.astype(np.float64))
    a = {b: cache.a_branch(b) for b in ("C", "R")}
    base_inside = cache.inside(a["C"], a["R"])
    before = int(base_inside.sum())

    n_removed = 0

    def test_and_commit(removal: Removal) -> None:
        nonlocal base_inside, n_removed
        t_mod, w_mod = cache.removed_arrays(removal)
        a_mod = cache.a_branch(removal.branch, t_mod, w_mod)
        other = "R" if removal.branch == "C" else "C"
        pair = {removal.branch: a_mod, other: a[other]}
        mod_inside = cache.inside(pair["C"], pair["R"])
        d = nw.delta_s(base_inside, mod_inside, hp.delta_mode)
        removed = d < hp.sigma
        log.records.append(DropoutRecord(sweep_idx, removal.branch, removal.kind,
                                         removal.index, d, removed))
        if removed:
            cache.commit(removal)
            a[removal.branch] = a_mod
            base_inside = mod_inside
            n_removed += 1

    for branch in ("C", "R"):
        for i in range(hp.c):
            if cache.W[branch][i] == 0.0:
                continue  # pruned in an earlier sweep
            test_and_commit(Removal("shape", branch, i))
    for branch in ("C", "R"):
        for k in range(hp.p):
            if not np.any(cache.T[branch][k, :] != 0.0):
                # never selected: zero impact by construction
                log.records.append(DropoutRecord(sweep_idx, branch, "primitive", k, 0, True))
                continue
            test_and_commit(Removal("primitive", branch, k))

    model.T_C = cache.T["C"].astype(np.float32)
    model.T_R = cache.T["R"].astype(np.float32)
    model.W_C = cache.W["C"].reshape(1, -1).astype(np.float32)
    model.W_R = cache.W["R"].reshape(1, -1).astype(np.float32)
    log.sweeps.append(SweepSummary(sweep_idx, state.iteration, before,
                                   int(base_inside.sum()), n_removed))


# ---------------------------------------------------------------------------
# stage runner


def run_stage(state: TrainState, cfg: StageConfig, occ: OccupancySet,
              log: DropoutLog, report: LossReport) -> TrainState:
    """Consume the stage's iteration budget with fresh optimizer moments.

    In stage 2 the dropout sweep fires at every dropout_interval iterations
    and additionally after the final optimizer step, so short desk-scale
    budgets still prune at least once.
    """
    model = state.model
    hp = model.hp
    model.phase = cfg.stage
    opt = Adam(hp.lr)
    n = len(occ.points)
    q_full = nw.query_features(occ.points).astype(np.float32)
    labels = occ.inside.astype(np.float32)
    loss_val = float("nan")

    for it in range(1, cfg.iters + 1):
        idx = state.rng.integers(0, n, size=hp.batch)
        tape = ad.Tape()
        with tape:
            loss, trainable = _stage_loss(model, cfg, q_full[idx], labels[idx])
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingAbort(cfg.stage, it, idx, loss_val)
        ad.backward(tape, loss)
        params = {k: t.values for k, t in trainable.items()}
        grads = {
            k: (t.grad if t.grad is not None else np.zeros_like(t.values))
            for k, t in trainable.items()
        }
        opt.step(params, grads)
        state.iteration += 1
        if it % 50 == 0 or it == cfg.iters:
            report.history.append((cfg.stage, it, loss_val))
        if cfg.dropout and (it % hp.dropout_interval == 0 or it == cfg.iters):
            dropout_sweep(state, occ, log)

    report.stage_final[cfg.stage] = loss_val
    report.n_iterations += cfg.iters
    return state


# ---------------------------------------------------------------------------
# full fit


def fit_shape(occ: OccupancySet, hp: HyperParams, transform=None):
    """Run stages 0, 1, 2 on one occupancy set.

    Returns:
        (FittedModel in stage 2, DropoutLog, LossReport). Deterministic for
        a fixed HyperParams.seed.

    Raises:
        ValueError: empty set or single-class labels.
        TrainingAbort: non-finite loss.
    """
    hp.validate()
    if len(occ.points) == 0:
        raise ValueError("empty occupancy set")
    if bool(occ.inside.all()) or not bool(occ.inside.any()):
        raise ValueError("occupancy labels must include both inside and outside points")

    t0 = time.perf_counter()
    rng = np.random.default_rng(hp.seed)
    model = nw.init_model(hp, rng, transform=transform)
    state = TrainState(model=model, rng=rng)
    log = DropoutLog()
    report = LossReport()

    for stage in (0, 1, 2):
        if stage == 2:
            model.T_C = binarize_T(model.T_C, hp.eta)
            model.T_R = binarize_T(model.T_R, hp.eta)
            model.W_C = np.ones_like(model.W_C)
            model.W_R = np.ones_like(model.W_R)
        run_stage(state, StageConfig.for_stage(stage, hp), occ, log, report)

    model.phase = 2
    report.wall_seconds = time.perf_counter() - t0
    return model, log, report


# ---------------------------------------------------------------------------
# log formatting


def format_train_log(hp: HyperParams, report: LossReport, log: DropoutLog) -> str:
    """Line-oriented plain-text training log."""
    lines = [
        f"fit p={hp.p} c={hp.c} code={hp.code_size} hidden={hp.hidden} "
        f"iters/stage={hp.iters_per_stage} batch={hp.batch} lr={hp.lr} seed={hp.seed}"
    ]
    for stage, it, loss in report.history:
        lines.append(f"stage {stage} iter {it:6d} loss {loss:.6f}")
    for s in log.sweeps:
        lines.append(
            f"dropout sweep {s.sweep} at iteration {s.stage_iteration}: "
            f"inside {s.inside_before} -> {s.inside_after}, removed {s.n_removed}"
        )
    for r in log.removed():
        lines.append(
            f"  removed {r.kind} {r.branch}{r.index} (sweep {r.sweep}, delta {r.delta})"
        )
    for stage in sorted(report.stage_final):
        lines.append(f"stage {stage} final loss {report.stage_final[stage]:.6f}")
    lines.append(f"wall {report.wall_seconds:.1f}s over {report.n_iterations} iterations")
    return "\n".join(lines) + "\n"
