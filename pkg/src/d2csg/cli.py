"""Command-line surface: fit, eval, export, inspect.

Exit codes: 0 success, 1 invalid input or usage, 2 training abort
(non-finite loss).  Every fit directory is self-describing — the stored
config snapshot reruns to identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from . import network as nw
from .exporter import classify_quadric, emit_openscad
from .extract import (DEFAULT_GRID, compactness, export_obj, extract_tree,
                      load_tree, marching_cubes, save_tree)
from .geometry import (OrientedPointCloud, load_mesh, load_xyz,
                       normalize_pointcloud, normalize_to_unit_box,
                       sample_occupancy_from_mesh,
                       sample_occupancy_from_pointcloud)
from .metrics import SURFACE_SAMPLES, SampledSurface, metric_report, sample_surface
from .scadlint import lint_scad
from .trainer import TrainingAbort, fit_shape

MESH_EXTS = (".obj", ".stl", ".off")
PC_EXTS = (".xyz",)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABORT = 2


class CliError(Exception):
    """Invalid input or usage; maps to exit code 1."""


@dataclass
class RunConfig:
    """Everything a fit needs; unknown keys are rejected on load."""

    input: str = ""
    input_kind: str = ""  # mesh | pointcloud
    out: str = ""
    res: int = DEFAULT_GRID
    hyperparams: nw.HyperParams = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.hyperparams is None:
            self.hyperparams = nw.HyperParams()

    def validate(self) -> None:
        if self.input_kind not in ("mesh", "pointcloud"):
            raise CliError(f"unknown input kind {self.input_kind!r}")
        if not self.input:
            raise CliError("no input path")
        if not self.out:
            raise CliError("no output directory")
        if self.res < 16:
            raise CliError("resolution must be >= 16")
        try:
            self.hyperparams.validate()
        except ValueError as exc:
            raise CliError(str(exc)) from exc

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["hyperparams"] = asdict(self.hyperparams)
        return d


_TOP_KEYS = {f.name for f in fields(RunConfig)}
_HP_KEYS = {f.name for f in fields(nw.HyperParams)}


def config_from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    hp_doc = dict(doc.get("hyperparams") or {})
    unknown = set(hp_doc) - _HP_KEYS
    if unknown:
        raise CliError(f"unknown hyperparameter keys: {sorted(unknown)}")
    cfg = RunConfig(**{k: v for k, v in doc.items() if k != "hyperparams"})
    cfg.hyperparams = nw.HyperParams(**hp_doc)
    return cfg


def _load_config_file(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise CliError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError("config file must hold a JSON object")
    return config_from_dict(doc)


# flag name -> hyperparameter field
_FLAG_TO_HP = {
    "seed": "seed", "p": "p", "c": "c", "iters": "iters_per_stage",
    "alpha": "alpha", "eta": "eta", "sigma": "sigma", "theta": "theta",
}


def _merge_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Explicit flags beat config-file values."""
    for flag, field in _FLAG_TO_HP.items():
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg.hyperparams, field, val)
    if getattr(args, "res", None) is not None:
        cfg.res = args.res
    if getattr(args, "mesh", None):
        cfg.input, cfg.input_kind = args.mesh, "mesh"
    if getattr(args, "pc", None):
        cfg.input, cfg.input_kind = args.pc, "pointcloud"
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def _thread_cap() -> int | None:
    raw = os.environ.get("D2CSG_THREADS", "").strip()
    if not raw:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise CliError(f"D2CSG_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise CliError("D2CSG_THREADS must be >= 1")
    return cap


# ---------------------------------------------------------------------------
# fit


def _load_normalized(cfg: RunConfig):
    """Returns (occupancy, transform, truth SampledSurface)."""
    if not os.path.isfile(cfg.input):
        raise CliError(f"input not found: {cfg.input}")
    seed = cfg.hyperparams.seed
    if cfg.input_kind == "mesh":
        mesh = load_mesh(cfg.input)
        mesh_n, tr = normalize_to_unit_box(mesh)
        occ = sample_occupancy_from_mesh(mesh_n, seed)
        truth = sample_surface(mesh_n, seed=0)
        return occ, tr, truth
    cloud = load_xyz(cfg.input)
    cloud_n, tr = normalize_pointcloud(cloud)
    occ = sample_occupancy_from_pointcloud(cloud_n, seed)
    n = len(cloud_n.points)
    if n > SURFACE_SAMPLES:
        keep = np.random.default_rng(0).choice(n, SURFACE_SAMPLES, replace=False)
        truth = SampledSurface(points=cloud_n.points[keep],
                               normals=cloud_n.normals[keep])
    else:
        truth = SampledSurface(points=cloud_n.points, normals=cloud_n.normals)
    return occ, tr, truth


def _fit_one(cfg: RunConfig) -> dict:
    cfg.validate()
    occ, transform, truth = _load_normalized(cfg)
    t0 = time.perf_counter()
    model, dlog, report = fit_shape(occ, cfg.hyperparams, transform=transform)
    wall = time.perf_counter() - t0

    tree = extract_tree(model)  # raises before anything is written
    os.makedirs(cfg.out, exist_ok=True)
    nw.save_model(os.path.join(cfg.out, "model.d2cm"), model)
    save_tree(tree, os.path.join(cfg.out, "tree.json"))
    recon = marching_cubes(model, resolution=cfg.res)
    export_obj(recon, os.path.join(cfg.out, "recon.obj"))

    compact = compactness(tree, model, recon, seed=0)
    if recon.is_empty:
        metrics = {"error": "empty reconstruction", **compact}
    else:
        recon_s = sample_surface(recon.as_triangle_mesh(), seed=0)
        metrics = metric_report(recon_s, truth, compact=compact)
    with open(os.path.join(cfg.out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")

    with open(os.path.join(cfg.out, "dropout.json"), "w", encoding="utf-8") as fh:
        json.dump(dlog.to_json_dict(), fh, indent=2)
        fh.write("\n")
    with open(os.path.join(cfg.out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_json_dict(), fh, indent=2)
        fh.write("\n")

    with open(os.path.join(cfg.out, "train.log"), "w", encoding="utf-8") as fh:
        fh.write(f"d2csg {__version__}\n")
        fh.write(f"input: {cfg.input} ({cfg.input_kind})\n")
        fh.write(f"seed: {cfg.hyperparams.seed}\n")
        fh.write(f"wall_seconds: {wall:.3f}\n")
        for stage, final in sorted(report.stage_final.items()):
            fh.write(f"stage {stage} final loss: {final:.6f}\n")
        fh.write(f"iterations: {report.n_iterations}\n")
        fh.write(f"dropout removals: {len(dlog.removed())}\n")
        for stage, it, loss in report.history:
            fh.write(f"  s{stage} it{it:6d} loss {loss:.6f}\n")
    return metrics


def _fit_batch_worker(doc: dict) -> tuple[str, str]:
    cfg = config_from_dict(doc)
    try:
        _fit_one(cfg)
        return cfg.input, ""
    except (CliError, TrainingAbort, ValueError) as exc:
        return cfg.input, str(exc) or type(exc).__name__


def _batch_inputs(root: str, kind: str) -> list[str]:
    exts = MESH_EXTS if kind == "mesh" else PC_EXTS
    names = sorted(n for n in os.listdir(root)
                   if os.path.splitext(n)[1].lower() in exts)
    if not names:
        raise CliError(f"no {'/'.join(exts)} files in {root}")
    return [os.path.join(root, n) for n in names]


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _load_config_file(args.config) if args.config else RunConfig()
    cfg = _merge_flags(cfg, args)
    if not cfg.input:
        raise CliError("fit needs --mesh or --pc (or a config file naming one)")
    if not cfg.out:
        raise CliError("fit needs --out")

    if os.path.isdir(cfg.input):
        jobs = args.jobs or 1
        cap = _thread_cap()
        if cap is not None:
            jobs = min(jobs, cap)
        tasks = []
        for path in _batch_inputs(cfg.input, cfg.input_kind):
            sub = config_from_dict(cfg.to_json_dict())
            sub.input = path
            sub.out = os.path.join(cfg.out, os.path.splitext(os.path.basename(path))[0])
            sub.validate()
            tasks.append(sub.to_json_dict())
        failures = []
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for path, err in pool.map(_fit_batch_worker, tasks):
                    print(f"{path}: {'ok' if not err else err}")
                    if err:
                        failures.append(path)
        else:
            for doc in tasks:
                path, err = _fit_batch_worker(doc)
                print(f"{path}: {'ok' if not err else err}")
                if err:
                    failures.append(path)
        if failures:
            print(f"{len(failures)} of {len(tasks)} fits failed", file=sys.stderr)
            return EXIT_USAGE
        return EXIT_OK

    metrics = _fit_one(cfg)
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _recon_surface(path: str, res: int):
    """(SampledSurface, compact dict | None) for an OBJ or checkpoint."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".d2cm":
        model = nw.load_model(path)
        iso = marching_cubes(model, resolution=res)
        if iso.is_empty:
            raise CliError(f"checkpoint meshes to an empty surface: {path}")
        compact = None
        if model.phase == 2:
            compact = compactness(extract_tree(model), model, iso, seed=0)
        return sample_surface(iso.as_triangle_mesh(), seed=0), compact
    if ext in MESH_EXTS:
        mesh = load_mesh(path)
        if np.abs(mesh.vertices).max() > 0.75:
            print(f"warning: {path} extends beyond the unit box; "
                  "did you evaluate an unnormalized mesh?", file=sys.stderr)
        return sample_surface(mesh, seed=0), None
    raise CliError(f"cannot evaluate {path!r}: expected .d2cm or a mesh file")


def _truth_surface(path: str):
    if not os.path.isfile(path):
        raise CliError(f"ground-truth mesh not found: {path}")
    mesh = load_mesh(path)
    mesh_n, _ = normalize_to_unit_box(mesh)
    return sample_surface(mesh_n, seed=0)


def _eval_one(recon_path: str, truth_path: str, res: int) -> dict:
    recon_s, compact = _recon_surface(recon_path, res)
    truth_s = _truth_surface(truth_path)
    return metric_report(recon_s, truth_s, compact=compact)


def _match_truth(stem: str, truth_root: str) -> str | None:
    for ext in MESH_EXTS:
        cand = os.path.join(truth_root, stem + ext)
        if os.path.isfile(cand):
            return cand
    return None


def cmd_eval(args: argparse.Namespace) -> int:
    res = args.res or DEFAULT_GRID
    if os.path.isdir(args.recon):
        if not os.path.isdir(args.mesh):
            raise CliError("batch eval needs --mesh pointing at a directory "
                           "of ground-truth meshes")
        names = sorted(n for n in os.listdir(args.recon)
                       if os.path.splitext(n)[1].lower() in (".d2cm", ".obj"))
        if not names:
            raise CliError(f"no .d2cm/.obj reconstructions in {args.recon}")
        rows = []
        for name in names:
            stem = os.path.splitext(name)[0]
            truth = _match_truth(stem, args.mesh)
            if truth is None:
                print(f"warning: no ground truth for {stem}, skipped",
                      file=sys.stderr)
                continue
            row = _eval_one(os.path.join(args.recon, name), truth, res)
            row = {"shape": stem, **row}
            rows.append(row)
        if not rows:
            raise CliError("nothing evaluated")
        mean = {"shape": "mean"}
        for key in ("cd", "nc", "ecd", "numP", "numIS", "numSeg"):
            vals = [r[key] for r in rows if r.get(key) is not None]
            mean[key] = float(np.mean(vals)) if vals else None
        rows.append(mean)
        lines = [json.dumps({k: v for k, v in r.items() if k != "conventions"})
                 for r in rows]
        text = "\n".join(lines) + "\n"
        sys.stdout.write(text)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        return EXIT_OK

    if not os.path.isfile(args.recon):
        raise CliError(f"reconstruction not found: {args.recon}")
    report = _eval_one(args.recon, args.mesh, res)
    text = json.dumps(report, indent=2) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# export


def _load_tree_any(path: str):
    """(tree, seed | None) from tree.json or a checkpoint."""
    if not os.path.isfile(path):
        raise CliError(f"input not found: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".json":
        return load_tree(path), None
    if ext == ".d2cm":
        model = nw.load_model(path)
        if model.phase != 2:
            raise CliError("checkpoint is not a finished (stage-2) model")
        return extract_tree(model), model.hp.seed
    raise CliError(f"cannot export {path!r}: expected tree.json or .d2cm")


def cmd_export(args: argparse.Namespace) -> int:
    try:
        tree, seed = _load_tree_any(args.input)
    except ValueError as exc:
        raise CliError(str(exc))
    transform = tree.transform if args.world else None
    if args.world and tree.transform is None:
        print("warning: no stored transform; emitting normalized coordinates",
              file=sys.stderr)
    try:
        script = emit_openscad(tree, transform=transform,
                               classify=not args.no_classify, seed=seed)
    except ValueError as exc:
        raise CliError(str(exc))
    out = args.out or os.path.splitext(args.input)[0] + ".scad"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(script)
    issues = lint_scad(script)
    for issue in issues:
        print(f"lint: {issue}", file=sys.stderr)
    print(out)
    return EXIT_OK if not issues else EXIT_USAGE


# ---------------------------------------------------------------------------
# inspect


def _leaf_kind(leaf) -> str:
    coeffs = np.asarray(leaf.coeffs)
    if leaf.inverted:
        coeffs = -coeffs
    prim = classify_quadric(coeffs)
    kind = prim.kind if prim is not None else "quadric"
    return f"~{kind}" if leaf.inverted else kind


def _inspect_doc(path: str) -> dict:
    tree, _ = _load_tree_any(path)
    branches = {}
    for label, shapes in (("cover", tree.cover), ("residual", tree.residual)):
        rows = []
        for idx, inter in enumerate(shapes):
            rows.append({
                "shape": idx,
                "leaves": len(inter),
                "convex": sum(not l.inverted for l in inter),
                "inverse": sum(l.inverted for l in inter),
                "kinds": [_leaf_kind(l) for l in inter],
            })
        branches[label] = rows
    doc = {
        "source": path,
        "numP": len(tree.distinct_leaves()),
        "numIS": len(tree.cover) + len(tree.residual),
        "universal_columns": tree.universal_columns,
        "branches": branches,
        "transform": tree.transform.to_dict() if tree.transform else None,
    }
    dropout_path = os.path.join(os.path.dirname(path) or ".", "dropout.json")
    if os.path.isfile(dropout_path):
        with open(dropout_path, encoding="utf-8") as fh:
            doc["dropout"] = json.load(fh)
    return doc


def cmd_inspect(args: argparse.Namespace) -> int:
    doc = _inspect_doc(args.input)
    if args.json:
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    print(f"{doc['source']}: {doc['numP']} primitives, "
          f"{doc['numIS']} intermediate shapes")
    for label in ("cover", "residual"):
        rows = doc["branches"][label]
        if not rows:
            print(f"{label}: empty")
            continue
        print(f"{label}:")
        for row in rows:
            kinds = ", ".join(row["kinds"])
            print(f"  shape {row['shape']}: {row['leaves']} leaves "
                  f"({row['convex']} convex, {row['inverse']} inverse): {kinds}")
    if doc["universal_columns"]:
        print(f"universal (whole-space) shapes: {doc['universal_columns']}")
    drop = doc.get("dropout")
    if drop:
        removed = [r for r in drop.get("records", []) if r.get("removed")]
        print(f"dropout: {len(removed)} removals")
        for r in removed:
            print(f"  {r.get('kind', '?')} {r.get('branch', '?')}"
                  f"[{r.get('index', '?')}] dS={r.get('delta', '?')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="d2csg",
                  description="Fit, evaluate, and export compact CSG "
                              "programs for solid shapes.")
    top.add_argument("--version", action="version", version=f"d2csg {__version__}")
    sub = top.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a CSG program to a mesh or point cloud")
    src = p_fit.add_mutually_exclusive_group()
    src.add_argument("--mesh", help="watertight mesh (.obj/.stl/.off) or directory")
    src.add_argument("--pc", help="oriented point cloud (.xyz) or directory")
    p_fit.add_argument("--out", help="output directory")
    p_fit.add_argument("--config", help="JSON config; explicit flags win")
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--p", type=int, help="primitive count")
    p_fit.add_argument("--c", type=int, help="intermediate shapes per branch")
    p_fit.add_argument("--iters", type=int, help="iterations per stage")
    p_fit.add_argument("--alpha", type=float)
    p_fit.add_argument("--eta", type=float)
    p_fit.add_argument("--sigma", type=float)
    p_fit.add_argument("--theta", type=float)
    p_fit.add_argument("--res", type=int, help="reconstruction grid resolution")
    p_fit.add_argument("--jobs", type=int, help="parallel fits for directory input")
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval", help="score a reconstruction against ground truth")
    p_eval.add_argument("recon", help=".obj, .d2cm, or directory of either")
    p_eval.add_argument("--mesh", required=True,
                        help="ground-truth mesh (or directory in batch mode)")
    p_eval.add_argument("--out", help="also write the report here")
    p_eval.add_argument("--res", type=int, help="meshing resolution for checkpoints")
    p_eval.set_defaults(func=cmd_eval)

    p_exp = sub.add_parser("export", help="emit an OpenSCAD script")
    p_exp.add_argument("input", help="tree.json or model.d2cm")
    p_exp.add_argument("--out", help="output .scad path")
    p_exp.add_argument("--world", action="store_true",
                       help="restore original input coordinates")
    p_exp.add_argument("--no-classify", action="store_true",
                       help="emit every leaf as a polyhedron")
    p_exp.set_defaults(func=cmd_export)

    p_ins = sub.add_parser("inspect", help="summarize a fitted program")
    p_ins.add_argument("input", help="tree.json or model.d2cm")
    p_ins.add_argument("--json", action="store_true")
    p_ins.set_defaults(func=cmd_inspect)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
