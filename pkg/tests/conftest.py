"""Shared fixtures: desk-scale fits (session-scoped, minutes of CPU) and
the acceptance-criteria result board printed after the run."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import pytest

import shapes
from d2csg import cli
from d2csg.geometry import OccupancySet
from d2csg.network import FittedModel, HyperParams
from d2csg.trainer import DropoutLog, LossReport, fit_shape

# ---------------------------------------------------------------------------
# acceptance result board

_RESULTS: dict[int, str] = {}
_N_CRITERIA = 12


def record_criterion(num: int, passed: bool, detail: str) -> None:
    _RESULTS[num] = f"criterion {num:2d}: {'PASS' if passed else 'FAIL'} — {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, _N_CRITERIA + 1):
        terminalreporter.write_line(
            _RESULTS.get(num, f"criterion {num:2d}: NOT RUN"))


# ---------------------------------------------------------------------------
# session fits


@dataclass
class FitResult:
    model: FittedModel
    log: DropoutLog
    report: LossReport
    occ: OccupancySet
    wall_seconds: float


def _fit(occ: OccupancySet, hp: HyperParams) -> FitResult:
    t0 = time.perf_counter()
    model, log, report = fit_shape(occ, hp)
    return FitResult(model, log, report, occ, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def sphere_fit() -> FitResult:
    hp = HyperParams(p=16, c=4, iters_per_stage=2000, dropout_interval=1000,
                     seed=3)
    return _fit(shapes.sphere_occupancy(0), hp)


@pytest.fixture(scope="session")
def cube_fit() -> FitResult:
    hp = HyperParams(p=64, c=8, iters_per_stage=4000, dropout_interval=2000,
                     seed=7)
    return _fit(shapes.cube_cyl_occupancy(0), hp)


@pytest.fixture(scope="session")
def plate_fit() -> FitResult:
    hp = HyperParams(p=64, c=8, iters_per_stage=8000, dropout_interval=4000,
                     seed=5)
    return _fit(shapes.plate_occupancy(0), hp)


def _cube16_hp(**kw) -> HyperParams:
    return HyperParams(p=16, c=4, iters_per_stage=4000, dropout_interval=2000,
                       seed=7, **kw)


@pytest.fixture(scope="session")
def cube16_dual() -> FitResult:
    return _fit(shapes.cube_cyl_occupancy(0), _cube16_hp())


@pytest.fixture(scope="session")
def cube16_nodropout() -> FitResult:
    return _fit(shapes.cube_cyl_occupancy(0), _cube16_hp(dropout_enabled=False))


@pytest.fixture(scope="session")
def cube16_shared() -> FitResult:
    return _fit(shapes.cube_cyl_occupancy(0), _cube16_hp(shared_primitives=True))


# ---------------------------------------------------------------------------
# CLI runs (also the determinism pair)


@pytest.fixture(scope="session")
def gt_sphere_obj(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("gt") / "sphere.obj"
    shapes.write_obj(shapes.icosphere(subdiv=3), path)
    return str(path)


@pytest.fixture(scope="session")
def cli_fit_runs(tmp_path_factory, gt_sphere_obj):
    """Two identical CLI fits; returns (dir1, dir2, metrics dict of run 1)."""
    root = tmp_path_factory.mktemp("cli_runs")
    args = ["fit", "--mesh", gt_sphere_obj, "--p", "16", "--c", "4",
            "--iters", "600", "--seed", "3", "--res", "64"]
    outs = []
    for name in ("run_a", "run_b"):
        out = str(root / name)
        code = cli.main(args + ["--out", out])
        assert code == 0, f"cli fit failed for {name}"
        outs.append(out)
    with open(f"{outs[0]}/metrics.json", encoding="utf-8") as fh:
        metrics = json.load(fh)
    return outs[0], outs[1], metrics


# ---------------------------------------------------------------------------
# misc


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
