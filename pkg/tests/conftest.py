"""Shared fixtures; the expensive simulations run once per session."""

from __future__ import annotations

import time
from dataclasses import replace

import pytest

import elexsim as ex
from elexsim.circuits import example


class TimedRun:
    def __init__(self, result, seconds):
        self.result = result
        self.seconds = seconds


def _timed(circuit, cfg, method, controls=None):
    t0 = time.perf_counter()
    result = ex.run(circuit, cfg, method, controls)
    return TimedRun(result, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def hwrect_rkf():
    hw = example("hwrect")
    return _timed(hw.circuit, hw.cfg, "rkf")


@pytest.fixture(scope="session")
def hwrect_fe10():
    hw = example("hwrect")
    return _timed(hw.circuit, ex.SolverConfig(t_end=60e-3, h_init=10e-6), "fe")


@pytest.fixture(scope="session")
def hwrect_fe20():
    hw = example("hwrect")
    return _timed(hw.circuit, ex.SolverConfig(t_end=60e-3, h_init=20e-6), "fe")


@pytest.fixture(scope="session")
def hwrect_fe_oracle():
    # fine-step reference: h = tau_charge / 50
    hw = example("hwrect")
    return _timed(hw.circuit, ex.SolverConfig(t_end=60e-3, h_init=0.2e-6), "fe")


@pytest.fixture(scope="session")
def boost_run():
    bo = example("boost")
    return _timed(bo.circuit, bo.cfg, bo.method, bo.controls)


@pytest.fixture(scope="session")
def vsc_pair():
    vsc = example("vsc_cc")
    with_planner = _timed(vsc.circuit, vsc.cfg, vsc.method, vsc.controls)
    cfg_off = replace(vsc.cfg, crossover_planner=False)
    without_planner = _timed(vsc.circuit, cfg_off, vsc.method, vsc.controls)
    return with_planner, without_planner


@pytest.fixture(scope="session")
def buck_run():
    bk = example("buck_vc")
    return _timed(bk.circuit, bk.cfg, bk.method, bk.controls)
