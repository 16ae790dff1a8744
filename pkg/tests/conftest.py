"""Shared fixtures.  Trained priors are cached per session."""

from __future__ import annotations

import numpy as np
import pytest

from flowlab import experiments as ex
from flowlab.config import preset
from flowlab.datasets import generate_dataset


@pytest.fixture(scope="session")
def gauss2_cfg():
    return preset("gauss2")


@pytest.fixture(scope="session")
def gauss2_data(gauss2_cfg):
    return generate_dataset(gauss2_cfg.dataset_spec())


@pytest.fixture(scope="session")
def gauss2_prior(gauss2_cfg, gauss2_data):
    """``(params, losses)`` of the default 2,000-step gauss2 prior."""
    return ex.train_prior_from_config(gauss2_cfg, gauss2_data)


@pytest.fixture(scope="session")
def gauss2_net(gauss2_prior):
    return gauss2_prior[0]


@pytest.fixture(scope="session")
def shapes_cfg():
    return preset("shapes16")


@pytest.fixture(scope="session")
def shapes_data(shapes_cfg):
    return generate_dataset(shapes_cfg.dataset_spec())


@pytest.fixture(scope="session")
def shapes_net(shapes_cfg, shapes_data):
    return ex.train_prior_from_config(shapes_cfg, shapes_data)[0]


class ConstantField:
    """Stub velocity field returning a fixed vector for every input."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)
        self.dim = self.c.size

    def velocity(self, x, t, class_id=0):
        return np.broadcast_to(self.c, np.shape(x)).copy()

    def vjp_x(self, x, t, class_id, upstream):
        return np.zeros_like(np.asarray(upstream, dtype=np.float64))


@pytest.fixture(scope="session")
def constant_field():
    return ConstantField


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one pass/fail line and asserts ``ok``."""

    def report(n: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
