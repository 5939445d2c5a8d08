"""Shared fixtures: the double-pendulum-on-a-cart benchmark configuration."""

import numpy as np
import pytest

from lossympc.model import (
    ControlSpec,
    InitialBelief,
    SystemModel,
    synthesize_gains,
    validate_model,
)

PENDULUM_A = np.array([
    [1.0005, 0.01, -0.0005, 0.0],
    [0.098, 1.0005, -0.0981, -0.0005],
    [-0.0005, 0.0, 1.0015, 0.01],
    [-0.0981, -0.0005, 0.2942, 1.0015],
])
PENDULUM_B = np.array([
    [0.0001, -0.0001],
    [0.01, -0.02],
    [-0.0001, 0.0003],
    [-0.02, 0.05],
])
PENDULUM_C = np.array([
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
])
PENDULUM_X0 = np.array([-0.8, 0.4, 0.55, -0.5])


@pytest.fixture(scope="session")
def pendulum_model() -> SystemModel:
    return SystemModel(
        A=PENDULUM_A,
        B=PENDULUM_B,
        C=PENDULUM_C,
        D=np.eye(4),
        Sigma_w=np.diag([0.5, 0.2, 0.9, 0.3]),
        Sigma_v=1.1 * np.eye(2),
        lam=0.6,
    )


@pytest.fixture(scope="session")
def pendulum_spec() -> ControlSpec:
    return ControlSpec(
        Q=np.diag([10.0, 0.1, 10.0, 0.1]),
        R=1e-4 * np.eye(2),
        H=np.array([[0.0, 0.1, 0.0, -0.1], [0.1, 0.0, -0.1, 0.0]]),
        beta=0.95,
        epsilon=111.0,
        N=5,
    )


@pytest.fixture(scope="session")
def pendulum_belief() -> InitialBelief:
    v = np.array([1.0, -1.0, -1.0, 1.0])
    return InitialBelief(
        x_hat0=np.array([0.1, 0.05, 0.1, 0.05]),
        Sigma0=0.5 * np.outer(v, v),
    )


@pytest.fixture(scope="session")
def pendulum_gains(pendulum_model, pendulum_spec):
    validate_model(pendulum_model, pendulum_spec)
    return synthesize_gains(pendulum_model, pendulum_spec)
