"""Shared fixtures: the two benchmark models and their published filters."""

import numpy as np
import pytest

from linfdeconv.fault import pendulum_model
from linfdeconv.model import (
    DeconvolutionFilter,
    PolytopicModel,
    StochasticLtiSystem,
)


def example1_vertex(a: float) -> StochasticLtiSystem:
    """Uncertain two-state plant, parameterized by the scalar a."""
    return StochasticLtiSystem(
        A=[[-0.1, 3.0 + 0.5 * a], [-3.0, -4.0]],
        B1=[[-0.5 * a], [0.9 * a]],
        C1=[[0.0, 0.0]],
        C2=[[0.8, 0.8 * (1.0 + a)]],
        D11=[[1.0]],
        D2=[[0.45 - 0.5 * a]],
        G1=[[0.5, 0.0], [0.0, 0.5]],
        G2=[[0.1], [0.1]],
    )


@pytest.fixture(scope="session")
def example1() -> PolytopicModel:
    return PolytopicModel((example1_vertex(-0.3), example1_vertex(0.3)))


@pytest.fixture(scope="session")
def example1_mid() -> StochasticLtiSystem:
    return example1_vertex(0.0)


@pytest.fixture(scope="session")
def filter_quadratic_published() -> DeconvolutionFilter:
    """Published quadratic design for example1 (level 0.7278 at rate 2.5)."""
    return DeconvolutionFilter(
        Af=[[-2.7521, 0.2916], [-4.8316, -3.8401]],
        Bf=[[0.6383], [0.4485]],
        Cf=[[-0.2142, -0.2326]],
        Df=[[2.3112]],
    )


@pytest.fixture(scope="session")
def filter_improved_published() -> DeconvolutionFilter:
    """Published improved design for example1 (level 0.6932 at rate 2.7)."""
    return DeconvolutionFilter(
        Af=[[-0.0087, 2.7929], [-3.3489, -3.8237]],
        Bf=[[0.1717], [-0.4366]],
        Cf=[[0.4156, 0.4031]],
        Df=[[2.3310]],
    )


@pytest.fixture(scope="session")
def filter_fault_published() -> DeconvolutionFilter:
    """Published pendulum fault-estimation filter (level 1.0 at rate 2)."""
    return DeconvolutionFilter(
        Af=[[-0.6364, 2.8163], [-23.3901, -79.5138]],
        Bf=[[0.0056], [-0.0650]],
        Cf=[[0.1048, -0.0344], [0.2515, 0.0294]],
        Df=[[0.5073], [0.4925]],
    )


@pytest.fixture(scope="session")
def pendulum():
    return pendulum_model()


def random_esms_system(rng: np.random.Generator, n=2, q=1, r=1, m=1,
                       noise=0.3) -> StochasticLtiSystem:
    """Random plant, shifted until the mean-square stability oracle passes."""
    from linfdeconv.model import esms_spectral_oracle

    for _ in range(100):
        A = rng.normal(size=(n, n))
        A -= (np.max(np.linalg.eigvals(A).real) + rng.uniform(0.5, 2.0)) * np.eye(n)
        G1 = noise * rng.normal(size=(n, n))
        if esms_spectral_oracle(A, G1).stable:
            return StochasticLtiSystem(
                A=A,
                B1=rng.normal(size=(n, q)),
                C1=rng.normal(size=(m, n)),
                C2=rng.normal(size=(r, n)),
                D11=rng.normal(size=(m, q)),
                D2=rng.normal(size=(r, q)),
                G1=G1,
                G2=noise * rng.normal(size=(n, q)),
            )
    raise RuntimeError("could not draw a mean-square stable plant")
