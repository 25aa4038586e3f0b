"""
Shared fixtures for the principal_lab test suite.
"""

import logging
import sys

import numpy as np
import pytest

from principal_lab.agent import AgentKind, AgentModel
from principal_lab.env import Environment
from principal_lab.geometry import make_isometry
from principal_lab.model import instance_from_angles, reference_instance, separated_angles


def pytest_configure(config):
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(funcName)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def reference():
    return reference_instance()


@pytest.fixture
def myopic_env(reference):
    return Environment.create(reference, AgentModel(), seed=7)


@pytest.fixture
def adversarial_env(reference):
    return Environment.create(reference, AgentModel(kind=AgentKind.SLACK_ADVERSARIAL), seed=7)


@pytest.fixture
def separated_case():
    """A well-separated d=4, three-type instance with the isometry that separates it."""
    rng = np.random.default_rng(11)
    angles = separated_angles(3, 4, rng)
    iso = make_isometry(4, 11)
    return instance_from_angles(angles, iso, seed=11), iso, angles
