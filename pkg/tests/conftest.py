import os
import sys

import numpy as np
import pytest

# 与 main.py 相同：把项目目录加入路径
project_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_dir not in sys.path:
    sys.path.insert(0, project_dir)

from convex_sets import Box
from geometry import SpaceGeometry
from mappings import KSchedule, MetricProjectionMap


@pytest.fixture
def plane():
    return SpaceGeometry.euclidean(2)


@pytest.fixture
def unit_box():
    return Box([-1.0, -1.0], [1.0, 1.0])


@pytest.fixture
def box_projection(plane, unit_box):
    """T = P_K，K = [-1,1]²，k_n ≡ 1"""
    return MetricProjectionMap(unit_box, plane)


@pytest.fixture
def box_projection_geometric(plane, unit_box):
    """同一映射，声明 k_n = 1 + 2^{-n}"""
    return MetricProjectionMap(unit_box, plane, k_schedule=KSchedule("geometric", 0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
