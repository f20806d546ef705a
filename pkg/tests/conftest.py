import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from frdiff.network import build_toy_network  # noqa: E402
from frdiff.schedule import NoiseSchedule  # noqa: E402

from models import trained_toy_dit  # noqa: E402


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.linear()


@pytest.fixture(scope="session")
def small_unet():
    return build_toy_network("toy_unet", width=8, depth=2, seed=3)


@pytest.fixture(scope="session")
def small_dit():
    return build_toy_network("toy_dit", width=16, depth=4, seed=4)


@pytest.fixture(scope="session")
def trained_dit(request):
    return trained_toy_dit(request.config.cache.mkdir("frdiff-models"))
