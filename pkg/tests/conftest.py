import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RELAYCAP_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow reproduction run; set RELAYCAP_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_simplex(rng, n):
    return rng.dirichlet(np.ones(n))


def random_channel(rng, m, n):
    return rng.dirichlet(np.ones(n), size=m)


def random_instance(rng, max_dim=8):
    """(theta, costs) with random sizes M, K, N in [2, max_dim]."""
    m, k, n = rng.integers(2, max_dim + 1, size=3)
    theta = random_channel(rng, m, k)
    costs = rng.uniform(0.0, 3.0, size=(m, n))
    return theta, costs


def bsc(eps):
    return np.array([[1 - eps, eps], [eps, 1 - eps]])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def acceptance_line(number, title, ok, detail=""):
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
