import numpy as np
import pytest
from hypothesis import settings

from segnl.phantom import PhantomSpec

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    """Half-resolution phantom used wherever a full-size one is not needed."""
    return PhantomSpec(
        dims=(32, 32, 16),
        brain_semi_axes=(13.5, 14.5, 6.5),
        ventricle_offset_x=4.0,
        ventricle_offset_y=1.0,
        ventricle_semi_axes=(2.5, 4.5, 3.0),
        center_jitter_std=0.5,
    )


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    """Largest absolute deviation relative to the largest gradient entry.

    A per-entry ratio is dominated by rounding noise on near-zero entries,
    so the tensor's own scale is the reference.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def tiny_config_dict(output_dir, **overrides):
    """A run small enough to go end to end in a few seconds."""
    d = {
        "output_dir": str(output_dir),
        "seed": 3,
        "cohort": {"n_train": 2, "n_val": 1, "n_test": 2},
        "unet": {"depth": 2, "base_filters": 4},
        "train": {"epochs": 2, "lr_drop_epoch": 1, "lr_initial": 1e-3},
        "metrics": {"n_bootstraps": 200},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            d.setdefault(key, {}).update(value)
        else:
            d[key] = value
    return d


def write_config(path, d):
    import json

    path.write_text(json.dumps(d))
    return str(path)


ACCEPTANCE_LINES = {}


@pytest.fixture
def verdict(request):
    """Record a one-line PASS/FAIL summary for an acceptance criterion."""

    def record(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
