import numpy as np
import pytest


def rel_err(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(floor, abs(analytic), abs(numeric))


def fd_gradient(f, tensor, h=1e-5):
    """Central finite differences of scalar f() w.r.t. every entry of tensor."""
    flat = tensor.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = f()
        flat[i] = orig - h
        lm = f()
        flat[i] = orig
        grad[i] = (lp - lm) / (2 * h)
    return grad.reshape(tensor.shape)


def max_rel_err(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


@pytest.fixture(scope="session")
def micro_dataset():
    """Tiny dataset shared by training-path tests (16x16, 3 types)."""
    from ufad.data import DatasetConfig, make_dataset

    cfg = DatasetConfig(
        image_size=16,
        num_types=3,
        bona_fide={"train": 24, "val": 12, "test": 12},
        attacks_per_type={"train": 8, "val": 4, "test": 4},
        master_seed=5,
    )
    return make_dataset(cfg)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" in nodeid and "::" in nodeid:
                name = nodeid.split("::")[-1]
                lines.append((name, status))
    if not lines:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, status in sorted(set(lines)):
        mark = "PASS" if status == "passed" else "FAIL"
        terminalreporter.write_line(f"{mark}  {name}")
