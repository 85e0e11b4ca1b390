import numpy as np
import pytest

from capsadapter.features import FeatureMatrix, build_onehot


def unit_rows(rng, rows, dim):
    x = rng.normal(size=(rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_instance(rng, max_classes=5, max_per_class=6, max_test=8, dim=16):
    """Small random adapter problem with contiguous class blocks."""
    n = int(rng.integers(1, max_classes + 1))
    counts = rng.integers(1, max_per_class + 1, size=n)
    classes = np.repeat(np.arange(n), counts)
    nm = int(counts.sum())
    t = int(rng.integers(1, max_test + 1))
    return {
        "f_test": unit_rows(rng, t, dim),
        "w": unit_rows(rng, n, dim),
        "f_img": unit_rows(rng, nm, dim),
        "f_cap": unit_rows(rng, nm, dim),
        "classes": classes,
        "labels": build_onehot(classes, n),
    }


def random_hp(rng):
    from capsadapter.kernels import HyperParams
    return HyperParams(
        alpha=float(rng.uniform(0.1, 50)),
        beta=float(rng.uniform(1, 50)),
        gamma=float(rng.uniform(0.1, 30)),
        delta=float(rng.uniform(0, 1)),
        tau=100.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def as_fm(x):
    return FeatureMatrix(x, normalized=True)


def planted_task(seed=0, n=3, per=4, t_per=10, dim=16, feat=12):
    """Image features separate the classes, caption features are class-independent noise.

    The classifier rows live outside the feature subspace, so the zero-shot
    and KL terms carry no class information and only the affinity term decides.
    """
    rng = np.random.default_rng(seed)
    protos = np.eye(dim)[:n]

    def noisy(k, scale, count):
        x = np.zeros((count, dim))
        x[:, :feat] = rng.normal(size=(count, feat)) * scale
        x += protos[k]
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    f_img = np.vstack([noisy(k, 0.15, per) for k in range(n)])
    f_val = np.vstack([noisy(k, 0.35, t_per) for k in range(n)])
    cap = np.zeros((n * per, dim))
    cap[:, :feat] = rng.normal(size=(n * per, feat))
    cap /= np.linalg.norm(cap, axis=1, keepdims=True)
    return {
        "f_val": f_val,
        "y_val": np.repeat(np.arange(n), t_per),
        "w": np.eye(dim)[feat:feat + n],
        "f_img": f_img,
        "f_cap": cap,
        "classes": np.repeat(np.arange(n), per),
    }


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
