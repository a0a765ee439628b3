import numpy as np
import pytest

from mhtn.network import NetworkConfig, StarNetwork
from mhtn.trainer import Batch

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def tiny_config(**overrides):
    kw = dict(
        modalities=("image", "text", "audio"),
        input_dims={"image": 5, "text": 4, "audio": 3},
        num_classes_target=3,
        num_classes_source=2,
        specific_widths=(6, 5),
        common_widths=(5, 4),
        discriminator_widths=(4,),
        kernel_bandwidths=(1.0, 2.5),
    )
    kw.update(overrides)
    return NetworkConfig(**kw)


def random_batch(cfg, n_docs=4, n_src=3, seed=0):
    rng = np.random.default_rng(seed)
    inputs = {m: rng.normal(size=(n_docs, cfg.input_dims[m])) for m in cfg.modalities}
    labels = rng.integers(0, cfg.num_classes_target, n_docs)
    src_x = rng.normal(size=(n_src, cfg.input_dims[cfg.image]))
    src_y = rng.integers(0, cfg.num_classes_source, n_src)
    return Batch(inputs, labels, src_x, src_y)


@pytest.fixture
def tiny_net():
    cfg = tiny_config()
    return StarNetwork.build(cfg, seed=3)
