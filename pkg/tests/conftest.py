import numpy as np
import pytest

from caplab.vit import VitConfig, VitModel

TINY = VitConfig(image_size=16, patch_size=4, embed_dim=16, num_heads=2, depth=2, mlp_ratio=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return VitModel(TINY, seed=3)


@pytest.fixture
def tiny_batch(rng):
    x = rng.random((6, 16, 16)).astype(np.float32)
    y = np.array([0, 1, 0, 1, 1, 0])
    return x, y


class ConstantModel:
    """Ignores its input; logits carry no input gradient."""

    dtype = np.float32

    def __init__(self, logits=(0.3, -0.2)):
        self.logits = np.asarray(logits, dtype=np.float32)

    def __call__(self, x):
        from caplab import autodiff as ad

        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        return ad.Tensor(np.tile(self.logits, (x.dims[0], 1)))


class LinearModel:
    """Two-class linear scorer: logits = (0, w . x)."""

    dtype = np.float64

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def __call__(self, x):
        from caplab import autodiff as ad

        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x, dtype=np.float64)
        flat = ad.reshape(x, (x.dims[0], -1))
        score = ad.matmul(flat, ad.Tensor(self.w.reshape(-1, 1), dtype=np.float64))
        zero = ad.Tensor(np.zeros((x.dims[0], 1)), dtype=np.float64)
        return ad.concat([zero, score], axis=1)


ACCEPTANCE_LINES = []


def acceptance(number, title, ok, detail=""):
    """Record one acceptance verdict; the lines are echoed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
                            + (f" ({detail})" if detail else ""))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
