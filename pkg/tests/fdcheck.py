"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from orthopgd.tensor import GradTape, Tensor, sum_

H = 1e-5


def numeric_grad(fn, x: np.ndarray, h: float = H) -> np.ndarray:
    """d fn / dx by central differences; ``fn`` maps an array to a float."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return g


def tape_grad(fn, x: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(fn(x))`` from the tape; ``fn`` maps a Tensor to a Tensor."""
    tape = GradTape()
    xt = tape.watch(x)
    return tape.backward(sum_(fn(xt)))[xt]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest numeric component."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-10)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check(fn, x: np.ndarray, h: float = H) -> float:
    """Relative error between tape and central-difference gradients of ``sum(fn(x))``."""
    analytic = tape_grad(fn, x)
    numeric = numeric_grad(lambda v: float(np.sum(fn(Tensor(v)).data)), x, h)
    return relative_error(analytic, numeric)
