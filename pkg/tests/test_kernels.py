import importlib
import subprocess
import sys

import numpy as np
import pytest

from chl import _kernels_py, kernels

BACKENDS = [pytest.param(_kernels_py, id="python")]
if kernels.BACKEND == "compiled":
    BACKENDS.append(pytest.param(importlib.import_module("chl._kernels"), id="compiled"))


def conv_oracle(x, w, b):
    """Direct loops over a zero-padded input."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, o, h, wd))
    for i in range(h):
        for j in range(wd):
            patch = pad[:, :, i : i + 3, j : j + 3]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return out


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)


@pytest.mark.parametrize("impl", BACKENDS)
class TestKernels:
    def test_conv_forward(self, impl, tensors):
        x, w, b = tensors
        np.testing.assert_allclose(kernels.conv3x3_forward(x, w, b, impl), conv_oracle(x, w, b), atol=1e-12)

    def test_conv_gradients_are_adjoint(self, impl, tensors):
        """<conv(x), dy> = <x, input_grad(dy)> = <w, weight_grad(x, dy)> with zero bias."""
        x, w, _ = tensors
        dy = np.random.default_rng(1).normal(size=(2, 4, 6, 6))
        y = kernels.conv3x3_forward(x, w, np.zeros(4), impl)
        lhs = np.sum(y * dy)
        assert np.sum(x * kernels.conv3x3_input_grad(dy, w, impl)) == pytest.approx(lhs, rel=1e-12)
        assert np.sum(w * kernels.conv3x3_weight_grad(x, dy, impl)) == pytest.approx(lhs, rel=1e-12)

    def test_squareplus(self, impl):
        x = np.array([-3.0, 0.0, 2.0])
        y, d = kernels.squareplus_with_grad(x, impl)
        np.testing.assert_allclose(y, 0.5 * (x + np.sqrt(x * x + 4)))
        np.testing.assert_allclose(d, 0.5 * (1 + x / np.sqrt(x * x + 4)))
        assert y[1] == 1.0

    def test_pool_and_backward(self, impl):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_allclose(kernels.avg_pool2(x, impl)[0, 0], [[2.5, 4.5], [10.5, 12.5]])
        dy = np.ones((1, 1, 2, 2))
        scale = np.full((1, 1, 4, 4), 2.0)
        np.testing.assert_allclose(kernels.avg_pool2_backward_mul(dy, scale, impl), 0.5)

    def test_read_only_inputs(self, impl):
        dy = np.broadcast_to(np.ones((1, 2, 1, 1)), (1, 2, 2, 2))
        out = kernels.avg_pool2_backward_mul(dy, np.ones((1, 2, 4, 4)), impl)
        np.testing.assert_allclose(out, 0.25)


def test_backends_agree(tensors):
    if kernels.BACKEND != "compiled":
        pytest.skip("compiled extension not built")
    x, w, b = tensors
    expected = kernels.conv3x3_forward(x, w, b, _kernels_py)
    np.testing.assert_allclose(kernels.conv3x3_forward(x, w, b), expected, atol=1e-12)


def test_environment_forces_fallback():
    code = "import chl.kernels as k; print(k.BACKEND)"
    env = {"CHL_PURE_PYTHON": "1", "PATH": ""}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
