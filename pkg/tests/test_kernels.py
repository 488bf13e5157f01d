"""Backend parity: numba kernels against the pure-numpy fallback."""

import numpy as np
import pytest

from statdistill.engine.kernels import BACKEND, numpy_backend

try:
    from statdistill.engine.kernels import numba_backend
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable")


def test_selected_backend_reported():
    assert BACKEND in ("numba", "numpy")


@needs_numba
@pytest.mark.parametrize("stride,groups", [(1, 1), (2, 1), (1, 2), (2, 4)])
def test_conv_forward_backends_agree(stride, groups):
    rng = np.random.default_rng(stride * 10 + groups)
    xp = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    a = numba_backend.conv2d_forward(xp, w, stride, groups)
    b = numpy_backend.conv2d_forward(xp, w, stride, groups)
    np.testing.assert_allclose(a, b, atol=1e-12)


@needs_numba
def test_conv_backward_backends_agree():
    rng = np.random.default_rng(3)
    xp = rng.standard_normal((2, 4, 6, 6))
    w = rng.standard_normal((6, 2, 3, 3))
    out = numba_backend.conv2d_forward(xp, w, 1, 2)
    g = rng.standard_normal(out.shape)
    gx_a = numba_backend.conv2d_backward_input(g, w, 1, 2, 6, 6)
    gx_b = numpy_backend.conv2d_backward_input(g, w, 1, 2, 6, 6)
    np.testing.assert_allclose(gx_a, gx_b, atol=1e-12)
    gw_a = numba_backend.conv2d_backward_weight(g, xp, 1, 2, 3, 3)
    gw_b = numpy_backend.conv2d_backward_weight(g, xp, 1, 2, 3, 3)
    np.testing.assert_allclose(gw_a, gw_b, atol=1e-12)


@needs_numba
def test_jacobi_backends_bitwise_identical():
    # Same kernel source compiles under both backends.
    rng = np.random.default_rng(5)
    m = rng.standard_normal((8, 8))
    sym = (m + m.T) / 2
    a1, v1 = sym.copy(), np.eye(8)
    a2, v2 = sym.copy(), np.eye(8)
    assert numba_backend.jacobi_sweeps(a1, v1) == 1.0
    assert numpy_backend.jacobi_sweeps(a2, v2) == 1.0
    assert a1.tobytes() == a2.tobytes()
    assert v1.tobytes() == v2.tobytes()


def test_env_flag_forces_numpy(tmp_path):
    import subprocess
    import sys

    code = ("from statdistill.engine.kernels import BACKEND; print(BACKEND)")
    env_out = subprocess.run(
        [sys.executable, "-c", code],
        env={"PATH": "/usr/bin:/bin:/usr/local/bin", "STATDISTILL_KERNELS": "numpy",
             "HOME": str(tmp_path)},
        capture_output=True, text=True, cwd="/root/pkg")
    assert env_out.stdout.strip() == "numpy"


def test_bad_env_flag_rejected(tmp_path):
    import subprocess
    import sys

    code = "import statdistill.engine.kernels"
    env_out = subprocess.run(
        [sys.executable, "-c", code],
        env={"PATH": "/usr/bin:/bin:/usr/local/bin", "STATDISTILL_KERNELS": "gpu",
             "HOME": str(tmp_path)},
        capture_output=True, text=True, cwd="/root/pkg")
    assert env_out.returncode != 0
    assert "STATDISTILL_KERNELS" in env_out.stderr
