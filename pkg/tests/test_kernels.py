import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropgen_lab import _kernels_py, kernels

try:
    from dropgen_lab import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _case(seed, B, C, O, K, L):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((B, C, L)), rng.standard_normal((O, C, K)),
            rng.standard_normal(O), rng.standard_normal((B, O, L)))


@needs_compiled
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 1000), B=st.integers(1, 4), C=st.integers(1, 4),
       O=st.integers(1, 4), K=st.sampled_from([1, 3, 5, 7]), L=st.integers(1, 12))
def test_property_compiled_conv_matches_python(seed, B, C, O, K, L):
    x, w, b, gy = _case(seed, B, C, O, K, L)
    np.testing.assert_allclose(compiled.conv1d_forward(x, w, b),
                               _kernels_py.conv1d_forward(x, w, b), rtol=0, atol=1e-12)
    for got, want in zip(compiled.conv1d_backward(gy, x, w),
                         _kernels_py.conv1d_backward(gy, x, w)):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@needs_compiled
def test_compiled_softmax_xent_matches_python(rng):
    logits = rng.standard_normal((3, 5, 7)) * 4
    labels = rng.integers(0, 5, (3, 7)).astype(np.int64)
    l1, g1 = compiled.softmax_xent(logits, labels)
    l2, g2 = _kernels_py.softmax_xent(logits, labels)
    assert abs(l1 - l2) < 1e-12
    np.testing.assert_allclose(g1, g2, rtol=0, atol=1e-14)


def test_kernel_shorter_than_padding_reads_zeros():
    # L=1 with K=5: only the centre tap lands inside the signal
    x, w, b, _ = _case(0, 1, 2, 1, 5, 1)
    out = kernels.conv1d_forward(x, w, b)
    assert abs(out[0, 0, 0] - (b[0] + w[0, :, 2] @ x[0, :, 0])) < 1e-12


def test_backend_is_reported():
    assert kernels.BACKEND in ("compiled", "python")
    if compiled is not None and not os.environ.get("DROPGEN_LAB_PURE"):
        assert kernels.BACKEND == "compiled"


def test_pure_fallback_selected_by_environment():
    env = dict(os.environ, DROPGEN_LAB_PURE="1")
    code = ("import dropgen_lab, numpy as np;"
            "from dropgen_lab.model import init_model, mlp, forward;"
            "m = init_model(mlp(1, 2, kernel_size=3), 0);"
            "print(dropgen_lab.BACKEND, forward(m, np.ones((1, 3, 4))).data.sum())")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    assert out[0] == "python"
    from dropgen_lab.model import forward, init_model, mlp
    here = forward(init_model(mlp(1, 2, kernel_size=3), 0), np.ones((1, 3, 4))).data.sum()
    assert abs(float(out[1]) - here) < 1e-12
