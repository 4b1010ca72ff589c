import os

# single-threaded BLAS: tiny matrices gain nothing from threads, and fork
# pools (the --jobs path and the acceptance experiment) stay safe
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from nahlab import autodiff as ad
from nahlab.core import NahConfig


@pytest.fixture(scope="session")
def config():
    return NahConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(loss_fn, params, picks=8, h=1e-6, rtol=1e-4, atol=None, seed=0):
    """Finite-difference check of the conjugate-cotangent convention.

    loss_fn() rebuilds the loss from current parameter values; params is a
    list of CTensors whose .grad fields are already populated. Perturbs
    `picks` random real/imaginary components per tensor and compares
    (L(x+h)-L(x-h))/2h against 2*Re(grad) / 2*Im(grad). atol defaults to the
    central-difference round-off floor for the observed loss scale.
    """
    rnd = np.random.default_rng(seed)
    base = loss_fn()
    if atol is None:
        atol = 50.0 * np.finfo(float).eps * max(1.0, abs(base)) / h
    worst = 0.0
    for t in params:
        flat = t.values.reshape(-1)
        gflat = t.grad.reshape(-1)
        n = flat.size
        for idx in rnd.choice(n, size=min(picks, n), replace=False):
            for delta, comp in ((h, 2.0 * gflat[idx].real),
                                (1j * h, 2.0 * gflat[idx].imag)):
                orig = flat[idx]
                flat[idx] = orig + delta
                lp = loss_fn()
                flat[idx] = orig - delta
                lm = loss_fn()
                flat[idx] = orig
                fd = (lp - lm) / (2.0 * h)
                err = abs(fd - comp)
                tol = rtol * max(abs(fd), abs(comp)) + atol
                assert err <= tol, (
                    f"FD mismatch at component {idx}: fd={fd}, grad={comp}, "
                    f"err={err}, tol={tol}")
                worst = max(worst, err / max(abs(fd), abs(comp), atol))
    return worst


@pytest.fixture
def fd_gradcheck():
    return gradcheck


def leaf(rng, shape, scale=1.0):
    vals = scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return ad.CTensor(vals, requires_grad=True)


@pytest.fixture
def make_leaf():
    return leaf
