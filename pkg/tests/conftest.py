import numpy as np
import pytest
from hypothesis import settings

from vfem import BlockLayout, GenConfig, generate, q_value

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")


def make_instance(n, dims, rho, seed, **kwargs):
    gen = GenConfig(n=n, layout=BlockLayout(tuple(dims)), rho=rho, seed=seed,
                    **kwargs)
    return generate(gen)


def rel_err(a, b, floor=1e-30):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm((a - b).ravel())
                 / max(np.linalg.norm(b.ravel()), floor))


def fd_beta_gradient(theta_t, data, h=1e-5):
    """Central finite differences of the expected objective in beta."""
    p = theta_t.beta.shape[0]
    out = np.zeros(p)
    for j in range(p):
        bp = theta_t.beta.copy()
        bm = theta_t.beta.copy()
        bp[j] += h
        bm[j] -= h
        out[j] = (q_value(theta_t.replace(beta=bp), theta_t, data)
                  - q_value(theta_t.replace(beta=bm), theta_t, data)) / (2 * h)
    return out


@pytest.fixture
def small_instance():
    return make_instance(60, (2, 2, 2), 0.3, seed=11)
