"""Synthetic samples shared by the FPCA tests and the acceptance suite."""

import numpy as np


def unit_grid(P=108):
    return np.linspace(-1.0, 1.0, P)


def smooth_basis(grid, n_basis=6):
    """Orthogonal-ish smooth functions on [-1, 1]: low-order Fourier terms."""
    t = (grid + 1.0) / 2.0
    cols = []
    for k in range(1, n_basis // 2 + 1):
        cols += [np.sin(2 * np.pi * k * t), np.cos(2 * np.pi * k * t)]
    return np.array(cols[:n_basis])


def random_smooth_sample(rng, n=300, P=108, n_basis=6, noise=0.0):
    grid = unit_grid(P)
    B = smooth_basis(grid, n_basis)
    sd = 1.0 / np.arange(1, n_basis + 1)
    coef = rng.normal(size=(n, n_basis)) * sd
    data = 0.3 * np.sin(np.pi * grid) + coef @ B
    if noise:
        data = data + rng.normal(scale=noise, size=data.shape)
    return grid, data


def balanced_pair(rng, n=300, P=108, noise=0.02):
    """Two momentum domains driven by a shared dominant factor.

    Every smooth component vanishes at both ends of the window, so the true
    cross-domain covariance at the junction of the concatenated grid is zero.
    """
    grid = unit_grid(P)
    t = (grid + 1.0) / 2.0
    shared = rng.normal(size=n) * 2.0
    fx = [np.sin(np.pi * t), np.sin(2 * np.pi * t)]
    fy = [np.sin(np.pi * t) ** 2 * np.cos(np.pi * t), np.sin(np.pi * t)]
    own_x, own_y = rng.normal(size=(2, n)) * 0.6
    x = np.outer(shared, fx[0]) + np.outer(own_x, fx[1]) + rng.normal(scale=noise, size=(n, P))
    y = np.outer(shared, fy[1]) + np.outer(own_y, fy[0]) + rng.normal(scale=noise, size=(n, P))
    return grid, x, y


# criterion number -> one-line verdict, printed by conftest at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(number, title, ok, detail=""):
    ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    print(ACCEPTANCE[number])
    return ok
