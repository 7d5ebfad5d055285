"""Shared test utilities: finite-difference gradient checks and toy systems."""

import numpy as np

from vfpg import autodiff as ad

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def numeric_gradient(fn, arrays, wrt, step=FD_STEP):
    """Central finite differences of a scalar function of numpy arrays."""
    grad = np.zeros_like(arrays[wrt])
    flat = grad.reshape(-1)
    for i in range(flat.size):
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[wrt].reshape(-1)[i] += step
        minus[wrt].reshape(-1)[i] -= step
        flat[i] = (fn(plus) - fn(minus)) / (2.0 * step)
    return grad


def gradcheck(build, shapes, rng, rel_tol=REL_TOL, abs_floor=ABS_FLOOR,
              transform=None):
    """Compare reverse-mode gradients of ``build`` against finite differences.

    ``build`` maps a list of Tensors to a scalar Tensor.  ``transform`` can
    premap raw normal draws (e.g. to keep arguments positive).  Returns the
    worst relative error over all arguments.
    """
    values = [rng.standard_normal(s) for s in shapes]
    if transform is not None:
        values = transform(values)
    tensors = [ad.Tensor(v.copy(), requires_grad=True) for v in values]
    with ad.Tape() as tape:
        loss = build(tensors)
    grads = ad.backward(tape, loss)

    worst = 0.0
    for i, t in enumerate(tensors):
        def scalar_fn(arrays, i=i):
            ts = [ad.Tensor(a) for a in arrays]
            return float(build(ts).value)

        fd = numeric_gradient(scalar_fn, values, i)
        an = grads.get(t)
        an = np.zeros_like(values[i]) if an is None else an
        denom = np.maximum(np.abs(fd), abs_floor)
        worst = max(worst, float(np.max(np.abs(an - fd) / denom)))
    assert worst <= rel_tol, f"gradient mismatch: rel err {worst:.3e}"
    return worst


class DiscreteToy:
    """Position-discretized toy target on a small lattice, fully enumerable.

    The exact probability table comes from the enumeration oracle; per-config
    actions and log-targets are tabulated for estimator tests.
    """

    def __init__(self, lat, pot, grid):
        from vfpg.oracles import brute_force_partition
        self.lat = lat
        self.pot = pot
        self.grid = np.asarray(grid, dtype=float)
        self.ln_z, self.probs = brute_force_partition(lat, pot, grid)
        self.n_interior = lat.n_tau - 2
        shape = (self.grid.size,) * self.n_interior
        idx = np.indices(shape).reshape(self.n_interior, -1)
        self.configs = idx.T                      # (n_cfg, n_interior)
        self.flat_probs = self.probs.reshape(-1)
        from vfpg.lattice import action_batch
        paths = np.empty((self.configs.shape[0], lat.n_tau))
        paths[:, 0] = lat.x_start
        paths[:, -1] = lat.x_end
        paths[:, 1:-1] = self.grid[self.configs]
        self.paths = paths
        self.actions = action_batch(paths, lat, pot)
        self.log_target = -self.actions / lat.hbar - self.ln_z
