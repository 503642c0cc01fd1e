"""Independent reference implementations used only by the tests."""

import math

import numpy as np


def _cell(grid, p):
    vs = np.broadcast_to(np.asarray(grid.voxel_size, dtype=float), (3,))
    c = np.floor((np.asarray(p) - grid.origin) / vs).astype(np.int64)
    return np.minimum(c, np.asarray(grid.grid_dims) - 1)


def _between(grid, rx, d, ta, tb, ca, cb, depth=0):
    """Cells visited strictly between two samples, in ray order, found by bisection."""
    if np.count_nonzero(ca != cb) <= 1 or tb - ta < 1e-12 or depth > 60:
        return []
    tm = 0.5 * (ta + tb)
    cm = _cell(grid, rx + tm * d)
    mid = [] if (np.array_equal(cm, ca) or np.array_equal(cm, cb)) else [tuple(cm)]
    return _between(grid, rx, d, ta, tm, ca, cm, depth + 1) + mid + _between(grid, rx, d, tm, tb, cm, cb, depth + 1)


def march_first_hits(rx, dirs, grid, step=0.01, chunk=1024):
    """First occupied voxel along each ray by stepping ``step`` meters at a time.

    The receiver's own cell is skipped. Consecutive samples whose cells differ
    in more than one axis are bisected so corner-clipped cells are not missed.
    """
    rx = np.asarray(rx, dtype=float)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    room = np.asarray(grid.room_dims, dtype=float)
    lookup = grid.lookup()  # (nz, ny, nx) -> k or -1
    own = tuple(_cell(grid, rx))
    out = np.full(len(dirs), -1, dtype=np.int64)
    lo, hi = grid.origin, grid.origin + room
    for s in range(0, len(dirs), chunk):
        d = dirs[s:s + chunk]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_wall = np.where(d > 0, (hi - rx) / d, np.where(d < 0, (lo - rx) / d, np.inf)).min(axis=1)
        n_steps = int(math.ceil(t_wall.max() / step)) + 1
        ts = np.arange(n_steps) * step
        ts = np.minimum(ts[None, :], t_wall[:, None] * (1 - 1e-12))  # last sample sits just inside the wall
        pts = rx + ts[..., None] * d[:, None, :]
        cells = _cell(grid, pts)
        k = lookup[cells[..., 2], cells[..., 1], cells[..., 0]]
        is_own = np.all(cells == np.asarray(own), axis=-1)
        hit = (k >= 0) & ~is_own
        first = np.where(hit.any(axis=1), hit.argmax(axis=1), n_steps)
        multi = np.count_nonzero(cells[:, 1:] != cells[:, :-1], axis=-1) >= 2
        for r in range(len(d)):
            res = int(k[r, first[r]]) if first[r] < n_steps else -1
            for i in np.flatnonzero(multi[r, :max(first[r], 0)]):
                if i + 1 > first[r]:
                    break
                found = None
                for c in _between(grid, rx, d[r], ts[r, i], ts[r, i + 1], cells[r, i], cells[r, i + 1]):
                    kk = lookup[c[2], c[1], c[0]]
                    if kk >= 0 and c != own:
                        found = int(kk)
                        break
                if found is not None:
                    res = found
                    break
            out[s + r] = res
    return out


def ssim_reference(x, y):
    from skimage.metrics import structural_similarity

    return structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, win_size=11)


def finite_difference(f, x, h=1e-5):
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grad_rel_error(fn, inputs, h=1e-5, seed=0):
    """Worst relative error between autograd and central differences.

    ``fn`` maps float64 tensors to a tensor; it is reduced to a scalar with a
    fixed random projection so every output entry contributes.
    """
    import torch

    rng = np.random.default_rng(seed)
    base = [torch.tensor(x, dtype=torch.float64) for x in inputs]
    proj = torch.tensor(rng.normal(size=tuple(fn(*base).shape)), dtype=torch.float64)

    def scalar(*xs):
        return float((fn(*[torch.tensor(x, dtype=torch.float64) for x in xs]) * proj).sum())

    leaves = [b.clone().requires_grad_(True) for b in base]
    (fn(*leaves) * proj).sum().backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad.numpy() if leaf.grad is not None else np.zeros(leaf.shape)

        def f(x, i=i):
            xs = list(inputs)
            xs[i] = x
            return scalar(*xs)

        numeric = finite_difference(f, inputs[i], h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


def gradcheck_cases():
    """(name, fn, input sampler) triples covering every differentiable nncore op."""
    import torch

    from radtwin import nncore as F

    def away_from_zero(rng, shape):
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < 1e-2, 0.5, x)

    def attn_inputs(rng):
        n, d = int(rng.integers(3, 8)), int(rng.integers(2, 6))
        return [rng.normal(size=(2, d)), rng.normal(size=(n, d)), rng.normal(size=(n, 3))]

    def attn_fn(rng):
        n_mask = rng.integers(0, 2, size=(2, 8)).astype(bool)
        n_mask[:, 0] = False  # keep each row non-empty

        def fn(q, K, V):
            m = torch.tensor(n_mask[:, :K.shape[0]], dtype=torch.bool)
            bias = torch.where(m, torch.full(m.shape, F.MASK_BIAS, dtype=torch.float64),
                               torch.zeros(m.shape, dtype=torch.float64))
            return F.masked_cross_attention(q, K, V, bias)
        return fn

    def dropout_fn(rng):
        s = int(rng.integers(0, 2**31))
        return lambda x: F.dropout(x, 0.3, True, s)

    return [
        ("positional_encoding", lambda rng: (lambda p: F.positional_encoding(p, 4)),
         lambda rng: [rng.uniform(-1, 1, size=(3, 3))]),
        ("linear", lambda rng: F.linear, lambda rng: [rng.normal(size=(4, 5)), rng.normal(size=(3, 5)),
                                                      rng.normal(size=3)]),
        ("relu", lambda rng: F.relu, lambda rng: [away_from_zero(rng, (4, 6))]),
        ("layer_norm", lambda rng: F.layer_norm, lambda rng: [rng.normal(size=(3, 6)), rng.normal(size=6),
                                                              rng.normal(size=6)]),
        ("softmax_lastdim", lambda rng: F.softmax_lastdim, lambda rng: [rng.normal(size=(3, 7))]),
        ("dropout", dropout_fn, lambda rng: [rng.normal(size=(4, 5))]),
        ("conv3d", lambda rng: (lambda x, k, b: F.conv3d(x, k, b, stride=2, padding=1)),
         lambda rng: [rng.normal(size=(1, 2, 4, 3, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)]),
        ("masked_cross_attention", attn_fn, attn_inputs),
        ("mse_loss", lambda rng: F.mse_loss, lambda rng: [rng.normal(size=7), rng.normal(size=7)]),
    ]
