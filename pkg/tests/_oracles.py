"""Independent reference implementations used to check the package.

Everything here is deliberately naive: finite differences, double loops,
full enumeration and breadth-first flood fill.
"""

import itertools
import math
from collections import deque

import numpy as np


# ---------------------------------------------------------------------------
# finite differences

def central_difference(f, array, index, h=1e-4):
    """(f(x + h e_i) - f(x - h e_i)) / 2h, perturbing ``array`` in place."""
    flat = array.reshape(-1)
    old = flat[index]
    flat[index] = old + h
    up = f()
    flat[index] = old - h
    down = f()
    flat[index] = old
    return (up - down) / (2 * h)


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


# ---------------------------------------------------------------------------
# per-op gradient checks

def leaf(values):
    from subcortseg.tensor import Tensor
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def gradcheck(build, arrays, rng, coords=None):
    """Max relative error between backward() and central differences.

    ``build`` maps leaf tensors to an output tensor; the scalar checked is
    sum(output * R) for a fixed random R.
    """
    leaves = [leaf(a) for a in arrays]
    out = build(leaves)
    weights = rng.standard_normal(out.shape)

    def loss_value():
        return float(np.sum(build(leaves).values * weights))

    loss = build(leaves)
    loss.backward(weights.copy())
    worst = 0.0
    for t in leaves:
        n = t.values.size
        picks = range(n) if coords is None or n <= coords else rng.choice(n, coords, replace=False)
        analytic = [t.grad.reshape(-1)[i] for i in picks]
        numeric = [central_difference(loss_value, t.values, i) for i in picks]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def tie_free(rng, shape):
    # distinct values spaced 0.01 apart, far wider than the 1e-4 step
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape)


# ---------------------------------------------------------------------------
# metrics

def random_mask_pair(rng, shape=(16, 16, 16)):
    density = rng.uniform(0.002, 0.3)
    a = rng.random(shape) < density
    if rng.random() < 0.5:
        b = rng.random(shape) < rng.uniform(0.002, 0.3)
    else:  # a perturbed copy: realistic near-agreement
        b = a ^ (rng.random(shape) < 0.02)
    a.flat[rng.integers(a.size)] = True
    b.flat[rng.integers(b.size)] = True
    return a, b


def brute_dsc(a, b):
    sa = {tuple(v) for v in np.argwhere(a).tolist()}
    sb = {tuple(v) for v in np.argwhere(b).tolist()}
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def brute_hausdorff(a, b, spacing=(1.0, 1.0, 1.0)):
    """max over both directions of max_a min_b ||(a - b) * spacing|| by full distance matrix."""
    pa, pb = np.argwhere(a), np.argwhere(b)
    s = np.asarray(spacing, dtype=np.float64)

    def directed(p, q):
        worst = 0.0
        for row in p:
            diff = (row - q) * s
            worst = max(worst, float(np.sqrt((diff * diff).sum(axis=1)).min()))
        return worst

    return max(directed(pa, pb), directed(pb, pa))


def average_ranks(values):
    values = list(values)
    ranks = []
    for v in values:
        below = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(below + (equal + 1) / 2.0)
    return ranks


def wilcoxon_enumerated(x, y):
    """(W, two-sided p) by listing every sign assignment of the nonzero differences."""
    d = [a - b for a, b in zip(x, y) if a - b != 0]
    ranks = average_ranks([abs(v) for v in d])
    w_plus = sum(r for r, v in zip(ranks, d) if v > 0)
    w_minus = sum(r for r, v in zip(ranks, d) if v < 0)
    w = min(w_plus, w_minus)
    total = sum(ranks)
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        t = sum(r for r, s in zip(ranks, signs) if s)
        if min(t, total - t) <= w + 1e-9:
            hits += 1
    return w, hits / 2 ** len(d)


# ---------------------------------------------------------------------------
# volumes

def chebyshev_distance(points, structure_points, chunk=2048):
    """For each row of ``points``, min over structure voxels of max(|dx|, |dy|, |dz|)."""
    points = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    best = np.full(len(points), np.iinfo(np.int64).max)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        for t in range(0, len(structure_points), 256):
            q = structure_points[t:t + 256]
            cheb = np.abs(p[:, None, :] - q[None, :, :]).max(axis=2).min(axis=1)
            best[s:s + chunk] = np.minimum(best[s:s + chunk], cheb)
    return best


def chebyshev_band(structure, distance):
    """Background voxels whose Chebyshev distance to ``structure`` is in 1..distance.

    Brute-force minimum distance over all structure voxels, for every voxel
    of the structure's bounding box grown by ``distance``.
    """
    pts = np.argwhere(structure)
    band = np.zeros(structure.shape, bool)
    if len(pts) == 0:
        return band
    lo = np.maximum(pts.min(axis=0) - distance, 0)
    hi = np.minimum(pts.max(axis=0) + distance, np.array(structure.shape) - 1)
    grid = np.stack(np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij"), -1)
    cand = grid.reshape(-1, 3)
    best = chebyshev_distance(cand, pts)
    hit = cand[(best >= 1) & (best <= distance)]
    band[tuple(hit.T)] = True
    return band


def flood_fill_components(mask):
    """Number of 6-connected components, by breadth-first search."""
    mask = np.asarray(mask, bool)
    seen = np.zeros_like(mask)
    shape = mask.shape
    count = 0
    for start in map(tuple, np.argwhere(mask)):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                n = (x + dx, y + dy, z + dz)
                if all(0 <= n[i] < shape[i] for i in range(3)) and mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
    return count


def adam_reference(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam iterated by hand; returns the parameter after each step."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


# ---------------------------------------------------------------------------
# full-network gradient check

class _ActivationProbe:
    """Record ReLU sign patterns and max-pool winners during a forward pass."""

    def __init__(self):
        from subcortseg import tensor as T
        self.T = T
        self.records = []

    def __enter__(self):
        relu, pool = self.T.relu, self.T.maxpool2
        self.saved = relu, pool

        def relu_probe(x):
            self.records.append(x.values > 0)
            return relu(x)

        def pool_probe(x):
            v = x.values
            b, c, h, w = v.shape
            windows = v.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            self.records.append(windows.reshape(b, c, h // 2, w // 2, 4).argmax(axis=-1))
            return pool(x)

        self.T.relu, self.T.maxpool2 = relu_probe, pool_probe
        return self

    def __exit__(self, *exc):
        self.T.relu, self.T.maxpool2 = self.saved


def full_model_gradcheck(seed, use_atlas=True, coords_per_seed=10, batch=2, h=1e-4):
    """Worst relative error of backprop vs central differences through the whole network.

    Runs in float64 on random coordinates of every parameter tensor and of
    the inputs.  A coordinate is skipped when the +-h perturbation flips a
    ReLU or changes a max-pool winner anywhere, since the loss is not
    differentiable across such a kink.  Returns (worst error, coordinates checked).
    """
    from subcortseg import model as M
    from subcortseg import tensor as T

    rng = np.random.default_rng(seed)
    params = M.build_model(seed, use_atlas_branch=use_atlas, dtype=np.float64)
    for layer in params.layers:  # nonzero biases exercise their gradients more
        layer.bias.values[...] = rng.uniform(-0.05, 0.05, size=layer.bias.shape)
    patches = T.Tensor(rng.standard_normal((batch, 3, 32, 32)), requires_grad=True)
    priors = T.Tensor(rng.dirichlet(np.ones(15), size=batch), requires_grad=True)
    targets = rng.integers(0, 15, size=batch)

    def evaluate():
        with _ActivationProbe() as probe:
            loss, _ = T.softmax_cross_entropy(M.logits(params, patches, priors), targets)
        return float(loss.values), probe.records

    base_value, base_pattern = evaluate()
    loss, _ = T.softmax_cross_entropy(M.logits(params, patches, priors), targets)
    loss.backward()

    candidates = [t for layer in params.layers for t in layer.tensors] + [patches]
    if use_atlas:
        candidates.append(priors)
    worst, checked, attempts = 0.0, 0, 0
    while checked < coords_per_seed and attempts < 20 * coords_per_seed:
        attempts += 1
        t = candidates[rng.integers(len(candidates))]
        i = int(rng.integers(t.values.size))
        flat = t.values.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        up, up_pattern = evaluate()
        flat[i] = old - h
        down, down_pattern = evaluate()
        flat[i] = old
        if any(not np.array_equal(a, b) or not np.array_equal(a, c)
               for a, b, c in zip(base_pattern, up_pattern, down_pattern)):
            continue
        numeric = (up - down) / (2 * h)
        worst = max(worst, relative_error([t.grad.reshape(-1)[i]], [numeric]))
        checked += 1
    return worst, checked
