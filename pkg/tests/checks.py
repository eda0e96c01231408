"""Shared heavier checks used by both unit and acceptance tests."""

import contextlib

import numpy as np

from fedpt import tensor as T
from fedpt.model import build_model, emnist_cnn_spec

from oracles import central_difference, max_rel_error


class PatternRecorder:
    """Records relu masks and max-pool winners, or replays recorded ones.

    The CNN is piecewise smooth. When a +-eps finite-difference step crosses a
    relu kink or flips a max-pool winner, the difference quotient mixes two
    pieces and no longer estimates the derivative. Replaying the base pattern
    evaluates the smooth piece that contains the base point, whose derivative
    is exactly what backprop computes.
    """

    def __init__(self):
        self.patterns = []
        self.replay = False
        self.changed = False
        self._i = 0

    @contextlib.contextmanager
    def active(self, replay):
        self.replay, self._i, self.changed = replay, 0, False
        relu, pool = T.relu, T.maxpool2d

        def relu_hook(x):
            mask = x.data > 0
            return self._handle(mask, lambda m: T.Tensor(np.where(m, x.data, 0.0)), relu, x)

        def pool_hook(x):
            b, h, w, c = x.shape
            win = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
            idx = win.argmax(axis=-1)
            return self._handle(idx, lambda i: T.Tensor(np.take_along_axis(win, i[..., None], axis=-1)[..., 0]), pool, x)

        T.relu, T.maxpool2d = relu_hook, pool_hook
        try:
            yield self
        finally:
            T.relu, T.maxpool2d = relu, pool

    def _handle(self, pattern, apply, original, x):
        if not self.replay:
            self.patterns.append(pattern)
            return original(x)
        saved = self.patterns[self._i]
        self._i += 1
        self.changed |= not np.array_equal(saved, pattern)
        return apply(saved)


def emnist_model_gradcheck(seed=0, coords_per_block=6, eps=1e-5):
    """Per-coordinate central differences for the full CNN on a 2-example batch, float64.

    Checks each block's largest-gradient coordinates plus random ones. Returns
    ``(max relative error per block, number of steps that crossed a kink)``;
    kink-crossing steps are evaluated on the base point's smooth piece.
    """
    rng = np.random.default_rng(seed)
    model = build_model(emnist_cnn_spec())
    params = {k: v.astype(np.float64) for k, v in model.init_params(seed).items()}
    for name in ("groupnorm_0/scale", "groupnorm_0/shift"):
        params[name] = params[name] + 0.1 * rng.standard_normal(params[name].shape)
    x = rng.standard_normal((2, 28, 28, 1))
    labels = [3, 40]

    def loss_of(p, requires_grad=False):
        leaves = {k: T.Tensor(v, requires_grad=requires_grad) for k, v in p.items()}
        return leaves, T.softmax_cross_entropy(model.forward(leaves, T.Tensor(x)), labels)

    recorder = PatternRecorder()
    with recorder.active(replay=False):
        leaves, loss = loss_of(params, requires_grad=True)
    grads = T.backward(loss)

    errors, crossings = {}, 0
    for name, arr in params.items():
        g = grads[leaves[name]].ravel()
        top = [int(c) for c in np.argsort(-np.abs(g))[:coords_per_block]]
        rest = [int(c) for c in rng.choice(g.size, min(g.size, 2 * coords_per_block), replace=False) if c not in top]
        coords = (top + rest)[: 2 * coords_per_block]
        analytic, numeric = [], []
        for c in coords:
            vals = []
            for s in (1.0, -1.0):
                flat = arr.ravel().copy()
                flat[c] += s * eps
                p = dict(params, **{name: flat.reshape(arr.shape)})
                with recorder.active(replay=True):
                    vals.append(float(loss_of(p)[1].data))
                crossings += recorder.changed
            analytic.append(g[c])
            numeric.append((vals[0] - vals[1]) / (2 * eps))
        errors[name] = max_rel_error(analytic, numeric)
    return errors, crossings


def small_federation(num_clients=10, per_client=30, dim=8, classes=3, seed=0, alpha=1.0):
    from fedpt.data import PartitionConfig, dirichlet_partition, synth_gaussian_mixture

    ds = synth_gaussian_mixture(classes, dim, num_clients * per_client + 200, 4.0, 1.0, np.random.default_rng(seed))
    train = ds.subset(np.arange(num_clients * per_client))
    held = ds.subset(np.arange(num_clients * per_client, len(ds)))
    fed = dirichlet_partition(train, PartitionConfig(num_clients, alpha, per_client, seed=seed))
    return fed, held


def mlp_params(dim=8, hidden=16, classes=3, frozen=(), seed=0):
    from fedpt.model import FreezePlan, apply_freeze_plan, build_model, mlp_spec

    return apply_freeze_plan(build_model(mlp_spec(dim, hidden, classes)), FreezePlan(frozenset(frozen)), seed)


def gradcheck(build, arrays_):
    """Compare backward() with central differences for every input array (float64)."""
    leaves = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays_]
    grads = T.backward(build(*leaves))

    def f():
        return float(build(*[T.Tensor(l.data) for l in leaves]).data)

    return max(max_rel_error(grads[l], central_difference(f, l.data)) for l in leaves)


def op_gradchecks(seed=0):
    """Max relative gradient error for each layer op on small random inputs."""
    r = np.random.default_rng(seed)
    cases = {
        "affine": (lambda x, w, b: T.tsum(T.relu(T.affine(x, w, b))), [r.standard_normal((3, 4)), r.standard_normal((4, 5)), r.standard_normal(5)]),
        "conv2d": (
            lambda x, k, b: T.softmax_cross_entropy(T.flatten(T.conv2d(x, k, b)), [3, 7]),
            [r.standard_normal((2, 4, 4, 2)), r.standard_normal((3, 3, 2, 3)), r.standard_normal(3)],
        ),
        "maxpool2d": (lambda x: T.softmax_cross_entropy(T.flatten(T.maxpool2d(x)), [1, 4]), [r.standard_normal((2, 4, 6, 3))]),
        "group_norm": (
            lambda x, g, b: T.softmax_cross_entropy(T.flatten(T.group_norm(x, g, b, groups=2)), [0, 5]),
            [r.standard_normal((2, 3, 3, 4)), r.standard_normal(4) + 1, r.standard_normal(4)],
        ),
        "relu": (lambda x: T.tsum(T.relu(x)), [r.standard_normal((3, 5))]),
        "softmax_cross_entropy": (lambda z: T.softmax_cross_entropy(z, [0, 2, 1, 2]), [r.standard_normal((4, 3))]),
    }
    return {name: gradcheck(fn, arrs) for name, (fn, arrs) in cases.items()}
