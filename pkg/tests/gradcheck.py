"""Central finite differences, shared by the unit and acceptance tests."""
import numpy as np

from binsight import nn
from binsight.model import ModelConfig, build_model

STEP = 1e-5


def rel_error(analytic, numeric):
    """max |a - n| scaled by the larger of the two tensors' magnitudes."""
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f, x, step=STEP, indices=None):
    """d f / d x at ``indices`` (all entries if None); ``x`` is perturbed in place and restored."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        out[j] = (up - down) / (2 * step)
    return out


def check_layer(layer, in_shape, rng, dtype=np.float64, batch=2):
    """Largest relative error over input and parameter gradients of one layer."""
    params = layer.init_params(rng, dtype)
    params = [p + rng.uniform(-0.1, 0.1, p.shape).astype(dtype) for p in params]  # nonzero biases
    x = rng.standard_normal((batch,) + tuple(in_shape)).astype(dtype)
    y, _ = layer.forward(params, x)
    softmax_head = getattr(layer, "activation", None) == "softmax"
    labels = rng.integers(0, y.shape[-1], batch) if softmax_head else None
    weights = rng.standard_normal(y.shape).astype(dtype)

    def loss():
        out, _ = layer.forward(params, x)
        if softmax_head:
            return nn.sparse_cce(out, labels)[0]
        return float(np.sum(out * weights))

    out, cache = layer.forward(params, x)
    upstream = nn.sparse_cce(out, labels)[1] if softmax_head else weights
    gx, gparams = layer.backward(params, cache, upstream)
    errs = [rel_error(gx.ravel(), numeric_grad(loss, x))]
    for p, g in zip(params, gparams):
        errs.append(rel_error(g.ravel(), numeric_grad(loss, p)))
    return max(errs)


def activation_pattern(model, x):
    """Which ReLU units are on and which pooling inputs win, for ``x``."""
    sig = []
    a = x
    for layer, p in zip(model.layers, model.params):
        a, cache = layer.forward(p, a)
        if getattr(layer, "activation", None) == "relu":
            sig.append((a > 0).tobytes())
        elif layer.kind == "MaxPool2":
            sig.append(cache.argmax.tobytes())
    return sig


def check_model(rng, kernel_size=1, samples_per_tensor=25):
    """Composed default stack on 8x8 inputs, float64.

    Returns ``(max relative error, entries compared, entries skipped)``.  An
    entry is skipped when the +-step perturbation flips a ReLU or a pooling
    winner: the loss is not differentiable across such a stencil, so the
    central difference is not an oracle there.
    """
    model = build_model(ModelConfig(8, 8, 1, 3, kernel_size, seed=int(rng.integers(1 << 30))), dtype=np.float64)
    for lp in model.params:
        for p in lp:
            p += rng.uniform(-0.05, 0.05, p.shape)
    x = rng.uniform(0, 1, (3, 8, 8, 1))
    labels = np.array([0, 1, 2])
    base = activation_pattern(model, x)

    def loss():
        return nn.sparse_cce(model.forward(x), labels)[0]

    _, _, grads = model.loss_and_grads(x, labels)
    analytic, numeric = [], []
    skipped = 0
    for p, g in zip(model.parameters(), [g for lg in grads for g in lg]):
        flat = p.reshape(-1)
        keep = []
        for i in rng.choice(p.size, min(p.size, samples_per_tensor), replace=False):
            old = flat[i]
            flat[i] = old + STEP
            smooth = activation_pattern(model, x) == base
            flat[i] = old - STEP
            smooth = smooth and activation_pattern(model, x) == base
            flat[i] = old
            if smooth:
                keep.append(i)
            else:
                skipped += 1
        if keep:
            analytic.append(g.ravel()[keep])
            numeric.append(numeric_grad(loss, p, indices=keep))
    worst = max(rel_error(a, n) for a, n in zip(analytic, numeric))
    return worst, sum(len(a) for a in analytic), skipped
