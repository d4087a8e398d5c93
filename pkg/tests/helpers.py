import numpy as np

from actcompress.autograd import GraphExecutor, LayerPolicy


def numeric_grad(f, p, eps=1e-3):
    """Central differences of scalar ``f()`` with respect to array ``p`` (in place)."""
    g = np.zeros_like(p, dtype=np.float64)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p[i]
        p[i] = old + eps
        hi = f()
        p[i] = old - eps
        lo = f()
        p[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def compressed(layers, bits=2, group_size=256, seed=0, **kw):
    ex = GraphExecutor(layers, group_size=group_size, seed=seed, **kw)
    ex.set_policy([LayerPolicy(compress=True, bits=bits) if l.quantizable or l.kind == "relu"
                   else LayerPolicy.fp() for l in layers])
    return ex


def mc_param_grads(ex, x, gy, trials):
    """Per-trial parameter gradients (float64) for every layer with parameters."""
    out = []
    for _ in range(trials):
        ex.forward(x)
        grads = ex.backward(gy)
        out.append([np.asarray(g, np.float64) for gs in grads for g in gs])
    return out
