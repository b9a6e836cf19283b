"""Independent oracles used across the test suite."""
import numpy as np

from dfldrop.diffmath import ParamVec, layer_shapes


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b):
    """Largest absolute deviation relative to the largest magnitude present."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def rel_err(a, b):
    """Norm-wise relative error, robust to individual near-zero entries."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def random_params(rng, d, C, hidden=(), scale=0.7):
    shapes = layer_shapes(d, C, hidden)
    n = sum(i * o + o for _, i, o in shapes)
    return ParamVec(rng.normal(0.0, scale, size=n), shapes)


def naive_forward(params, x):
    """Per-sample forward pass written with explicit loops."""
    layers = params.layers()
    h = list(map(float, x))
    for li, (W, b) in enumerate(layers):
        z = []
        for j in range(W.shape[1]):
            s = float(b[j])
            for i in range(W.shape[0]):
                s += h[i] * float(W[i, j])
            z.append(s)
        h = [max(v, 0.0) for v in z] if li < len(layers) - 1 else z
    m = max(h)
    e = [np.exp(v - m) for v in h]
    tot = sum(e)
    return np.array([v / tot for v in e])
