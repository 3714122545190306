"""Independent reference computations used as test oracles.

Everything here is plain-Python scalar loops over the flat parameter list,
deliberately sharing no code with ``fedpc.numerics``.
"""
import math


def unpack(values, layer_sizes):
    layers, pos = [], 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = [[values[pos + i * fan_out + j] for j in range(fan_out)] for i in range(fan_in)]
        pos += fan_in * fan_out
        b = [values[pos + j] for j in range(fan_out)]
        pos += fan_out
        layers.append((w, b))
    return layers


def probabilities(values, layer_sizes, x):
    h = list(x)
    layers = unpack(values, layer_sizes)
    for li, (w, b) in enumerate(layers):
        z = [b[j] + sum(h[i] * w[i][j] for i in range(len(h))) for j in range(len(b))]
        h = z if li == len(layers) - 1 else [max(v, 0.0) for v in z]
    top = max(h)
    e = [math.exp(v - top) for v in h]
    s = sum(e)
    return [v / s for v in e]


def objective(values, layer_sizes, frozen_len, anchor, xs, ys, mu, weight_decay, floor=1e-12):
    """mean NLL + (mu/2)||w - anchor||^2 + (weight_decay/2)||w_trainable||^2."""
    nll = 0.0
    for x, y in zip(xs, ys):
        p = probabilities(values, layer_sizes, x)
        nll -= math.log(max(p[int(y)], floor))
    nll /= len(ys)
    prox = 0.5 * mu * sum((a - b) ** 2 for a, b in zip(values, anchor))
    decay = 0.5 * weight_decay * sum(v * v for v in values[frozen_len:])
    return nll + prox + decay


def central_difference(f, values, index, h=1e-5):
    up = list(values)
    dn = list(values)
    up[index] += h
    dn[index] -= h
    return (f(up) - f(dn)) / (2 * h)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
