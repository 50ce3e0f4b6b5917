"""Plain-Python reference implementations, independent of the tensor code paths."""
import math


def sqdist(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def kernel(a, b, sigmas):
    d2 = sqdist(a, b)
    return sum(math.exp(-d2 / (2 * s * s)) for s in sigmas)


def mmd_double_sum(P, U, sigmas):
    """Squared distance of RKHS mean embeddings, written as three double sums."""
    P, U = [list(map(float, r)) for r in P], [list(map(float, r)) for r in U]
    kpp = sum(kernel(a, b, sigmas) for a in P for b in P) / (len(P) ** 2)
    kuu = sum(kernel(a, b, sigmas) for a in U for b in U) / (len(U) ** 2)
    kpu = sum(kernel(a, b, sigmas) for a in P for b in U) / (len(P) * len(U))
    return kpp + kuu - 2 * kpu


def softmax(zs):
    m = max(zs)
    e = [math.exp(z - m) for z in zs]
    s = sum(e)
    return [v / s for v in e]


def entropy(p):
    return -sum(v * math.log(v) for v in p if v > 0)


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))
