# Reference trace for the 4-asset HRP fixture used by the baseline tests.
# Uses scipy's single linkage and an explicit recursive bisection.
import numpy as np
from scipy.cluster.hierarchy import linkage, leaves_list
from scipy.spatial.distance import squareform

cov = np.array([
    [0.0400, 0.0060, 0.0210, 0.0020],
    [0.0060, 0.0100, 0.0015, 0.0008],
    [0.0210, 0.0015, 0.0900, 0.0054],
    [0.0020, 0.0008, 0.0054, 0.0225],
])
sd = np.sqrt(np.diag(cov))
rho = cov / np.outer(sd, sd)
d = np.sqrt(0.5 * (1 - rho))
np.fill_diagonal(d, 0)
print("distance\n", d)
Z = linkage(squareform(d, checks=False), "single")
print("linkage\n", Z)
order = [int(i) for i in leaves_list(Z)]
print("order", order)


def cluster_var(items):
    c = cov[np.ix_(items, items)]
    iv = 1 / np.diag(c)
    w = iv / iv.sum()
    return w @ c @ w


w = np.ones(4)
stack = [order]
while stack:
    items = stack.pop()
    if len(items) < 2:
        continue
    left, right = items[: len(items) // 2], items[len(items) // 2 :]
    vl, vr = cluster_var(left), cluster_var(right)
    alpha = 1 - vl / (vl + vr)
    print("split", left, right, "var", vl, vr, "alpha", alpha)
    w[left] *= alpha
    w[right] *= 1 - alpha
    stack += [right, left]
w /= w.sum()
print("weights", [repr(float(x)) for x in w])
