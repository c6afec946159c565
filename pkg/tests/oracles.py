"""Independent reference implementations used by the tests."""

import numpy as np


def point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> float:
    """Exact distance from a point to a triangle (closest-feature search)."""
    a, b, c = tri
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    # projection onto the plane, tested with barycentric signs
    q = p - np.dot(p - a, n) * n
    inside = True
    for u, v in ((a, b), (b, c), (c, a)):
        if np.dot(np.cross(v - u, q - u), n) < 0:
            inside = False
            break
    if inside:
        return abs(float(np.dot(p - a, n)))
    best = np.inf
    for u, v in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - u, v - u) / np.dot(v - u, v - u), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(p - (u + t * (v - u)))))
    return best


def mesh_distances(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Distance of each point to the nearest triangle (vectorized over
    triangles, looping over points)."""
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    ab, ac = b - a, c - a
    out = np.empty(len(points))
    for k, p in enumerate(points):
        # Ericson's closest point on triangle, vectorized over triangles
        ap = p - a
        d1 = np.einsum("ij,ij->i", ab, ap)
        d2 = np.einsum("ij,ij->i", ac, ap)
        bp = p - b
        d3 = np.einsum("ij,ij->i", ab, bp)
        d4 = np.einsum("ij,ij->i", ac, bp)
        cp = p - c
        d5 = np.einsum("ij,ij->i", ab, cp)
        d6 = np.einsum("ij,ij->i", ac, cp)
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom = va + vb + vc
        with np.errstate(divide="ignore", invalid="ignore"):
            v = vb / denom
            w = vc / denom
        closest = a + v[:, None] * ab + w[:, None] * ac
        # edge and vertex regions
        with np.errstate(divide="ignore", invalid="ignore"):
            m = (d1 <= 0) & (d2 <= 0)
            closest[m] = a[m]
            m = (d3 >= 0) & (d4 <= d3)
            closest[m] = b[m]
            m = (d6 >= 0) & (d5 <= d6)
            closest[m] = c[m]
            m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
            t = d1 / (d1 - d3)
            closest[m] = a[m] + t[m, None] * ab[m]
            m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
            t = d2 / (d2 - d6)
            closest[m] = a[m] + t[m, None] * ac[m]
            m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
            t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            closest[m] = b[m] + t[m, None] * (c[m] - b[m])
        out[k] = np.sqrt(((closest - p) ** 2).sum(axis=1)).min()
    return out


def brute_force_greedy(s: np.ndarray) -> list[tuple[int, int]]:
    """Repeated full-matrix argmax with row/column deletion, written with
    plain loops and an explicit lexicographic tie-break."""
    rows, cols = s.shape
    live_r, live_c = set(range(rows)), set(range(cols))
    pairs = []
    while live_r and live_c:
        best, arg = -np.inf, None
        for i in sorted(live_r):
            for j in sorted(live_c):
                if s[i, j] > best:
                    best, arg = s[i, j], (i, j)
        if best <= 0:
            break
        pairs.append(arg)
        live_r.discard(arg[0])
        live_c.discard(arg[1])
    return pairs


def multinomial_3sigma(n: int, p: float) -> tuple[float, float]:
    sd = np.sqrt(n * p * (1 - p))
    return n * p - 3 * sd, n * p + 3 * sd
