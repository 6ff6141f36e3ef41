"""Brute-force sampling of continuity ratios to pin default nu2 margins."""
import numpy as np

rng = np.random.default_rng(0)
n = 3
N = 400000

def sample():
    p = rng.uniform(-10, 10, (N, n)) * rng.uniform(0, 1, (N, 1)) ** 3
    q = rng.uniform(-10, 10, (N, n)) * rng.uniform(0, 1, (N, 1)) ** 3
    # near-coincident and antipodal pairs
    k = N // 4
    q[:k] = p[:k] + 1e-3 * rng.normal(size=(k, n))
    q[k:2*k] = -p[k:2*k] * rng.uniform(0, 2, (k, 1))
    return p, q

for m in [1.2, 1.5, 1.8, 2.0, 2.5, 2.9]:
    p, q = sample()
    P = np.linalg.norm(p, axis=1); Q = np.linalg.norm(q, axis=1); D = np.linalg.norm(p - q, axis=1)
    reg = lambda v, t: (1 + t)[:, None] ** (m - 2) * v
    pure = lambda v, t: np.where(t > 0, t, 1)[:, None] ** (m - 2) * v
    r1 = np.abs(reg(p, P) - reg(q, Q)).sum(1) / ((1 + P + Q) ** (m - 2) * D)
    r2 = np.abs(pure(p, P) - pure(q, Q)).sum(1) / ((P + Q) ** (m - 2) * D)
    print(f"m={m}: reg sup={r1.max():.4f}  pure sup={r2.max():.4f}  sqrt(n)*max(1,m-1)={np.sqrt(n)*max(1,m-1):.4f}")
