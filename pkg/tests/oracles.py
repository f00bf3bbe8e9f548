"""Independent reference implementations used to check the package.

Nothing here imports the code under test except for the loss callable that
the finite-difference oracle perturbs.
"""

import math

import numpy as np
import torch


def popcount_xor(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def bits_to_int(bits) -> int:
    return sum(1 << i for i, b in enumerate(bits) if b > 0)


def brute_force_ranking(db_bits, db_ids, q_bits, k=None):
    """Plain Python sort by (Hamming distance, id)."""
    rows = []
    for pos, (b, i) in enumerate(zip(db_bits, db_ids)):
        d = sum(1 for x, y in zip(b, q_bits) if x != y)
        rows.append((d, int(i), pos))
    rows.sort()
    return rows if k is None else rows[:k]


def brute_force_ap(flags, k):
    hits, acc = 0, []
    for i, f in enumerate(flags[:k], start=1):
        if f:
            hits += 1
            acc.append(hits / i)
    return math.fsum(acc) / hits if hits else 0.0


def brute_force_map(db_bits, db_ids, db_labels, q_bits, q_labels, k):
    aps = []
    for qb, ql in zip(q_bits, q_labels):
        ranked = brute_force_ranking(db_bits, db_ids, qb, k)
        flags = [bool(set(ql) & set(db_labels[pos])) for _, _, pos in ranked]
        aps.append(brute_force_ap(flags, k))
    return math.fsum(aps) / len(aps)


def finite_difference_gradient(f, u: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar ``f`` at ``u`` (double precision)."""
    u = u.detach().clone().double()
    g = torch.zeros_like(u)
    flat, gflat = u.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            x0 = flat[i].item()
            flat[i] = x0 + step
            fp = float(f(u))
            flat[i] = x0 - step
            fm = float(f(u))
            flat[i] = x0
            gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = float(numeric.abs().max())
    return float((analytic - numeric).abs().max()) / max(scale, 1e-12)


def random_embeddings(rng, b, k):
    """Continuous embeddings kept away from 0 so sign() is locally constant."""
    u = rng.normal(size=(b, k))
    return torch.from_numpy(np.sign(u) * (0.05 + np.abs(u)))


def random_labels(rng, b, num_classes):
    return [frozenset(rng.choice(num_classes, size=rng.integers(1, 3), replace=False).tolist()) for _ in range(b)]
