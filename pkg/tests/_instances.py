"""Random small instances shared by solver tests."""

import numpy as np
from scipy import sparse

from ccmpc.misocp import ConeRow, Misocp


def random_misocp(rng, max_binaries: int = 8, big_m: float = 200.0) -> Misocp:
    """Strictly convex QP in a box with 'stay outside a polytope' face groups.

    Each row reads -n'(y - c) + 0.5 + ||F y + g|| <= M z, so the active face
    of a group keeps y at least 0.5 beyond that face of a random polytope.
    """
    n = int(rng.integers(2, 5))
    sizes = []
    while True:
        s = int(rng.integers(2, 5))
        if sum(sizes) + s > max_binaries:
            break
        sizes.append(s)
    a = rng.normal(size=(n, n))
    P = a @ a.T + 0.5 * np.eye(n)
    q = 3.0 * rng.normal(size=n)
    rows, groups = [], []
    for s in sizes:
        centre = rng.normal(size=n)
        members = []
        for _ in range(s):
            nrm = rng.normal(size=n)
            nrm /= np.linalg.norm(nrm)
            f = 0.2 * rng.normal(size=(n, n))
            rows.append(ConeRow(((f, 0.1 * rng.normal(size=n)),), -nrm, float(nrm @ centre) + 0.5, big_m))
            members.append(len(rows) - 1)
        groups.append(members)
    G = sparse.csc_matrix(np.vstack([np.eye(n), -np.eye(n)]))
    return Misocp(n, P, q, 0.0, None, None, G, np.full(2 * n, 5.0), rows, groups)
