"""
Latent label ground metric learned through a PSD similarity kernel.

The cost between labels i and j is the squared embedding distance
``S_ii + S_jj - 2 S_ij``. The kernel is regularized toward a reference S0 by
the Burg matrix divergence and re-estimated in closed form from transport
plans, then projected back onto the PSD cone.
"""

from dataclasses import dataclass, field
import csv

import numpy as np

from .errors import (
    DimensionMismatch,
    EigenFailure,
    EmptyLabelSet,
    NonPositiveDefiniteArgument,
    NotPSD,
    SingularReference,
    SingularSystem,
)


def jacobi_eigh(A, tol=1e-14, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(A, 1) ** 2))
        if off <= tol * scale:
            w = np.diag(A).copy()
            order = np.argsort(w, kind="stable")
            return w[order], V[:, order]
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = cs * ap - sn * aq
                A[:, q] = sn * ap + cs * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = cs * ap - sn * aq
                A[q, :] = sn * ap + cs * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = cs * vp - sn * vq
                V[:, q] = sn * vp + cs * vq
    raise EigenFailure(f"Jacobi sweeps did not converge in {max_sweeps} sweeps")


def psd_project(A):
    """Nearest PSD matrix in Frobenius norm: clamp negative eigenvalues to zero."""
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + A.T)
    w, V = jacobi_eigh(A)
    if w[0] >= 0:
        return A
    X = (V * np.maximum(w, 0.0)) @ V.T
    return 0.5 * (X + X.T)


def min_eigenvalue(S):
    return float(jacobi_eigh(S)[0][0])


def cost_from_kernel(S, psd_tol=1e-6):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionMismatch(f"kernel must be square, got shape {S.shape}")
    S = 0.5 * (S + S.T)
    lo = min_eigenvalue(S)
    if lo < -psd_tol:
        raise NotPSD(f"kernel has eigenvalue {lo:.3g}")
    d = np.diag(S)
    M = d[:, None] + d[None, :] - 2.0 * S
    M = 0.5 * (M + M.T)
    np.fill_diagonal(M, 0.0)
    return np.maximum(M, 0.0)


def burg_divergence(S, S0, p=1.0):
    """tr(S S0^-1) - log det(S S0^-1) - p."""
    S = np.asarray(S, dtype=float)
    S0 = np.asarray(S0, dtype=float)
    if S.shape != S0.shape:
        raise DimensionMismatch(f"kernel shapes differ: {S.shape} vs {S0.shape}")
    sign0, logdet0 = np.linalg.slogdet(S0)
    if sign0 <= 0 or np.linalg.cond(S0) > 1e14:
        raise SingularReference("reference kernel is not invertible")
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0 or min_eigenvalue(S) <= 0:
        raise NonPositiveDefiniteArgument("Burg divergence needs a positive definite kernel")
    R = np.linalg.solve(S0, S)  # similar to S S0^-1, same trace
    return float(np.trace(R) - (logdet - logdet0) - p)


def plan_gradient(P):
    """Gradient of <P, M(S)> over symmetric S, holding P fixed.

    Off-diagonals carry -(P_ij + P_ji); the diagonal carries
    sum_{k != i} (P_ik + P_ki).
    """
    P = np.asarray(P, dtype=float)
    W = P + P.T
    np.fill_diagonal(W, 0.0)
    G = -W
    np.fill_diagonal(G, W.sum(axis=1))
    return G


@dataclass
class PlanAccumulator:
    L: int
    pbar: np.ndarray = field(default=None)
    sample_count: int = 0

    def __post_init__(self):
        if self.pbar is None:
            self.pbar = np.zeros((self.L, self.L))

    def merge(self, other):
        if other.L != self.L:
            raise DimensionMismatch("accumulators over different label counts")
        return PlanAccumulator(self.L, self.pbar + other.pbar, self.sample_count + other.sample_count)


def accumulate_pbar(acc, plan):
    """Add one transport plan (or a stack of them) to the accumulator, in place."""
    P = getattr(plan, "entries", plan)
    P = np.asarray(P, dtype=float)
    if P.ndim == 2:
        P = P[None]
    if P.shape[1:] != (acc.L, acc.L):
        raise DimensionMismatch(f"plan shape {P.shape[1:]} does not match accumulator size {acc.L}")
    acc.pbar = acc.pbar + plan_gradient(P.sum(axis=0))
    acc.sample_count += P.shape[0]
    return acc


def kernel_objective(acc, S, S0, lambda1, p=1.0):
    """Fixed-plan objective <Pbar/n, S> + lambda1 * Burg(S, S0) minimized by update_kernel."""
    n = max(acc.sample_count, 1)
    return float(np.sum(acc.pbar * S) / n + lambda1 * burg_divergence(S, S0, p))


def update_kernel(acc, S0, lambda1, literal=False, p=1.0, project=True):
    """Closed-form kernel update from accumulated plans.

    Solves the stationarity condition Pbar/n + lambda1 S0^-1 - lambda1 S^-1 = 0,
    then projects onto the PSD cone. ``literal=True`` uses
    ``(Pbar/n + S0^-1 - p I)^-1`` instead, kept for comparison runs.
    """
    S0 = np.asarray(S0, dtype=float)
    if acc.L != S0.shape[0]:
        raise DimensionMismatch("accumulator and reference kernel sizes differ")
    if lambda1 <= 0:
        raise ValueError("lambda1 must be positive")
    try:
        S0_inv = np.linalg.inv(S0)
    except np.linalg.LinAlgError:
        raise SingularReference("reference kernel is not invertible") from None
    G = acc.pbar / acc.sample_count if acc.sample_count else np.zeros_like(S0)
    if literal:
        A = G + S0_inv - p * np.eye(acc.L)
        scale = 1.0
    else:
        A = G + lambda1 * S0_inv
        scale = lambda1
    A = 0.5 * (A + A.T)
    if np.linalg.cond(A) > 1e14:
        raise SingularSystem("kernel update system is singular; lambda1 too small for the plan mass")
    S = scale * np.linalg.inv(A)
    S = 0.5 * (S + S.T)
    return psd_project(S) if project else S


def init_reference_kernel(labels, ridge=1e-3):
    """S0 = Y^T Y / N + ridge * I over the labeled vectors."""
    Y = np.asarray(labels, dtype=float)
    if Y.size == 0 or Y.ndim != 2 or Y.shape[0] == 0:
        raise EmptyLabelSet("need at least one labeled example")
    return Y.T @ Y / Y.shape[0] + ridge * np.eye(Y.shape[1])


def correlation_view(M):
    """Affine map of -M onto [-1, 1]: the largest cost goes to -1, zero cost to +1."""
    M = np.asarray(M, dtype=float)
    lo, hi = float(M.min()), float(M.max())
    if hi - lo <= 0:
        return np.ones_like(M)
    return 2.0 * (hi - M) / (hi - lo) - 1.0


def write_matrix_csv(path, A, label_names, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(label_names)
        for row in np.asarray(A, dtype=float):
            w.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])
