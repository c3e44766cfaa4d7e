"""
Entropic optimal transport on the label simplex.

Sinkhorn-Knopp scaling for plans and distances, the centered dual vector used
as the training (sub)gradient, and a dense transportation-simplex solver that
serves as an exact oracle at small L.
"""

from dataclasses import dataclass
import numpy as np

from .errors import (
    AllZero,
    DegenerateBasis,
    DimensionMismatch,
    NegativeEntry,
    NotNormalized,
    NumericalUnderflow,
)

# rescale scalings once any positive entry drops below this
UNDERFLOW_GUARD = 1e-300


@dataclass(frozen=True)
class TransportPlan:
    entries: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    @property
    def L(self):
        return self.entries.shape[0]

    def cost(self, M):
        return float(np.sum(self.entries * M))


@dataclass(frozen=True)
class SinkhornState:
    u: np.ndarray
    v: np.ndarray
    kernel_k: np.ndarray
    lam: float
    iterations_used: int


def make_histogram(raw, mode="strict", atol=1e-9):
    """Place a nonnegative vector on the simplex.

    ``strict`` only validates; ``normalize`` divides by the total mass.
    """
    h = np.asarray(raw, dtype=float)
    if h.ndim != 1 or h.shape[0] < 2:
        raise DimensionMismatch(f"histogram needs a 1-D vector of length >= 2, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("histogram entries must be finite")
    if np.any(h < 0):
        raise NegativeEntry(f"negative histogram entry {h.min()!r}")
    total = h.sum()
    if mode == "normalize":
        if total <= 0:
            raise AllZero("cannot normalize a vector with no positive entry")
        return h / total
    if mode == "strict":
        if abs(total - 1.0) > atol:
            raise NotNormalized(f"entries sum to {total!r}, expected 1")
        return h.copy()
    raise ValueError(f"unknown histogram mode {mode!r}")


def validate_cost_matrix(M, atol=1e-9):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"cost matrix must be square, got shape {M.shape}")
    if np.any(M < 0):
        raise NegativeEntry("cost matrix has negative entries")
    if np.max(np.abs(M - M.T)) > atol:
        raise ValueError("cost matrix is not symmetric")
    if np.any(np.abs(np.diag(M)) > atol):
        raise ValueError("cost matrix has a nonzero diagonal")
    return M


def _check_dims(M, *hists):
    L = M.shape[0]
    for h in hists:
        if h.shape[-1] != L:
            raise DimensionMismatch(f"histogram length {h.shape[-1]} does not match cost matrix size {L}")


def gibbs_kernel(M, lam):
    return np.exp(-lam * np.asarray(M, dtype=float) - 1.0)


def sinkhorn_scalings(r, c, K, max_iter=1000, tol=1e-6, check_every=5):
    """Run Sinkhorn-Knopp on a batch of marginal pairs sharing one kernel.

    ``r`` and ``c`` have shape (n, L). Returns ``(u, v, iterations)`` with
    ``P_k = diag(u_k) K diag(v_k)``. Rows are exact after the last half-step;
    iteration stops once every column marginal's l1 error is <= tol.
    """
    r = np.atleast_2d(r)
    c = np.atleast_2d(c)
    KT = K.T
    u = np.ones_like(r)
    v = c / (u @ K)
    it = 0
    while it < max_iter:
        it += 1
        u = r / (v @ KT)
        v = c / (u @ K)
        if it % check_every == 0 or it == max_iter:
            u, v = _guard(u, v, r, c)
            # v was just refreshed, so measure the column error of the matching u
            u = r / (v @ KT)
            err = np.abs(v * (u @ K) - c).sum(axis=1)
            if np.all(err <= tol):
                break
            v = c / (u @ K)
    else:
        u = r / (v @ KT)
    return u, v, it


def _guard(u, v, r, c):
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise NumericalUnderflow("Sinkhorn scaling became non-finite; lambda is too large for this cost scale")
    pos_u = u[r > 0]
    pos_v = v[c > 0]
    if (pos_u.size and pos_u.min() <= 0) or (pos_v.size and pos_v.min() <= 0):
        raise NumericalUnderflow("Sinkhorn scaling underflowed to zero on a positive marginal")
    small = (np.where(r > 0, u, np.inf).min(axis=1) < UNDERFLOW_GUARD) | (
        np.where(c > 0, v, np.inf).min(axis=1) < UNDERFLOW_GUARD
    )
    if np.any(small):
        # diag(u) K diag(v) is invariant under u*s, v/s
        s = u[small].max(axis=1, keepdims=True)
        u[small] = u[small] / s
        v[small] = v[small] * s
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericalUnderflow("Sinkhorn scaling out of range after rescaling")
    return u, v


def sinkhorn_plan(r, c, M, lam, max_iter=1000, tol=1e-6):
    r = np.asarray(r, dtype=float)
    c = np.asarray(c, dtype=float)
    M = np.asarray(M, dtype=float)
    _check_dims(M, r, c)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    K = gibbs_kernel(M, lam)
    u, v, it = sinkhorn_scalings(r[None, :], c[None, :], K, max_iter, tol)
    u, v = u[0], v[0]
    P = u[:, None] * K * v[None, :]
    return TransportPlan(P, r, c), SinkhornState(u, v, K, float(lam), it)


def sinkhorn_distance(r, c, M, lam, max_iter=1000, tol=1e-6):
    """<P^lambda, M> for the entropic plan between ``r`` and ``c``."""
    plan, _ = sinkhorn_plan(r, c, M, lam, max_iter, tol)
    return plan.cost(M)


def entropy(P):
    P = P.entries if isinstance(P, TransportPlan) else np.asarray(P, dtype=float)
    p = P[P > 0]
    return float(-np.sum(p * np.log(p)))


def sinkhorn_objective(r, c, M, lam, max_iter=1000, tol=1e-6):
    """Entropic objective <P^lambda, M> - H(P^lambda)/lambda.

    This is the function whose simplex-tangent gradient in ``r`` is the
    centered dual returned by :func:`ot_subgradient`.
    """
    plan, _ = sinkhorn_plan(r, c, M, lam, max_iter, tol)
    return plan.cost(M) - entropy(plan) / lam


def centered_dual(u, lam):
    """(log u)/lambda minus its mean, row-wise for 2-D input."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise NumericalUnderflow("zero Sinkhorn scaling: a prediction entry underflowed to 0")
    a = np.log(u) / lam
    return a - a.mean(axis=-1, keepdims=True)


def ot_subgradient(pred, target, M, lam, max_iter=1000, tol=1e-6):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    M = np.asarray(M, dtype=float)
    _check_dims(M, pred, target)
    if np.any(pred <= 0):
        raise ValueError("prediction histogram must be strictly positive")
    _, state = sinkhorn_plan(pred, target, M, lam, max_iter, tol)
    return centered_dual(state.u, lam)


# ---------------------------------------------------------------------------
# exact transportation simplex (test oracle)


def exact_ot(r, c, M, max_pivots=None):
    """Solve min <P, M> over U(r, c) by the transportation simplex.

    North-west-corner start, MODI potentials, Bland's rule for entering and
    leaving cells. If pivoting stalls, the supplies are epsilon-perturbed to
    break degeneracy and the resulting basis is re-solved on the original
    marginals.
    """
    r = np.asarray(r, dtype=float)
    c = np.asarray(c, dtype=float)
    M = np.asarray(M, dtype=float)
    _check_dims(M, r, c)
    L = M.shape[0]
    if L > 16:
        raise ValueError("exact_ot is an oracle for L <= 16")
    if max_pivots is None:
        max_pivots = 50 * L * L
    try:
        basis, flow = _transport_simplex(r, c, M, max_pivots)
    except _Stalled:
        eps = 1e-9
        rp = r + eps
        cp = c.copy()
        cp[-1] += L * eps
        try:
            basis, _ = _transport_simplex(rp, cp, M, max_pivots)
        except _Stalled:
            raise DegenerateBasis("transportation simplex failed to converge after perturbation") from None
        flow = _tree_flows(basis, r, c)
        if min(flow.values()) < -1e-9:
            raise DegenerateBasis("perturbed basis infeasible for the original marginals")
    P = np.zeros((L, L))
    for (i, j), x in flow.items():
        P[i, j] = max(x, 0.0)
    return TransportPlan(P, r, c), float(np.sum(P * M))


class _Stalled(Exception):
    pass


def _northwest_corner(r, c):
    a = r.copy()
    b = c.copy()
    m, n = len(a), len(b)
    i = j = 0
    basis = []
    flow = {}
    while True:
        q = min(a[i], b[j])
        flow[(i, j)] = q
        basis.append((i, j))
        a[i] -= q
        b[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return basis, flow


def _potentials(basis, M):
    L = M.shape[0]
    u = np.full(L, np.nan)
    v = np.full(L, np.nan)
    u[0] = 0.0
    rows = {}
    cols = {}
    for i, j in basis:
        rows.setdefault(i, []).append(j)
        cols.setdefault(j, []).append(i)
    stack = [("r", 0)]
    while stack:
        kind, k = stack.pop()
        if kind == "r":
            for j in rows.get(k, ()):
                if np.isnan(v[j]):
                    v[j] = M[k, j] - u[k]
                    stack.append(("c", j))
        else:
            for i in cols.get(k, ()):
                if np.isnan(u[i]):
                    u[i] = M[i, k] - v[k]
                    stack.append(("r", i))
    return u, v


def _tree_path(basis, i0, j0):
    """Basic cells on the tree path from row node i0 to column node j0."""
    adj = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append(("c", j))
        adj.setdefault(("c", j), []).append(("r", i))
    start, goal = ("r", i0), ("c", j0)
    prev = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nxt in adj.get(node, ()):
            if nxt not in prev:
                prev[nxt] = node
                stack.append(nxt)
    if goal not in prev:
        raise DegenerateBasis("basis is not a spanning tree")
    nodes = [goal]
    while prev[nodes[-1]] is not None:
        nodes.append(prev[nodes[-1]])
    nodes.reverse()
    cells = []
    for a, b in zip(nodes, nodes[1:]):
        cell = (a[1], b[1]) if a[0] == "r" else (b[1], a[1])
        cells.append(cell)
    return cells


def _transport_simplex(r, c, M, max_pivots):
    L = M.shape[0]
    basis, flow = _northwest_corner(r, c)
    scale = max(1.0, float(np.max(M)))
    for _ in range(max_pivots):
        u, v = _potentials(basis, M)
        reduced = M - u[:, None] - v[None, :]
        nonbasic = np.ones((L, L), dtype=bool)
        for cell in basis:
            nonbasic[cell] = False
        candidates = np.flatnonzero(nonbasic & (reduced < -1e-12 * scale))
        entering = divmod(int(candidates[0]), L) if candidates.size else None
        if entering is None:
            return basis, flow
        path = _tree_path(basis, *entering)
        minus = path[0::2]
        plus = path[1::2]
        theta = min(flow[cell] for cell in minus)
        leaving = min(cell for cell in minus if flow[cell] <= theta + 1e-15)
        for cell in minus:
            flow[cell] -= theta
        for cell in plus:
            flow[cell] += theta
        flow[entering] = theta
        del flow[leaving]
        basis.remove(leaving)
        basis.append(entering)
    raise _Stalled()


def _tree_flows(basis, r, c):
    """Flows on a spanning-tree basis, fixed by the marginals (leaf peeling)."""
    a = r.astype(float).copy()
    b = c.astype(float).copy()
    remaining = set(basis)
    flow = {}
    while remaining:
        row_deg = {}
        col_deg = {}
        for i, j in remaining:
            row_deg[i] = row_deg.get(i, 0) + 1
            col_deg[j] = col_deg.get(j, 0) + 1
        for i, j in sorted(remaining):
            if row_deg[i] == 1:
                x = a[i]
                break
            if col_deg[j] == 1:
                x = b[j]
                break
        else:
            raise DegenerateBasis("basis contains a cycle")
        flow[(i, j)] = x
        a[i] -= x
        b[j] -= x
        remaining.remove((i, j))
    return flow


# ---------------------------------------------------------------------------
# metric axioms


@dataclass(frozen=True)
class MetricAxiomReport:
    nonnegativity: bool
    symmetry: bool
    zero_diagonal: bool
    triangle_violations: int
    triples_checked: int

    @property
    def ok(self):
        return self.nonnegativity and self.symmetry and self.zero_diagonal and self.triangle_violations == 0


def check_metric_axioms(M, sample_count=None, seed=0, squared=False, slack=1e-9):
    """Check the distance axioms on a cost matrix.

    With ``squared=True`` the entries are treated as squared distances (the
    kernel-derived form) and the axioms are checked on their square root.
    Triangle inequalities are enumerated over all triples unless
    ``sample_count`` is smaller than L**3, in which case that many triples
    are sampled with ``seed``.
    """
    D = np.asarray(M, dtype=float)
    if squared:
        D = np.sqrt(np.clip(D, 0.0, None))
    L = D.shape[0]
    nonneg = bool(np.all(D >= -slack))
    sym = bool(np.max(np.abs(D - D.T)) <= slack)
    zdiag = bool(np.all(np.abs(np.diag(D)) <= slack))
    if sample_count is None or sample_count >= L ** 3:
        # viol[i, j, k]: D_ik > D_ij + D_jk
        viol = D[:, None, :] > D[:, :, None] + D[None, :, :] + slack
        return MetricAxiomReport(nonneg, sym, zdiag, int(viol.sum()), L ** 3)
    rng = np.random.default_rng(seed)
    i, j, k = rng.integers(0, L, size=(3, sample_count))
    viol = D[i, k] > D[i, j] + D[j, k] + slack
    return MetricAxiomReport(nonneg, sym, zdiag, int(viol.sum()), int(sample_count))
