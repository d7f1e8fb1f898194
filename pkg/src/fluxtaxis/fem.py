"""P1 finite element operators, solvers, and field evaluation.

Assembled operators are scipy CSR matrices; fields are plain float64 arrays
with one value per mesh node. Everything here is a pure function of its
inputs, so meshes and operators can be shared freely across workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh


class SolverError(RuntimeError):
    """Linear solve failed (singular or severely ill-conditioned system)."""


class NewtonError(RuntimeError):
    """Newton iteration did not reach tolerance within max_iter."""

    def __init__(self, message: str, residual_norm: float, iterations: int):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


class OutOfDomainError(ValueError):
    """Query point lies outside the closed domain."""


@dataclass(frozen=True)
class Operators:
    """Stiffness L, consistent mass M, and Galerkin advection A."""

    L: sp.csr_matrix
    M: sp.csr_matrix
    A: sp.csr_matrix

    def system(self, peclet: float) -> sp.csr_matrix:
        """Steady advection-diffusion system matrix (1/Pe) L + A."""
        return (self.L / peclet + self.A).tocsr()


def element_geometry(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-element signed areas and P1 basis gradients.

    Returns (areas (n_e,), grads (n_e, 3, 2)) where grads[e, i] is the
    constant gradient of the hat function of local vertex i on element e.
    """
    p = mesh.nodes[mesh.elements]  # (n_e, 3, 2)
    x, y = p[..., 0], p[..., 1]
    # grad phi_i = perp(edge opposite i) / (2 area)
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    grads = np.stack([b, c], axis=2) / (2.0 * areas[:, None, None])
    return areas, grads


def assemble_operators(mesh: Mesh, velocity: np.ndarray, peclet: float) -> Operators:
    """Assemble stiffness, consistent mass, and advection matrices.

    ``velocity`` holds one 2-vector per element. The advection matrix is the
    plain Galerkin form A_ij = integral (v . grad phi_j) phi_i.
    """
    velocity = np.asarray(velocity, dtype=np.float64)
    if velocity.shape != (mesh.n_elements, 2):
        raise ValueError(f"velocity must be ({mesh.n_elements}, 2), got {velocity.shape}")
    if not np.isfinite(velocity).all():
        raise ValueError("non-finite velocity entries")
    if peclet <= 0:
        raise ValueError("peclet must be positive")

    areas, grads = element_geometry(mesh)

    # local matrices, vectorized over elements
    k_loc = np.einsum("eid,ejd->eij", grads, grads) * areas[:, None, None]
    m_loc = (np.ones((3, 3)) + np.eye(3))[None, :, :] * (areas[:, None, None] / 12.0)
    vdotg = np.einsum("ed,ejd->ej", velocity, grads)  # (n_e, 3)
    a_loc = np.repeat(vdotg[:, None, :], 3, axis=1) * (areas[:, None, None] / 3.0)

    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    shape = (mesh.n_nodes, mesh.n_nodes)

    def csr(local):
        mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=shape)
        return mat.tocsr()

    return Operators(L=csr(k_loc), M=csr(m_loc), A=csr(a_loc))


def boundary_value_vector(mesh: Mesh, g) -> np.ndarray:
    """Expand boundary data to a full nodal vector (zero at interior nodes).

    ``g`` may be a scalar, a dict {node index: value}, a callable of (x, y),
    or a full-length array. A dict missing a boundary node is rejected.
    """
    vec = np.zeros(mesh.n_nodes)
    if np.isscalar(g):
        vec[mesh.boundary_nodes] = float(g)
    elif isinstance(g, dict):
        missing = [int(i) for i in mesh.boundary_nodes if int(i) not in g]
        if missing:
            raise ValueError(f"boundary values missing for nodes {missing[:5]}")
        for i in mesh.boundary_nodes:
            vec[i] = g[int(i)]
    elif callable(g):
        pts = mesh.nodes[mesh.boundary_nodes]
        vec[mesh.boundary_nodes] = np.asarray([g(x, y) for x, y in pts])
    else:
        arr = np.asarray(g, dtype=np.float64)
        if arr.shape != (mesh.n_nodes,):
            raise ValueError("array boundary data must be full nodal length")
        vec[mesh.boundary_nodes] = arr[mesh.boundary_nodes]
    return vec


def apply_dirichlet(
    system: sp.spmatrix, rhs: np.ndarray, mesh: Mesh, g
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Constrain the system to Dirichlet data on the tagged boundary.

    Boundary rows become identity rows with rhs equal to g; boundary columns
    are folded into the rhs of interior rows so the constrained matrix keeps
    only interior-interior couplings off the boundary diagonal.
    """
    gvec = boundary_value_vector(mesh, g)
    bmask = np.zeros(mesh.n_nodes, dtype=bool)
    bmask[mesh.boundary_nodes] = True

    K = system.tocsr()
    rhs = np.asarray(rhs, dtype=np.float64).copy()

    # move boundary couplings of interior rows to the rhs
    lift = K @ gvec
    rhs[~bmask] -= lift[~bmask]
    rhs[bmask] = gvec[bmask]

    interior = sp.diags((~bmask).astype(np.float64))
    boundary = sp.diags(bmask.astype(np.float64))
    return (interior @ K @ interior + boundary).tocsr(), rhs


def solve_linear(system: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """Sparse direct solve with a residual guarantee of 1e-10 * (1 + |rhs|)."""
    rhs = np.asarray(rhs, dtype=np.float64)
    K = system.tocsc()
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            u = spla.spsolve(K, rhs)
        except spla.MatrixRankWarning as exc:
            raise SolverError(f"singular system: {exc}") from exc
    if not np.isfinite(u).all():
        raise SolverError("direct solve produced non-finite values (singular system)")
    resid = np.linalg.norm(K @ u - rhs)
    bound = 1e-10 * (1.0 + np.linalg.norm(rhs))
    if resid > bound:
        cond = _condition_estimate(K)
        raise SolverError(
            f"solve residual {resid:.3e} exceeds {bound:.3e}; condition estimate {cond:.3e}"
        )
    return u


def _condition_estimate(K: sp.spmatrix) -> float:
    try:
        lu = spla.splu(K.tocsc())
        n = K.shape[0]
        inv_norm = spla.onenormest(
            spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda x: lu.solve(x, "T"))
        )
        return float(inv_norm * spla.norm(K, 1))
    except Exception:
        return float("inf")


def newton_solve(residual_and_jacobian, u0: np.ndarray, tol: float = 1e-10,
                 max_iter: int = 50) -> tuple[np.ndarray, int]:
    """Newton iteration for R(u) = 0 with an exact Jacobian callback.

    ``residual_and_jacobian(u)`` returns (R, J); J may be dense or sparse.
    Returns (u, iterations). Raises NewtonError when tol is unreachable
    within max_iter, carrying the last residual norm.
    """
    u = np.asarray(u0, dtype=np.float64).copy()
    r, jac = residual_and_jacobian(u)
    rnorm = float(np.linalg.norm(r))
    for it in range(1, max_iter + 1):
        if rnorm <= tol:
            return u, it - 1
        if sp.issparse(jac):
            du = spla.spsolve(jac.tocsc(), -r)
        else:
            du = np.linalg.solve(np.asarray(jac, dtype=np.float64), -r)
        if not np.isfinite(du).all():
            raise NewtonError("Newton step is non-finite (singular Jacobian)", rnorm, it)
        u = u + du
        r, jac = residual_and_jacobian(u)
        rnorm = float(np.linalg.norm(r))
    if rnorm <= tol:
        return u, max_iter
    raise NewtonError(
        f"Newton did not converge in {max_iter} iterations (residual {rnorm:.3e})",
        rnorm,
        max_iter,
    )


# ---------------------------------------------------------------------------
# point location and field evaluation
# ---------------------------------------------------------------------------

_LOCATE_TOL = 1e-12


def locate_point(mesh: Mesh, x) -> tuple[int, np.ndarray]:
    """Find the element containing x and its barycentric coordinates.

    Points on shared edges resolve to the incident element with the lowest
    index. Raises OutOfDomainError when no element contains x.
    """
    x = np.asarray(x, dtype=np.float64)
    p = mesh.nodes[mesh.elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    rel = x[None, :] - p[:, 0]
    l1 = (rel[:, 0] * d2[:, 1] - rel[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * rel[:, 1] - d1[:, 1] * rel[:, 0]) / det
    l0 = 1.0 - l1 - l2
    scale = np.sqrt(np.abs(det))  # edge-length scale per element
    tol = _LOCATE_TOL + 1e-12 * scale
    inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise OutOfDomainError(f"point {x.tolist()} is outside the domain")
    e = int(idx[0])
    bary = np.clip(np.array([l0[e], l1[e], l2[e]]), 0.0, 1.0)
    return e, bary / bary.sum()


def point_in_domain(mesh: Mesh, x) -> bool:
    try:
        locate_point(mesh, x)
        return True
    except OutOfDomainError:
        return False


def evaluate_field(mesh: Mesh, field: np.ndarray, x) -> float:
    """Barycentric P1 interpolation of a nodal field at an interior point."""
    e, bary = locate_point(mesh, x)
    return float(field[mesh.elements[e]] @ bary)


def field_gradient_at(mesh: Mesh, field: np.ndarray, x) -> np.ndarray:
    """Piecewise-constant gradient of the P1 interpolant at x.

    On shared edges the value comes from the lowest-index incident element.
    """
    e, _ = locate_point(mesh, x)
    _, grads = element_geometry(mesh)
    return grads[e].T @ field[mesh.elements[e]]


def clip_step_to_domain(mesh: Mesh, start: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Walk from start along step, stopping at the first domain exit.

    The start point must be inside the closed domain. The returned point is
    inside the closed domain; when the full step exits, it sits on the
    boundary (to locate-tolerance) along the step direction.
    """
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    if not point_in_domain(mesh, start):
        raise OutOfDomainError(f"step start {start.tolist()} is outside the domain")
    if point_in_domain(mesh, start + step):
        # guard against corridors: the segment may exit and re-enter
        ts = np.linspace(0.0, 1.0, 17)[1:]
        if all(point_in_domain(mesh, start + t * step) for t in ts):
            return start + step
    # first crossing bracket by sampling, then bisection
    ts = np.linspace(0.0, 1.0, 65)
    t_lo = 0.0
    t_hi = 1.0
    for t in ts[1:]:
        if point_in_domain(mesh, start + t * step):
            t_lo = t
        else:
            t_hi = t
            break
    for _ in range(60):
        mid = 0.5 * (t_lo + t_hi)
        if point_in_domain(mesh, start + mid * step):
            t_lo = mid
        else:
            t_hi = mid
    return start + t_lo * step


def harmonic_lift(mesh: Mesh, L: sp.spmatrix, g) -> np.ndarray:
    """Discrete harmonic extension of Dirichlet data into the domain."""
    gvec = boundary_value_vector(mesh, g)
    if not np.any(gvec):
        return np.zeros(mesh.n_nodes)
    K, rhs = apply_dirichlet(L, np.zeros(mesh.n_nodes), mesh, g)
    return solve_linear(K, rhs)


def l2_norm(mesh: Mesh, field: np.ndarray) -> float:
    """L2 norm of the P1 interpolant, integrated exactly elementwise."""
    areas, _ = element_geometry(mesh)
    vals = field[mesh.elements]  # (n_e, 3)
    # elementwise exact integral of (sum_i v_i phi_i)^2
    quad = (np.einsum("ei,ej->e", vals, vals) + (vals**2).sum(axis=1)) * areas / 12.0
    return float(np.sqrt(quad.sum()))
