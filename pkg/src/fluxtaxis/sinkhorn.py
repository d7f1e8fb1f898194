"""Debiased entropic transport divergence between nodal densities.

The divergence is S(a, b) = OT_eps(a, b) - OT_eps(a, a)/2 - OT_eps(b, b)/2
with OT_eps the KL-regularized transport cost, squared Euclidean ground
cost between mesh nodes, and masses given by the lumped mass matrix. S is
nonnegative, vanishes iff the densities coincide, and approaches the
squared Wasserstein-2 distance as eps shrinks.

Two solver paths share one code base: plain scaled (matvec) iterations when
exp(-C/eps) stays representable, and log-domain updates otherwise. Values
are differentiable in the input densities through the converged potentials
(envelope relation), which is what the training loop consumes.
"""

from __future__ import annotations

import numpy as np
import torch

from .mesh import Mesh

_SCALED_LIMIT = 600.0  # max C/eps exponent for the scaled fast path


class SinkhornError(RuntimeError):
    """Scaling iterations failed to reach the marginal tolerance."""

    def __init__(self, message: str, marginal_violation: float):
        super().__init__(message)
        self.marginal_violation = marginal_violation


def cost_matrix(mesh: Mesh) -> torch.Tensor:
    """Squared Euclidean distances between node coordinates, float64."""
    x = torch.from_numpy(np.ascontiguousarray(mesh.nodes))
    return torch.cdist(x, x, p=2.0) ** 2


def _check_masses(a: torch.Tensor) -> None:
    if not torch.isfinite(a).all() or (a <= 0).any():
        raise ValueError("masses must be strictly positive on the solver support")


def _scaled_potentials(a, b, C, eps, max_iter, tol):
    """Classic u/v scaling iterations; returns (f, g, err, converged)."""
    K = torch.exp(-C / eps)
    u = torch.ones_like(a)
    v = torch.ones_like(b)
    err = torch.inf
    for it in range(max_iter):
        u = a / (v @ K.T)
        v = b / (u @ K)
        if not (torch.isfinite(u).all() and torch.isfinite(v).all()):
            return None, None, np.inf, False  # overflow: caller falls back
        if it % 5 == 4 or it == max_iter - 1:
            err = float((u * (v @ K.T) - a).abs().max())
            if err <= tol:
                break
    f = eps * (torch.log(u) - torch.log(a))
    g = eps * (torch.log(v) - torch.log(b))
    return f, g, err, err <= tol


def _log_potentials(a, b, C, eps, max_iter, tol):
    la = torch.log(a)
    lb = torch.log(b)
    f = torch.zeros_like(a)
    g = torch.zeros_like(b)
    err = torch.inf
    for it in range(max_iter):
        # softmin updates with masses folded into the kernel
        f_new = -eps * torch.logsumexp((g + eps * lb).unsqueeze(-2) / eps - C / eps, dim=-1)
        g_new = -eps * torch.logsumexp(
            (f_new + eps * la).unsqueeze(-1) / eps - C / eps, dim=-2
        )
        shift = float((f_new - f).abs().max())
        f, g = f_new, g_new
        if it % 3 == 2 or it == max_iter - 1:
            err = float((a * torch.expm1((-eps * torch.logsumexp(
                (g + eps * lb).unsqueeze(-2) / eps - C / eps, dim=-1) - f) / -eps)).abs().max())
            if err <= tol:
                break
        del shift
    return f, g, err, err <= tol


def _symmetric_scaled(a, C, eps, max_iter, tol):
    K = torch.exp(-C / eps)
    u = torch.ones_like(a)
    err = torch.inf
    for it in range(max_iter):
        u = torch.sqrt(u * a / (u @ K))
        if not torch.isfinite(u).all():
            return None, np.inf, False
        if it % 5 == 4 or it == max_iter - 1:
            err = float((u * (u @ K) - a).abs().max())
            if err <= tol:
                break
    p = eps * (torch.log(u) - torch.log(a))
    return p, err, err <= tol


def _symmetric_log(a, C, eps, max_iter, tol):
    la = torch.log(a)
    p = torch.zeros_like(a)
    err = torch.inf
    for it in range(max_iter):
        t = -eps * torch.logsumexp((p + eps * la).unsqueeze(-2) / eps - C / eps, dim=-1)
        p = 0.5 * (p + t)
        if it % 3 == 2 or it == max_iter - 1:
            t2 = -eps * torch.logsumexp((p + eps * la).unsqueeze(-2) / eps - C / eps, dim=-1)
            err = float((a * torch.expm1((t2 - p) / eps)).abs().max())
            if err <= tol:
                break
    return p, err, err <= tol


def transport_potentials(a, b, C, eps, max_iter=500, tol=1e-9):
    """Converged dual potentials (f, g) for OT_eps(a, b); detached tensors."""
    with torch.no_grad():
        ad, bd = a.detach(), b.detach()
        _check_masses(ad)
        _check_masses(bd)
        if float(C.max()) / eps < _SCALED_LIMIT:
            f, g, err, ok = _scaled_potentials(ad, bd, C, eps, max_iter, tol)
            if f is not None and ok:
                return f, g
        f, g, err, ok = _log_potentials(ad, bd, C, eps, max_iter, tol)
        if not ok:
            raise SinkhornError(
                f"transport scaling stalled at marginal violation {err:.3e}", err
            )
        return f, g


def self_transport_potential(a, C, eps, max_iter=500, tol=1e-9):
    """Converged symmetric potential p for the debiasing term OT_eps(a, a)."""
    with torch.no_grad():
        ad = a.detach()
        _check_masses(ad)
        if float(C.max()) / eps < _SCALED_LIMIT:
            p, err, ok = _symmetric_scaled(ad, C, eps, max_iter, tol)
            if p is not None and ok:
                return p
        p, err, ok = _symmetric_log(ad, C, eps, max_iter, tol)
        if not ok:
            raise SinkhornError(
                f"symmetric scaling stalled at marginal violation {err:.3e}", err
            )
        return p


def sinkhorn_divergence_torch(
    a: torch.Tensor,
    b: torch.Tensor,
    C: torch.Tensor,
    eps: float,
    max_iter: int = 500,
    tol: float = 1e-9,
    b_self_value: torch.Tensor | None = None,
) -> torch.Tensor:
    """Debiased divergence, differentiable in a and b via converged potentials.

    ``b_self_value`` short-circuits the OT(b, b) debias term when the caller
    has cached it (targets that never change during training).
    """
    f, g = transport_potentials(a, b, C, eps, max_iter, tol)
    p_a = self_transport_potential(a, C, eps, max_iter, tol)
    value = (a * (f - p_a)).sum(-1) + (b * g).sum(-1)
    if b_self_value is None:
        p_b = self_transport_potential(b, C, eps, max_iter, tol)
        value = value - (b * p_b).sum(-1)
    else:
        value = value - b_self_value
    return value


def self_transport_value(a, C, eps, max_iter=500, tol=1e-9) -> torch.Tensor:
    """Cached half-debias term <a, p_a> (detached)."""
    p = self_transport_potential(a, C, eps, max_iter, tol)
    return (a.detach() * p).sum(-1)


def lumped_masses(M) -> np.ndarray:
    """Nodal lumped masses: row sums of the consistent mass matrix."""
    return np.asarray(M.sum(axis=1)).ravel()


def node_masses(mesh: Mesh, M, rho: np.ndarray) -> np.ndarray:
    """Nonnegative transport masses for a nodal density, normalized to 1."""
    rho = np.asarray(rho, dtype=np.float64)
    if (rho < 0).any():
        raise ValueError("densities must be nonnegative")
    m = lumped_masses(M) * rho
    total = m.sum()
    if total <= 0:
        raise ValueError("density has zero total mass")
    return m / total


def default_epsilon(mesh: Mesh) -> float:
    return 0.01 * mesh.diameter() ** 2


def sinkhorn_w2(
    mesh: Mesh,
    rho1: np.ndarray,
    rho2: np.ndarray,
    eps: float | None = None,
    max_iter: int = 500,
    tol: float = 1e-9,
    M=None,
) -> float:
    """Debiased entropic W2^2 between two nonnegative nodal densities.

    Masses are the lumped mass matrix applied to each density, normalized to
    total mass 1; the ground cost is squared node distance. Raises
    SinkhornError (with the marginal-violation norm) on non-convergence.
    """
    if M is None:
        from . import fem

        M = fem.assemble_operators(mesh, np.zeros((mesh.n_elements, 2)), 1.0).M
    if eps is None:
        eps = default_epsilon(mesh)
    a = node_masses(mesh, M, rho1)
    b = node_masses(mesh, M, rho2)
    # restrict to the union support; zero-mass nodes carry no transport
    support = np.flatnonzero((a > 0) | (b > 0))
    sa = np.flatnonzero(a > 0)
    sb = np.flatnonzero(b > 0)
    del support
    nodes = torch.from_numpy(np.ascontiguousarray(mesh.nodes))
    Cab = (torch.cdist(nodes[sa], nodes[sb]) ** 2)
    Caa = (torch.cdist(nodes[sa], nodes[sa]) ** 2)
    Cbb = (torch.cdist(nodes[sb], nodes[sb]) ** 2)
    ta = torch.from_numpy(a[sa])
    tb = torch.from_numpy(b[sb])
    f, g = transport_potentials(ta, tb, Cab, eps, max_iter, tol)
    p_a = self_transport_potential(ta, Caa, eps, max_iter, tol)
    p_b = self_transport_potential(tb, Cbb, eps, max_iter, tol)
    value = (ta * (f - p_a)).sum() + (tb * (g - p_b)).sum()
    return float(value)
