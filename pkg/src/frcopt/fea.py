"""Structured plane-stress finite elements on a regular quadrilateral grid.

Bilinear Q4 elements with unit thickness and 2x2 Gauss quadrature. The
element stiffness is linear in the six independent entries of the
elasticity tensor, so six template matrices integrated once at startup
turn per-element stiffness computation into a coefficient recombination.

The sparse solve is exposed both as a plain function (`assemble_and_solve`)
and as a differentiable primitive (`diff_solve`) whose backward rule runs
one adjoint solve of the same symmetric system and pushes -lambda u^T into
the per-element stiffness blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import autodiff as ad


class SingularSystemError(RuntimeError):
    """Raised when the reduced stiffness matrix cannot be factorized."""


@dataclass(frozen=True)
class StructuredGrid:
    """Regular nelx-by-nely grid of square elements with edge length h (mm).

    Elements and nodes are numbered row-major with x fastest: element
    (i, j) has index j*nelx + i and center ((i+0.5)h, (j+0.5)h); node
    (i, j) has index j*(nelx+1) + i with DOFs (2n, 2n+1) = (ux, uy).
    """

    nelx: int
    nely: int
    h: float

    @property
    def n_elems(self) -> int:
        return self.nelx * self.nely

    @property
    def n_nodes(self) -> int:
        return (self.nelx + 1) * (self.nely + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def elem_area(self) -> float:
        return self.h * self.h

    @property
    def width(self) -> float:
        return self.nelx * self.h

    @property
    def height(self) -> float:
        return self.nely * self.h

    def node(self, i: int, j: int) -> int:
        return j * (self.nelx + 1) + i

    def element_centers(self) -> np.ndarray:
        """(n_elems, 2) centers in mm, element order."""
        i = np.arange(self.nelx)
        j = np.arange(self.nely)
        cx = (i + 0.5) * self.h
        cy = (j + 0.5) * self.h
        xx, yy = np.meshgrid(cx, cy)  # rows j, cols i -> ravel is row-major
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def element_dofs(self) -> np.ndarray:
        """(n_elems, 8) global DOF indices, local nodes counterclockwise
        from the bottom-left corner."""
        i, j = np.meshgrid(np.arange(self.nelx), np.arange(self.nely))
        i, j = i.ravel(), j.ravel()
        n1 = j * (self.nelx + 1) + i
        n2 = n1 + 1
        n3 = n2 + (self.nelx + 1)
        n4 = n1 + (self.nelx + 1)
        edof = np.empty((self.n_elems, 8), dtype=np.int64)
        for k, n in enumerate((n1, n2, n3, n4)):
            edof[:, 2 * k] = 2 * n
            edof[:, 2 * k + 1] = 2 * n + 1
        return edof

    def element_of_points(self, points: np.ndarray) -> np.ndarray:
        """Element index containing each point, -1 outside the domain."""
        pts = np.atleast_2d(points)
        i = np.floor(pts[:, 0] / self.h).astype(np.int64)
        j = np.floor(pts[:, 1] / self.h).astype(np.int64)
        # points exactly on the far boundary belong to the last element
        i = np.where((pts[:, 0] == self.width) & (i == self.nelx), i - 1, i)
        j = np.where((pts[:, 1] == self.height) & (j == self.nely), j - 1, j)
        inside = (i >= 0) & (i < self.nelx) & (j >= 0) & (j < self.nely)
        return np.where(inside, j * self.nelx + i, -1)


def build_grid(nelx: int, nely: int, h: float) -> StructuredGrid:
    if nelx < 1 or nely < 1:
        raise ValueError(f"element counts must be >= 1, got ({nelx}, {nely})")
    if h <= 0:
        raise ValueError(f"element size must be positive, got {h}")
    return StructuredGrid(int(nelx), int(nely), float(h))


# --- element templates ----------------------------------------------------

_BASIS = (np.array([[1., 0, 0], [0, 0, 0], [0, 0, 0]]),
          np.array([[0., 0, 0], [0, 1, 0], [0, 0, 0]]),
          np.array([[0., 0, 0], [0, 0, 0], [0, 0, 1]]),
          np.array([[0., 1, 0], [1, 0, 0], [0, 0, 0]]),
          np.array([[0., 0, 1], [0, 0, 0], [1, 0, 0]]),
          np.array([[0., 0, 0], [0, 0, 1], [0, 1, 0]]))

_CORNERS = np.array([[-1., -1], [1, -1], [1, 1], [-1, 1]])


def _strain_matrix(xi: float, eta: float, h: float) -> np.ndarray:
    """3x8 strain-displacement matrix of the square Q4 at (xi, eta)."""
    dn_dxi = 0.25 * _CORNERS[:, 0] * (1.0 + _CORNERS[:, 1] * eta)
    dn_deta = 0.25 * _CORNERS[:, 1] * (1.0 + _CORNERS[:, 0] * xi)
    dn_dx = dn_dxi * 2.0 / h
    dn_dy = dn_deta * 2.0 / h
    b = np.zeros((3, 8))
    b[0, 0::2] = dn_dx
    b[1, 1::2] = dn_dy
    b[2, 0::2] = dn_dy
    b[2, 1::2] = dn_dx
    return b


@dataclass(frozen=True)
class TemplateStiffness:
    """Six 8x8 matrices K^i with K_e(D) = sum_i coeff_i(D) K^i.

    Coefficient order: (D11, D22, D33, D12, D13, D23). Each template is
    exactly symmetric; the set depends only on the element size.
    """

    k_hat: np.ndarray  # (6, 8, 8)
    h: float

    def flat(self) -> np.ndarray:
        return self.k_hat.reshape(6, 64)


def compute_templates(grid: StructuredGrid) -> TemplateStiffness:
    """Integrate the six templates with 2x2 Gauss quadrature (exact for
    bilinear shape functions and constant D)."""
    g = 1.0 / np.sqrt(3.0)
    det_j = (grid.h / 2.0) ** 2
    k_hat = np.zeros((6, 8, 8))
    for xi in (-g, g):
        for eta in (-g, g):
            b = _strain_matrix(xi, eta, grid.h)
            for i, basis in enumerate(_BASIS):
                k_hat[i] += b.T @ basis @ b * det_j
    k_hat = 0.5 * (k_hat + np.transpose(k_hat, (0, 2, 1)))
    return TemplateStiffness(k_hat, grid.h)


def element_stiffness(d: np.ndarray, templates: TemplateStiffness) -> np.ndarray:
    """Recombine one symmetric 3x3 tensor into the 8x8 element stiffness."""
    d = np.asarray(d, dtype=np.float64)
    asym = np.abs(d - d.T).max()
    scale = max(np.abs(d).max(), 1.0)
    if asym > 1e-9 * scale:
        raise ValueError(f"elasticity tensor is not symmetric (|D - D^T| = {asym:g})")
    coeffs = np.array([d[0, 0], d[1, 1], d[2, 2], d[0, 1], d[0, 2], d[1, 2]])
    return np.tensordot(coeffs, templates.k_hat, axes=(0, 0))


def recombine(coeffs, templates: TemplateStiffness):
    """Batched template recombination: (n, 6) coefficients -> (n, 8, 8).

    Linear, so the backward rule is the transposed contraction against
    the same templates.
    """
    cv = ad.value_of(coeffs)
    out = np.tensordot(cv, templates.k_hat, axes=(1, 0))
    if not isinstance(coeffs, ad.Var):
        return out

    def vjp(g):
        return (np.tensordot(g, templates.k_hat, axes=([1, 2], [1, 2])),)

    return coeffs.tape.record(out, [coeffs], vjp)


# --- boundary conditions --------------------------------------------------

@dataclass(frozen=True)
class BoundaryConditions:
    """Supports, loads and optional springs/probes for one problem.

    point_loads maps DOF index -> force (N); springs maps DOF -> grounded
    spring stiffness (N/mm) added to the diagonal. output_dof and
    output_sign define the signed probe displacement for mechanism
    objectives.
    """

    fixed_dofs: tuple[int, ...]
    point_loads: dict[int, float] = field(default_factory=dict)
    springs: dict[int, float] = field(default_factory=dict)
    input_dof: int | None = None
    output_dof: int | None = None
    output_sign: float = 1.0

    def validate(self, grid: StructuredGrid) -> None:
        n = grid.n_dofs
        for dof in self.fixed_dofs:
            if not 0 <= dof < n:
                raise ValueError(f"fixed dof {dof} out of range [0, {n})")
        for dof in list(self.point_loads) + list(self.springs):
            if not 0 <= dof < n:
                raise ValueError(f"dof {dof} out of range [0, {n})")
        if self.output_dof is not None and self.output_dof in self.fixed_dofs:
            raise ValueError(f"output dof {self.output_dof} is fixed")

    def load_vector(self, grid: StructuredGrid) -> np.ndarray:
        f = np.zeros(grid.n_dofs)
        for dof, val in self.point_loads.items():
            f[dof] += val
        return f


def uniform_edge_load(grid: StructuredGrid, edge: str, q: float,
                      axis: int) -> dict[int, float]:
    """Consistent nodal loads for a uniform line load q (N/mm) on one edge.

    Interior nodes receive q*h, corner nodes q*h/2. Returns a point_loads
    dict for the given axis (0 = x, 1 = y).
    """
    if edge == "top":
        nodes = [grid.node(i, grid.nely) for i in range(grid.nelx + 1)]
    elif edge == "bottom":
        nodes = [grid.node(i, 0) for i in range(grid.nelx + 1)]
    elif edge == "left":
        nodes = [grid.node(0, j) for j in range(grid.nely + 1)]
    elif edge == "right":
        nodes = [grid.node(grid.nelx, j) for j in range(grid.nely + 1)]
    else:
        raise ValueError(f"unknown edge {edge!r}")
    loads = {}
    for k, n in enumerate(nodes):
        w = 0.5 if k in (0, len(nodes) - 1) else 1.0
        loads[2 * n + axis] = q * grid.h * w
    return loads


# --- assembled sparse system ---------------------------------------------

class LinearSystem:
    """Precomputed sparsity machinery for repeated solves on one problem.

    Builds the free-DOF reduction, the COO -> CSC scatter map (fixed
    summation order, so assembly is bitwise deterministic) and the load
    vector once; per-call work is a value scatter plus one factorization.
    """

    def __init__(self, grid: StructuredGrid, bcs: BoundaryConditions):
        bcs.validate(grid)
        self.grid = grid
        self.bcs = bcs
        self.edof = grid.element_dofs()

        fixed = np.zeros(grid.n_dofs, dtype=bool)
        fixed[list(bcs.fixed_dofs)] = True
        self.free = np.flatnonzero(~fixed)
        self.n_free = self.free.size
        dof_map = -np.ones(grid.n_dofs, dtype=np.int64)
        dof_map[self.free] = np.arange(self.n_free)

        rows = np.repeat(self.edof, 8, axis=1).ravel()
        cols = np.tile(self.edof, (1, 8)).ravel()
        keep = (dof_map[rows] >= 0) & (dof_map[cols] >= 0)
        self._keep = np.flatnonzero(keep)
        rr = dof_map[rows[keep]]
        cc = dof_map[cols[keep]]

        spring_dofs = sorted(bcs.springs)
        self._spring_vals = np.array([bcs.springs[d] for d in spring_dofs])
        sd = dof_map[np.array(spring_dofs, dtype=np.int64)] if spring_dofs else \
            np.empty(0, dtype=np.int64)
        if np.any(sd < 0):
            raise ValueError("spring attached to a fixed dof")
        rr = np.concatenate([rr, sd])
        cc = np.concatenate([cc, sd])

        perm = np.lexsort((rr, cc))
        key = cc[perm] * self.n_free + rr[perm]
        starts = np.flatnonzero(np.r_[True, np.diff(key) != 0])
        self._perm = perm
        self._starts = starts
        self._indices = rr[perm][starts].astype(np.int32)
        counts = np.bincount(cc[perm][starts], minlength=self.n_free)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)

        self.f_full = bcs.load_vector(grid)
        self.f_free = self.f_full[self.free]

    def assemble(self, ke_stack: np.ndarray) -> sp.csc_matrix:
        """Reduced stiffness matrix from per-element (n, 8, 8) blocks."""
        vals = np.concatenate([ke_stack.ravel()[self._keep], self._spring_vals])
        data = np.add.reduceat(vals[self._perm], self._starts)
        return sp.csc_matrix((data, self._indices, self._indptr),
                             shape=(self.n_free, self.n_free))

    def _diagnose(self, k_red: sp.csc_matrix, lu, cause: str) -> str:
        diag = k_red.diagonal()
        bad = np.flatnonzero(diag <= 0.0)
        if bad.size:
            return (f"{cause}; diagonal {diag[bad[0]]:g} at free dof {bad[0]} "
                    f"(global dof {self.free[bad[0]]}): unconstrained mode "
                    f"or empty element")
        if lu is not None:
            pivots = lu.U.diagonal()
            nonpos = np.flatnonzero(pivots <= 0.0)
            if nonpos.size:
                return (f"{cause}; first non-PD pivot {pivots[nonpos[0]]:g} "
                        f"at reduced index {nonpos[0]}")
        return f"{cause}; min diagonal {diag.min():g}"

    def solve_reduced(self, k_red: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
        try:
            lu = spla.splu(k_red, permc_spec="MMD_AT_PLUS_A",
                           options=dict(SymmetricMode=True))
        except RuntimeError as err:
            raise SingularSystemError(
                self._diagnose(k_red, None, f"factorization failed ({err})")
            ) from err
        u = lu.solve(rhs)
        if not np.all(np.isfinite(u)):
            raise SingularSystemError(
                self._diagnose(k_red, lu, "solution contains non-finite entries"))
        return u

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        u = np.zeros(self.grid.n_dofs)
        u[self.free] = u_free
        return u


def diff_solve(ke_stack, system: LinearSystem):
    """Differentiable displacement solve u(K_e blocks) on the tape.

    Forward: assemble the reduced matrix, factorize, solve, scatter to the
    full DOF vector (zeros at supports). The assembled matrix is retained
    for the backward rule.

    Backward: one more solve of the same symmetric system, K lambda = gbar,
    then d(loss)/d(K_e[a, b]) = -lambda[edof_a] * u[edof_b] per element;
    the element-stiffness linearity carries this onward to the tensor
    coefficients without ever materializing a global matrix gradient.
    """
    kv = ad.value_of(ke_stack)
    k_red = system.assemble(kv)
    u_full = system.expand(system.solve_reduced(k_red, system.f_free))
    if not isinstance(ke_stack, ad.Var):
        return u_full
    tape = ke_stack.tape
    retained = {"k": k_red}

    def vjp(g):
        k = retained.pop("k", None)
        if k is None:
            raise RuntimeError("backward requested twice: retained system "
                               "was already consumed")
        lam = system.expand(system.solve_reduced(k, g[system.free]))
        tape.adjoint_solves += 1
        lam_e = lam[system.edof]
        u_e = u_full[system.edof]
        return (-np.einsum("ea,eb->eab", lam_e, u_e),)

    return tape.record(u_full, [ke_stack], vjp)


def assemble_and_solve(elem_tensors: np.ndarray, grid: StructuredGrid,
                       bcs: BoundaryConditions,
                       templates: TemplateStiffness | None = None) -> np.ndarray:
    """Plain (untracked) solve from per-element 3x3 elasticity tensors."""
    if templates is None:
        templates = compute_templates(grid)
    tensors = np.asarray(elem_tensors, dtype=np.float64)
    for e in range(tensors.shape[0]):
        asym = np.abs(tensors[e] - tensors[e].T).max()
        if asym > 1e-9 * max(np.abs(tensors[e]).max(), 1.0):
            raise ValueError(f"element {e}: asymmetric elasticity tensor")
    coeffs = np.stack([tensors[:, 0, 0], tensors[:, 1, 1], tensors[:, 2, 2],
                       tensors[:, 0, 1], tensors[:, 0, 2], tensors[:, 1, 2]],
                      axis=1)
    ke = np.tensordot(coeffs, templates.k_hat, axes=(1, 0))
    system = LinearSystem(grid, bcs)
    return system.expand(system.solve_reduced(system.assemble(ke), system.f_free))


def compliance(u, f):
    """External work f^T u; the self-adjoint stiffness objective."""
    return ad.dot(f, u) if isinstance(u, ad.Var) else ad.value_of(f) @ ad.value_of(u)


def output_displacement(u, output_dof: int, sign: float = 1.0):
    """Signed displacement at one probe DOF (mechanism objective input)."""
    return ad.mul(sign, ad.element(u, output_dof))
