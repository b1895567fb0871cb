"""Plane-stress constitutive models for the fiber-reinforced composite.

Provides the isotropic matrix tensor, the orthotropic fiber tensor (fiber
axis along x), in-plane rotation of the fiber tensor, and the penalized
effective tensor blending both phases. Plain-array entry points serve
single tensors for tests and initialization; the ``*_coeffs`` functions
run the same model vectorized over element samples on an autodiff tape.

Voigt convention: (sigma_11, sigma_22, sigma_12) with engineering shear.
Plane stress throughout; a plane-strain variant would only swap
`matrix_tensor` / `fiber_tensor`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class IsotropicMatrix:
    """Isotropic base matrix: Young's modulus E (GPa), Poisson's ratio nu."""

    E: float = 1.0
    nu: float = 0.3

    def __post_init__(self):
        if self.E <= 0:
            raise ValueError(f"matrix modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"matrix Poisson ratio out of (-1, 0.5): {self.nu}")


@dataclass(frozen=True)
class OrthotropicFiber:
    """Orthotropic fiber phase, axes aligned with x when unrotated.

    Parameters
    ----------
    E_par, E_perp : float
        Young's moduli along and across the fiber (GPa).
    nu : float
        Major Poisson ratio nu_12.
    G : float
        In-plane shear modulus (GPa), independent of the Young's moduli.
    """

    E_par: float = 4.0
    E_perp: float = 2.0
    nu: float = 0.3
    G: float = 0.7

    def __post_init__(self):
        if min(self.E_par, self.E_perp, self.G) <= 0:
            raise ValueError("fiber moduli must be positive")
        nu21 = self.nu * self.E_perp / self.E_par
        if 1.0 - self.nu * nu21 <= 0:
            raise ValueError(
                f"unstable orthotropic data: 1 - nu12*nu21 = {1.0 - self.nu * nu21}")


def matrix_tensor(m: IsotropicMatrix) -> np.ndarray:
    """Isotropic plane-stress elasticity tensor, 3x3."""
    c = m.E / (1.0 - m.nu ** 2)
    return c * np.array([[1.0, m.nu, 0.0],
                         [m.nu, 1.0, 0.0],
                         [0.0, 0.0, (1.0 - m.nu) / 2.0]])


def fiber_tensor(f: OrthotropicFiber) -> np.ndarray:
    """Orthotropic plane-stress tensor with the fiber along the x axis."""
    nu21 = f.nu * f.E_perp / f.E_par
    k = 1.0 / (1.0 - f.nu * nu21)
    return np.array([[k * f.E_par, k * f.nu * f.E_perp, 0.0],
                     [k * f.nu * f.E_perp, k * f.E_perp, 0.0],
                     [0.0, 0.0, f.G]])


def rotation_matrices(theta):
    """Stress and strain transformation matrices T1, T2 for angle theta.

    Accepts a scalar or an array of angles; returns matching (..., 3, 3)
    arrays. With m = cos(theta), n = sin(theta):

        T1 = [[ m^2, n^2,  2mn ],        T2 = [[ m^2,  n^2,  mn  ],
              [ n^2, m^2, -2mn ],              [ n^2,  m^2, -mn  ],
              [ -mn, mn, m^2-n^2]]             [-2mn,  2mn, m^2-n^2]]

    T1 maps global stress to the material frame, T2 engineering strain;
    T2(theta) = T1(-theta)^T and det(T1) = det(T2) = 1, so the rotated
    stiffness T1(-theta) D T2(theta) is a congruence transform of D.
    """
    theta = np.asarray(theta, dtype=np.float64)
    m, n = np.cos(theta), np.sin(theta)
    m2, n2, mn = m * m, n * n, m * n
    z = m2 - n2
    t1 = np.stack([np.stack([m2, n2, 2.0 * mn], axis=-1),
                   np.stack([n2, m2, -2.0 * mn], axis=-1),
                   np.stack([-mn, mn, z], axis=-1)], axis=-2)
    t2 = np.stack([np.stack([m2, n2, mn], axis=-1),
                   np.stack([n2, m2, -mn], axis=-1),
                   np.stack([-2.0 * mn, 2.0 * mn, z], axis=-1)], axis=-2)
    return t1, t2


def rotate_fiber_tensor(d_fiber0: np.ndarray, theta) -> np.ndarray:
    """Fiber tensor at orientation theta: T1(-theta) @ D_f0 @ T2(theta).

    T1(theta)^-1 equals T1(-theta) in closed form, so no inverse is taken.
    The result is pi-periodic in theta and symmetric for symmetric input.
    """
    t1_inv, _ = rotation_matrices(-np.asarray(theta, dtype=np.float64))
    _, t2 = rotation_matrices(theta)
    return t1_inv @ d_fiber0 @ t2


def effective_tensor(rho_m, rho_f, theta, d_matrix0: np.ndarray,
                     d_fiber0: np.ndarray, p: float,
                     floor_scale: float = 0.0) -> np.ndarray:
    """Penalized effective tensor at one point (plain arrays, no tape).

    rho_m^p * (rho_f * D_f(theta) + (1 - rho_f) * D_m0), optionally
    augmented by floor_scale * D_m0 so the assembled stiffness stays
    positive definite as rho_m -> 0. Only the matrix density is
    penalized; the fiber density enters linearly.
    """
    d_f = rotate_fiber_tensor(d_fiber0, theta)
    d = rho_m ** p * (rho_f * d_f + (1.0 - rho_f) * d_matrix0)
    if floor_scale:
        d = d + floor_scale * d_matrix0
    return d


@dataclass(frozen=True)
class MatrixPhase:
    """One candidate matrix material for multi-material designs."""

    E: float
    nu: float = 0.3
    mass_density: float = 1.0  # lambda_k

    def __post_init__(self):
        if self.mass_density <= 0:
            raise ValueError("mass density must be positive")
        IsotropicMatrix(self.E, self.nu)  # reuse its validation


@dataclass(frozen=True)
class MaterialSet:
    """Multi-material palette: phase 0 is the fiber-bearing matrix.

    The void pseudo-phase is appended implicitly (modulus and mass density
    `void_modulus` / `void_mass`); phase densities produced by the network
    are ordered [m_1, ..., m_n, void].
    """

    phases: tuple[MatrixPhase, ...]
    fiber: OrthotropicFiber = field(default_factory=OrthotropicFiber)
    void_modulus: float = 1e-9
    void_mass: float = 1e-9

    def __post_init__(self):
        if not self.phases:
            raise ValueError("need at least one matrix material")

    @property
    def n_phases(self) -> int:
        """Softmax width: matrix materials plus the void phase."""
        return len(self.phases) + 1

    def phase_tensors(self) -> np.ndarray:
        """(n_phases, 3, 3) stack of unpenalized tensors, void last."""
        mats = [matrix_tensor(IsotropicMatrix(ph.E, ph.nu)) for ph in self.phases]
        mats.append(matrix_tensor(IsotropicMatrix(self.void_modulus,
                                                  self.phases[0].nu)))
        return np.stack(mats)

    def mass_densities(self) -> np.ndarray:
        """(n,) mass densities of the matrix materials (void excluded)."""
        return np.array([ph.mass_density for ph in self.phases])


def effective_tensor_multi(phase_densities, rho_f, theta, mats: MaterialSet,
                           p: float) -> np.ndarray:
    """Multi-material effective tensor at one point (plain arrays).

    phase_densities holds [rho_m1, ..., rho_mn, rho_void] and must sum
    to 1 within 1e-6. The fiber contributes only through phase 0.
    """
    rho = np.asarray(phase_densities, dtype=np.float64)
    if abs(rho.sum() - 1.0) > 1e-6:
        raise ValueError(f"phase densities must sum to 1, got {rho.sum()!r}")
    tensors = mats.phase_tensors()
    d_f = rotate_fiber_tensor(fiber_tensor(mats.fiber), theta)
    d = rho[0] ** p * (rho_f * d_f + (1.0 - rho_f) * tensors[0])
    for k in range(1, mats.n_phases):
        d = d + rho[k] ** p * tensors[k]
    return d


# --- tape-based vectorized model (optimization path) ---------------------

def _rotated_fiber_stack(theta, d_fiber0: np.ndarray):
    """T1(-theta) @ D_f0 @ T2(theta) over a batch of angles, on tape."""
    m = ad.cos(theta)
    n = ad.sin(theta)
    m2 = ad.mul(m, m)
    n2 = ad.mul(n, n)
    mn = ad.mul(m, n)
    z = ad.add(m2, ad.neg(n2))
    two_mn = ad.mul(2.0, mn)
    neg_mn = ad.neg(mn)
    # T1(-theta): negate odd powers of n
    t1_inv = ad.stack33([m2, n2, ad.neg(two_mn),
                         n2, m2, two_mn,
                         mn, neg_mn, z])
    t2 = ad.stack33([m2, n2, mn,
                     n2, m2, neg_mn,
                     ad.neg(two_mn), two_mn, z])
    return ad.bmm33(ad.bmm33(t1_inv, d_fiber0), t2)


def effective_coeffs(rho_m, rho_f, theta, d_matrix0: np.ndarray,
                     d_fiber0: np.ndarray, p: float,
                     floor_scale: float = 1e-9):
    """Voigt coefficient columns (n, 6) of the effective tensor per element.

    Tape-recorded equivalent of `effective_tensor` over element batches;
    columns are ordered (D11, D22, D33, D12, D13, D23) to match the
    template stiffness recombination.
    """
    d_f = _rotated_fiber_stack(theta, d_fiber0)
    blend = ad.add(ad.scale_rows(d_f, rho_f),
                   ad.scale_rows(np.broadcast_to(d_matrix0, d_f.shape),
                                 ad.add(1.0, ad.neg(rho_f))))
    d = ad.scale_rows(blend, ad.power(rho_m, p))
    if floor_scale:
        d = ad.add(d, floor_scale * d_matrix0)
    return ad.gather_voigt(d)


def effective_coeffs_multi(phase_densities, rho_f, theta, mats: MaterialSet,
                           p: float):
    """Multi-material version of `effective_coeffs`.

    phase_densities is an (n, n_phases) stack (softmax output, void last);
    every phase including void is penalized with the same exponent.
    """
    tensors = mats.phase_tensors()
    d_f = _rotated_fiber_stack(theta, fiber_tensor(mats.fiber))
    rho1p = ad.power(ad.take_columns(phase_densities, 0), p)
    blend = ad.add(ad.scale_rows(d_f, rho_f),
                   ad.scale_rows(np.broadcast_to(tensors[0], d_f.shape),
                                 ad.add(1.0, ad.neg(rho_f))))
    d = ad.scale_rows(blend, rho1p)
    for k in range(1, mats.n_phases):
        rk = ad.power(ad.take_columns(phase_densities, k), p)
        d = ad.add(d, ad.scale_rows(np.broadcast_to(tensors[k], d_f.shape), rk))
    return ad.gather_voigt(d)
