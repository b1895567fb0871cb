"""Optimization loop: loss assembly, Adam updates, continuation, history.

One epoch = forward field at element centers -> effective tensors ->
template recombination -> sparse solve -> objective and volume
constraints -> penalty loss -> tape backward -> Adam step -> penalty and
SIMP continuation. The loop stops when the norm of the applied weight
update drops below the tolerance, or at the epoch cap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import fea, field, materials


@dataclass(frozen=True)
class ConstraintSpec:
    """Volume budgets. Standard mode uses (v_m, r_f): matrix volume
    fraction and fiber fraction *of the matrix budget*. Multi-material
    mode uses (mass_limit, v_f): net mass and fiber volume fraction of
    the whole domain."""

    v_m: float | None = None
    r_f: float | None = None
    mass_limit: float | None = None
    v_f: float | None = None

    def __post_init__(self):
        if self.mass_limit is not None or self.v_f is not None:
            if self.mass_limit is None or self.mass_limit <= 0:
                raise ValueError("multi-material mode needs mass_limit > 0")
            if self.v_f is None or not 0.0 <= self.v_f <= 1.0:
                raise ValueError("multi-material fiber fraction must be in [0, 1]")
        else:
            if self.v_m is None or not 0.0 < self.v_m <= 1.0:
                raise ValueError("matrix volume fraction must be in (0, 1]")
            if self.r_f is None or not 0.0 <= self.r_f <= 1.0:
                raise ValueError("fiber fraction must be in [0, 1]")

    @property
    def multi(self) -> bool:
        return self.mass_limit is not None


@dataclass(frozen=True)
class Schedules:
    """Penalty/continuation schedule and optimizer settings."""

    alpha0: float = 0.05
    dalpha: float = 0.05
    alpha_max: float = 100.0
    p0: float = 1.0
    dp: float = 0.02
    p_max: float = 8.0
    lr: float = 0.01
    max_epochs: int = 500
    dw_tol: float = 0.005


@dataclass(frozen=True)
class LossBreakdown:
    j: float
    j_scaled: float
    g_m: float
    g_f: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    breakdown: LossBreakdown
    alpha: float
    p: float
    dw_norm: float
    wall_ms: float
    phase_ms: dict[str, float] = dc_field(default_factory=dict)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class OptimState:
    """Mutable per-run state: continuation values and Adam moments."""

    alpha: float
    p: float
    j0: float
    adam: AdamState
    epoch: int = 0
    dw_norm: float = np.inf


def volume_constraints(rho_m, rho_f, v_e: float, v_m_star: float,
                       r_f_star: float):
    """Matrix and fiber volume constraint values (g_m, g_f).

    g_m = sum(rho_m v_e) / (V_m* sum(v_e)) - 1
    g_f = sum(rho_f v_e) / (r_f* V_m* sum(v_e)) - 1

    The fiber denominator holds r_f* V_m*: the fiber budget is a fraction
    of the matrix budget, not of the domain. A zero fiber budget with
    fiber present reports +inf rather than dividing by zero.
    """
    n = ad.value_of(rho_m).shape[0]
    total = v_e * n
    g_m = ad.add(ad.mul(ad.sum_(ad.mul(rho_m, v_e)), 1.0 / (v_m_star * total)), -1.0)
    fiber_budget = r_f_star * v_m_star * total
    if fiber_budget == 0.0:
        amount = float(ad.value_of(ad.sum_(ad.mul(rho_f, v_e))))
        return g_m, (0.0 if amount == 0.0 else np.inf)
    g_f = ad.add(ad.mul(ad.sum_(ad.mul(rho_f, v_e)), 1.0 / fiber_budget), -1.0)
    return g_m, g_f


def mass_constraint_multi(phases, v_e: float, mats: materials.MaterialSet,
                          mass_limit: float):
    """g = sum_k sum_e lambda_k rho_k(x_e) v_e / m* - 1 (void excluded)."""
    if mass_limit <= 0:
        raise ValueError(f"mass limit must be positive, got {mass_limit}")
    lam = mats.mass_densities()
    total = None
    for k, lk in enumerate(lam):
        part = ad.mul(ad.sum_(ad.take_columns(phases, k)), lk * v_e)
        total = part if total is None else ad.add(total, part)
    return ad.add(ad.mul(total, 1.0 / mass_limit), -1.0)


def fiber_constraint_multi(rho_f, v_e: float, n_elems: int, v_f_star: float):
    """g = sum(rho_f v_e) / (V_f* sum(v_e)) - 1."""
    budget = v_f_star * v_e * n_elems
    if budget == 0.0:
        amount = float(ad.value_of(ad.sum_(ad.mul(rho_f, v_e))))
        return 0.0 if amount == 0.0 else np.inf
    return ad.add(ad.mul(ad.sum_(ad.mul(rho_f, v_e)), 1.0 / budget), -1.0)


def penalty_loss(j, j0: float, g_m, g_f, alpha: float):
    """L = J/J0 + alpha (g_m^2 + g_f^2); squares penalize both over- and
    under-use of each budget. Returns the loss Var and a float breakdown."""
    if j0 <= 0:
        raise ValueError(f"objective scale must be positive, got {j0}")
    j_scaled = ad.mul(j, 1.0 / j0)
    penalty = ad.add(ad.mul(g_m, g_m), ad.mul(g_f, g_f))
    total = ad.add(j_scaled, ad.mul(alpha, penalty))
    breakdown = LossBreakdown(j=float(ad.value_of(j)),
                              j_scaled=float(ad.value_of(j_scaled)),
                              g_m=float(ad.value_of(g_m)),
                              g_f=float(ad.value_of(g_f)),
                              total=float(ad.value_of(total)))
    return total, breakdown


def adam_step(w: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction; returns (w_new, |delta w|)."""
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise ValueError(f"non-finite gradient at component {bad}")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    delta = -lr * m_hat / (np.sqrt(v_hat) + eps)
    return w + delta, float(np.linalg.norm(delta))


def continuation_update(state: OptimState, sched: Schedules) -> OptimState:
    """Clamped per-epoch increments of the penalty weight and SIMP power."""
    state.alpha = min(sched.alpha_max, state.alpha + sched.dalpha)
    state.p = min(sched.p_max, state.p + sched.dp)
    return state


@dataclass
class Problem:
    """Everything `run` needs for one optimization."""

    grid: fea.StructuredGrid
    bcs: fea.BoundaryConditions
    constraints: ConstraintSpec
    network: field.NetworkConfig
    schedule: Schedules = dc_field(default_factory=Schedules)
    matrix: materials.IsotropicMatrix = dc_field(
        default_factory=materials.IsotropicMatrix)
    fiber: materials.OrthotropicFiber = dc_field(
        default_factory=materials.OrthotropicFiber)
    material_set: materials.MaterialSet | None = None
    objective: str = "compliance"  # or "mechanism"
    seed: int = 0
    fix_rho_m: float | None = None
    fix_rho_f: float | None = None
    floor_scale: float = 1e-9
    solid_elements: np.ndarray | None = None  # non-design, forced rho_m = 1

    def __post_init__(self):
        if self.objective not in ("compliance", "mechanism"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "mechanism" and self.bcs.output_dof is None:
            raise ValueError("mechanism objective needs an output dof")
        if self.constraints.multi != (self.material_set is not None):
            raise ValueError("multi-material constraints require a MaterialSet "
                             "and vice versa")


@dataclass
class RunResult:
    weights: field.MlpWeights
    embedding: field.FourierEmbedding
    history: list[EpochRecord]
    converged: bool
    j0: float
    phase_seconds: dict[str, float]

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]


def _initial_objective(problem: Problem, system: fea.LinearSystem,
                       templates: fea.TemplateStiffness) -> float:
    """Objective of the uniform design (densities at their budgets),
    computed once for loss scaling and never refreshed."""
    grid, cons, sched = problem.grid, problem.constraints, problem.schedule
    if cons.multi:
        mats = problem.material_set
        rho = np.full(mats.n_phases, 1.0 / mats.n_phases)
        d = materials.effective_tensor_multi(rho, cons.v_f, 0.0, mats, sched.p0)
    else:
        d_m = materials.matrix_tensor(problem.matrix)
        d_f = materials.fiber_tensor(problem.fiber)
        d = materials.effective_tensor(cons.v_m, cons.r_f, 0.0, d_m, d_f,
                                       sched.p0, problem.floor_scale)
    tensors = np.broadcast_to(d, (grid.n_elems, 3, 3))
    u = fea.assemble_and_solve(tensors, grid, problem.bcs, templates)
    if problem.objective == "mechanism":
        j = -fea.output_displacement(u, problem.bcs.output_dof,
                                     problem.bcs.output_sign)
    else:
        j = fea.compliance(u, system.f_full)
    return max(abs(float(j)), 1e-12)


def run(problem: Problem, max_epochs: int | None = None) -> RunResult:
    """Train the field network on one problem (deterministic per seed)."""
    grid, sched, cons = problem.grid, problem.schedule, problem.constraints
    net = problem.network
    epochs = sched.max_epochs if max_epochs is None else max_epochs

    rng = np.random.default_rng(problem.seed)
    embedding = field.init_embedding(net, grid.h, rng)
    weights = field.init_weights(net, rng)
    centers = grid.element_centers()
    center_feats = embedding.features(centers)
    templates = fea.compute_templates(grid)
    system = fea.LinearSystem(grid, problem.bcs)
    j0 = _initial_objective(problem, system, templates)

    if not cons.multi:
        d_m0 = materials.matrix_tensor(problem.matrix)
        d_f0 = materials.fiber_tensor(problem.fiber)
    solid_mask = None
    if problem.solid_elements is not None and problem.solid_elements.size:
        solid_mask = np.zeros(grid.n_elems)
        solid_mask[problem.solid_elements] = 1.0

    flat = weights.flatten()
    state = OptimState(alpha=sched.alpha0, p=sched.p0, j0=j0,
                       adam=AdamState(np.zeros_like(flat), np.zeros_like(flat)))
    history: list[EpochRecord] = []
    phase_totals = {k: 0.0 for k in
                    ("forward", "assembly", "solve_loss", "backward", "step")}
    converged = False

    for epoch in range(epochs):
        state.epoch = epoch
        alpha_used, p_used = state.alpha, state.p
        t0 = time.perf_counter()
        try:
            tape = ad.Tape()
            params = field.leaf_params(tape, weights)
            batch = field.forward(params, embedding, net, centers,
                                  features=center_feats)
            rho_m = batch.rho_m if problem.fix_rho_m is None else \
                np.full(grid.n_elems, problem.fix_rho_m)
            rho_f = batch.rho_f if problem.fix_rho_f is None else \
                np.full(grid.n_elems, problem.fix_rho_f)
            if solid_mask is not None:
                rho_m = ad.add(ad.mul(rho_m, 1.0 - solid_mask), solid_mask)
            t1 = time.perf_counter()

            if cons.multi:
                coeffs = materials.effective_coeffs_multi(
                    batch.phases, rho_f, batch.theta, problem.material_set,
                    state.p)
            else:
                coeffs = materials.effective_coeffs(
                    rho_m, rho_f, batch.theta, d_m0, d_f0, state.p,
                    problem.floor_scale)
            ke = fea.recombine(coeffs, templates)
            t2 = time.perf_counter()

            u = fea.diff_solve(ke, system)
            if problem.objective == "mechanism":
                j = ad.neg(fea.output_displacement(u, problem.bcs.output_dof,
                                                   problem.bcs.output_sign))
            else:
                j = fea.compliance(u, system.f_full)
            if cons.multi:
                g_m = mass_constraint_multi(batch.phases, grid.elem_area,
                                            problem.material_set,
                                            cons.mass_limit)
                g_f = fiber_constraint_multi(rho_f, grid.elem_area,
                                             grid.n_elems, cons.v_f)
            else:
                g_m, g_f = volume_constraints(rho_m, rho_f, grid.elem_area,
                                              cons.v_m, cons.r_f)
            total, breakdown = penalty_loss(j, j0, g_m, g_f, state.alpha)
            if not np.isfinite(breakdown.total):
                raise FloatingPointError(f"loss is not finite: {breakdown}")
            t3 = time.perf_counter()

            tape.backward(total)
            t4 = time.perf_counter()

            grad = field.grads_flat(net, params)
            flat, dw_norm = adam_step(flat, grad, state.adam, sched.lr)
            weights = field.MlpWeights.from_flat(net, flat)
            continuation_update(state, sched)
            t5 = time.perf_counter()
        except (fea.SingularSystemError, FloatingPointError, ValueError) as err:
            raise RuntimeError(f"optimization aborted at epoch {epoch}: {err}") \
                from err

        state.dw_norm = dw_norm
        phases = {"forward": t1 - t0, "assembly": t2 - t1,
                  "solve_loss": t3 - t2, "backward": t4 - t3, "step": t5 - t4}
        for k, v in phases.items():
            phase_totals[k] += v
        history.append(EpochRecord(
            epoch=epoch, breakdown=breakdown, alpha=alpha_used, p=p_used,
            dw_norm=dw_norm, wall_ms=(t5 - t0) * 1e3,
            phase_ms={k: v * 1e3 for k, v in phases.items()}))
        if dw_norm < sched.dw_tol:
            converged = True
            break

    return RunResult(weights=weights, embedding=embedding, history=history,
                     converged=converged, j0=j0, phase_seconds=phase_totals)
