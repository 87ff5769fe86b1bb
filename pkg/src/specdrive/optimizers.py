"""Iterative maximization of the control functional.

Every scheme here shares one skeleton: propagate the state forward under
the current field, propagate a costate backward from a target-derived
boundary condition, and combine the two trajectories into a better field.
The schemes differ in the update rule:

* naive        -- replace the field by the Euler-Lagrange field outright
* relaxation   -- mix the EL field convexly with the current one, halving
                  the mixing parameter until the functional improves
* gradient     -- step along the functional gradient with a line search
* quasi-newton -- BFGS-type direction on the reduced field vector, seeded
                  by the diagonal penalty Hessian
* krotov       -- immediate update: the field is refreshed at every
                  quadrature node while the sweep is still running
* krotov-filtered -- the immediate-update iteration interrupted by a
                  spectral projection of each updated field
* degani       -- immediate update against a time-domain penalty kernel

All runs produce an OptimizationTrace whose rows carry the functional
breakdown, the mixing parameter, the cumulative propagation count and the
relative field change, so convergence curves can be reconstructed exactly.
"""

import math
from dataclasses import dataclass

import numpy as np

from .spectral import RealSignal, Spectrum, dct1, endpoint_factors
from .system import apply_mu
from .dynamics import (
    InstabilityError,
    PropagationError,
    StepSolver,
    Trajectory,
    HGSource,
    TDTargetSource,
    default_propagator_config,
    propagate_backward,
    propagate_forward,
    state_map,
    terminal_chi,
    hg_source_signal,
    _EPS,
    _barycentric_interp,
    _sample_interp,
    _should_store,
    _steps_for,
)
from .functionals import (
    ControlField,
    FunctionalBreakdown,
    build_beta_kernel,
    evaluate,
    field_from_el_freq,
    field_from_el_time,
    gradient_freq,
    gradient_time,
    j_bound,
    j_max_final,
    prepare_context,
)

CONVERGED = "converged"
BUDGET_EXHAUSTED = "budget-exhausted"
K_UNDERFLOW = "K-underflow"
INSTABILITY = "instability-detected"

_METHODS = ("naive", "relaxation", "gradient", "quasi-newton", "krotov",
            "krotov-filtered", "degani")

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs shared by all schemes; fields a method ignores are harmless."""

    method: str = "relaxation"
    k_init: float = 1.0
    tau: float = 1e-3
    max_iterations: int = 500
    k_floor: float = 1e-10
    k_max: float = 2.0
    ls_refine: int = 6
    budget: int = None

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 < self.k_init <= 1.0:
            raise ValueError("k_init must lie in (0, 1]")
        if not self.tau > 0.0:
            raise ValueError("tau must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0.0 < self.k_floor <= self.k_init:
            raise ValueError("k_floor must lie in (0, k_init]")
        if self.k_max < self.k_init:
            raise ValueError("k_max must be at least k_init")
        if self.ls_refine < 0:
            raise ValueError("ls_refine must be nonnegative")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be at least 1 iteration")


def _coerce_field(guess, grid, formulation):
    if isinstance(guess, ControlField):
        g = guess.grid
        if g.n_t != grid.n_t or abs(g.T - grid.T) > 1e-12 * grid.T:
            raise ValueError("guess grid does not match the problem grid")
        return guess
    if isinstance(guess, RealSignal):
        return _coerce_field(ControlField.from_time(guess.grid, guess.values),
                             grid, formulation)
    if isinstance(guess, Spectrum):
        return _coerce_field(
            ControlField.from_spectrum(guess.grid.time_grid(), guess.values),
            grid, formulation)
    arr = np.asarray(guess, dtype=float)
    if arr.ndim == 0:
        return ControlField.from_time(grid, np.full(grid.n_t, float(arr)))
    if arr.shape != (grid.n_t,):
        raise ValueError("guess samples do not match the grid")
    if formulation == "frequency":
        return ControlField.from_spectrum(grid, arr)
    return ControlField.from_time(grid, arr)


@dataclass(frozen=True)
class Problem:
    """One optimization task: system, grid, functional, start state, guess.

    guess may be a ControlField, RealSignal, Spectrum, scalar, or a sample
    vector interpreted in the formulation's native representation.  A
    propagator config of None selects the default sized to the optimizer
    tolerance at run time.
    """

    system: object
    grid: object
    functional: object
    psi0: object
    guess: object
    propagator: object = None

    def __post_init__(self):
        psi0 = np.asarray(self.psi0, dtype=complex)
        if psi0.shape != (self.system.dim,):
            raise ValueError("psi0 does not match the system dimension")
        object.__setattr__(self, "psi0", psi0)
        object.__setattr__(self, "guess", _coerce_field(
            self.guess, self.grid, self.functional.formulation))

    def propagator_for(self, config):
        if self.propagator is not None:
            return self.propagator
        return default_propagator_config(self.system, self.grid,
                                         tau=config.tau)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    breakdown: FunctionalBreakdown
    k: float
    propagations: int
    field_change: float


@dataclass
class OptimizationTrace:
    """Accepted iterates of one run.

    rows[0] echoes the guess; field/trajectory/breakdown describe the
    field the run settled on (for the filtered scheme that is the best
    iterate seen, which may precede the last row).
    """

    method: str
    status: str
    rows: list
    field: object
    trajectory: object
    breakdown: object

    @property
    def propagations(self):
        return self.rows[-1].propagations if self.rows else 0

    def js(self):
        return np.array([row.breakdown.j for row in self.rows])

    @property
    def j_monotone(self):
        js = self.js()
        slack = 1e-12 * np.maximum(1.0, np.abs(js[:-1]))
        return bool(np.all(np.diff(js) >= -slack))

    def j_at_propagations(self, p):
        """J of the last accepted iterate within p propagations."""
        best = None
        for row in self.rows:
            if row.propagations <= p:
                best = row.breakdown.j
        return best


def _native_vectors(field_old, field_new, formulation):
    if hasattr(field_old, "time_values"):
        if formulation == "frequency":
            return field_old.spectrum().values, field_new.spectrum().values
        return field_old.time_values(), field_new.time_values()
    return np.asarray(field_old, dtype=float), np.asarray(field_new, dtype=float)


def _change_ratio(vec_old, vec_new):
    num = float(np.linalg.norm(vec_new - vec_old))
    den = float(np.linalg.norm(vec_new))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def convergence_check(field_old, field_new, formulation, tau):
    """True when the relative field change in the formulation's native
    representation falls below tau.  A new field of zero norm converges
    only if the old one was identically zero too."""
    if not tau > 0.0:
        raise ValueError("tau must be positive")
    if hasattr(field_old, "grid") and hasattr(field_new, "grid"):
        if field_old.grid.n_t != field_new.grid.n_t:
            raise ValueError("fields live on different grids")
    a, b = _native_vectors(field_old, field_new, formulation)
    return _change_ratio(a, b) < tau


def _rel_change(field_old, field_new, formulation):
    a, b = _native_vectors(field_old, field_new, formulation)
    return _change_ratio(a, b)


def _zero_signal(times):
    return np.zeros(np.shape(times))


def _chi_setup(ctx, traj):
    """Costate boundary condition and backward source for the target."""
    cfg = ctx.config
    psi_t = traj.final_state
    chi_t = terminal_chi(cfg.kappa, ctx.system, psi_t)
    if cfg.target == "final":
        chi_t = chi_t + state_map(ctx.o_full)(psi_t[None, :])[0]
        source = None
        if ctx.p_f is not None:
            source = HGSource(traj, _zero_signal, ctx.o_a, ctx.p_f)
        return chi_t, source
    if cfg.target == "spectral":
        signal = hg_source_signal(traj, ctx.o_a, ctx.f_o)
        return chi_t, HGSource(traj, signal, ctx.o_a, ctx.p_f)
    if ctx.p_f is not None:
        raise ValueError("state restriction is incompatible with a "
                         "time-dependent target")
    return chi_t, TDTargetSource(cfg.weight, cfg.op_of_t, traj)


def _forward_eval(problem, ctx, prop, field):
    traj = propagate_forward(problem.system, field, problem.psi0, prop,
                             grid=problem.grid, observables=ctx.observables)
    return traj, evaluate(ctx, traj, field)


def _el_field(ctx, traj, chi_traj):
    if ctx.config.formulation == "frequency":
        return field_from_el_freq(ctx.system, traj, chi_traj, ctx.f_eps)
    return field_from_el_time(ctx.system, traj, chi_traj, ctx.config.alpha)


def _emit(rows, on_row, row):
    rows.append(row)
    if on_row is not None:
        on_row(row)


def _finish(method, status, rows, field, traj, breakdown):
    return OptimizationTrace(method, status, rows, field, traj, breakdown)


# ---------------------------------------------------------------------------
# naive replacement and relaxation


def _relaxation_engine(problem, config, on_row, method, accept):
    ctx = prepare_context(problem.system, problem.grid, problem.functional)
    formulation = ctx.config.formulation
    prop = problem.propagator_for(config)
    field = problem.guess
    rows = []
    # the naive scheme replaces the field outright, i.e. mixes with K = 1
    k = 1.0 if not accept else config.k_init
    try:
        traj, br = _forward_eval(problem, ctx, prop, field)
    except (InstabilityError, PropagationError):
        return _finish(method, INSTABILITY, rows, field, None, None)
    props = 1
    _emit(rows, on_row, TraceRow(0, br, k, props, math.nan))

    limit = config.budget if config.budget is not None else config.max_iterations
    status = BUDGET_EXHAUSTED
    for it in range(1, limit + 1):
        try:
            chi_t, source = _chi_setup(ctx, traj)
            chi_traj = propagate_backward(problem.system, field, source,
                                          chi_t, prop, grid=problem.grid)
        except (InstabilityError, PropagationError):
            props += 1
            status = INSTABILITY
            break
        props += 1
        el = _el_field(ctx, traj, chi_traj)

        if not accept:
            trial = el
            props += 1
            try:
                traj_t, br_t = _forward_eval(problem, ctx, prop, trial)
            except (InstabilityError, PropagationError):
                status = INSTABILITY
                break
        else:
            stationary = False
            while True:
                trial = el.blended_with(field, k)
                props += 1
                try:
                    traj_t, br_t = _forward_eval(problem, ctx, prop, trial)
                    j_t = br_t.j
                except (InstabilityError, PropagationError):
                    traj_t, br_t, j_t = None, None, -math.inf
                if j_t > br.j:
                    break
                # a rejected step that moves nothing and loses nothing
                # means the field already solves its own update equation
                if (math.isfinite(j_t)
                        and j_t >= br.j - 1e-12 * max(1.0, abs(br.j))
                        and convergence_check(field, trial, formulation,
                                              config.tau)):
                    stationary = True
                    break
                k *= 0.5
                if k < config.k_floor:
                    return _finish(method, K_UNDERFLOW, rows, field, traj, br)
            if stationary:
                status = CONVERGED
                break

        change = _rel_change(field, trial, formulation)
        _emit(rows, on_row, TraceRow(it, br_t, k, props, change))
        prev = field
        field, traj, br = trial, traj_t, br_t
        if config.budget is None and convergence_check(prev, field,
                                                       formulation, config.tau):
            status = CONVERGED
            break
    return _finish(method, status, rows, field, traj, br)


def optimize_naive(problem, config=None, on_row=None):
    """Replace the field by the Euler-Lagrange field each iteration.

    No acceptance test is applied, so the run converges only when the
    update map is already contracting near the guess; divergence shows up
    as a budget-exhausted or instability status, not an exception.
    """
    config = config or OptimizerConfig(method="naive")
    return _relaxation_engine(problem, config, on_row, "naive", accept=False)


def optimize_relaxation(problem, config=None, on_row=None):
    """Convex mixing of the Euler-Lagrange field with the current one.

    The trial field is K*el + (1-K)*current in the formulation's native
    representation; K halves until the functional strictly improves and is
    never raised again.
    """
    config = config or OptimizerConfig(method="relaxation")
    return _relaxation_engine(problem, config, on_row, "relaxation",
                              accept=True)


# ---------------------------------------------------------------------------
# immediate-update sweeps (Krotov and variants)


def _alpha_at_nodes(alpha, grid, n_steps, s_nodes):
    """Penalty weight at the internal node times: (array, None) for sampled
    alpha, (None, scalar) for a constant."""
    a = np.asarray(alpha, dtype=float)
    if a.ndim == 0:
        if not a > 0.0:
            raise ValueError("alpha must be positive")
        return None, float(a)
    if a.shape != (grid.n_t,):
        raise ValueError("alpha samples do not match the grid")
    if not np.all(a > 0.0):
        raise ValueError("alpha must be positive everywhere")
    h = grid.T / n_steps
    times = ((np.arange(n_steps)[:, None] + s_nodes[None, :]) * h).ravel()
    vals = _sample_interp(a, grid, times).reshape(n_steps, len(s_nodes))
    return vals, None


def _immediate_sweep(system, grid, prop, u_start, partner_mu, direction,
                     alpha_nodes, alpha_scalar, source=None, guard=True):
    """Propagate u while the field is recomputed at every node.

    partner_mu(i) supplies the dipole-applied partner states for forward
    step i in absolute order; the field at each node is
    -Im<chi|mu|psi>/alpha with u playing whichever role the direction
    dictates (+1: u is psi, -1: u is chi).  Returns (Trajectory, eps_nodes)
    in absolute order.
    """
    m, n_steps = _steps_for(prop, grid)
    rule = prop.rule
    n_c = rule.n_c
    s_nodes = 0.5 * (1.0 - rule.y)
    h = grid.T / n_steps
    zeta_step = max(prop.zeta / n_steps, 100.0 * _EPS)
    dt = direction * h
    q = dt * rule.qmat
    dim = len(u_start)
    store = _should_store(prop, n_steps, n_c, dim)
    boundaries = np.empty((n_steps + 1, dim), dtype=complex)
    norms = np.empty(n_steps + 1)
    eps_nodes = np.empty((n_steps, n_c))
    nodes_out = np.empty((n_steps, n_c, dim), dtype=complex) if store else None
    h_apply = system.h_apply
    f_sign = float(direction)

    u = np.array(u_start, dtype=complex)
    ref = float(np.linalg.norm(u))
    guard = guard and ref > 0.0
    if direction > 0:
        boundaries[0] = u
        norms[0] = ref
    else:
        boundaries[n_steps] = u
        norms[n_steps] = ref

    for k in range(n_steps):
        i = k if direction > 0 else n_steps - 1 - k
        mu_part = partner_mu(i)
        a_nodes = alpha_scalar if alpha_nodes is None else alpha_nodes[i]
        if direction < 0:
            mu_part = mu_part[::-1]
            if alpha_nodes is not None:
                a_nodes = a_nodes[::-1]
        src = None
        if source is not None and direction < 0:
            src = -source.step_values(i, 1.0 - s_nodes)

        u0 = u
        un = np.repeat(u0[None, :], n_c, axis=0)
        end_prev = u0
        ok = False
        for _ in range(prop.max_picard):
            f_vals = f_sign * np.einsum(
                "ij,ij->i", un.conj(), mu_part).imag / a_nodes
            rhs = h_apply(un, f_vals)
            rhs *= -1j
            if src is not None:
                rhs += src
            un = q @ rhs
            un += u0
            end = un[-1]
            delta = float(np.linalg.norm(end - end_prev))
            end_prev = end
            if not math.isfinite(delta):
                break
            if delta <= zeta_step * max(float(np.linalg.norm(end)), 1e-300):
                ok = True
                break
        if not ok:
            raise PropagationError(
                f"immediate-update step at t={i * h:.6g} stalled")
        f_vals = f_sign * np.einsum(
            "ij,ij->i", un.conj(), mu_part).imag / a_nodes
        u = un[-1]
        nn = float(np.linalg.norm(u))
        if guard and abs(nn - ref) > 1e3 * prop.zeta * ref:
            raise InstabilityError(
                f"norm drifted to {nn:.6g} during the immediate sweep")
        if direction > 0:
            boundaries[i + 1] = u
            norms[i + 1] = nn
            eps_nodes[i] = f_vals
            if store:
                nodes_out[i] = un
        else:
            boundaries[i] = u
            norms[i] = nn
            eps_nodes[i] = f_vals[::-1]
            if store:
                nodes_out[i] = un[::-1]

    solver = StepSolver(system, rule, zeta_step, prop.max_picard,
                        prop.max_halvings)

    def make_f_eval(kk):
        fv = eps_nodes[kk]

        def f_eval(t):
            s = (np.asarray(t, dtype=float) - kk * h) / h
            return _barycentric_interp(s_nodes, fv, s)

        return f_eval

    if direction > 0:
        def regen(kk):
            return solver.solve(boundaries[kk], kk * h, h, make_f_eval(kk),
                                None, f_vals=eps_nodes[kk])
    else:
        def regen(kk):
            src_frac = None
            if source is not None:
                src_frac = lambda s: -source.step_values(
                    kk, 1.0 - np.asarray(s))
            out = solver.solve(boundaries[kk + 1], (kk + 1) * h, -h,
                               make_f_eval(kk), src_frac,
                               f_vals=eps_nodes[kk][::-1])
            return out[::-1]

    traj = Trajectory(grid, rule, m, boundaries, norms, eps_nodes,
                      nodes_out, None, regen)
    return traj, eps_nodes


def _node_grid_samples(eps_nodes, m, n_t):
    out = np.empty(n_t)
    out[:-1] = eps_nodes[::m, 0]
    out[-1] = eps_nodes[-1, -1]
    return out


def _krotov_engine(problem, config, on_row, method, filt_values):
    ctx = prepare_context(problem.system, problem.grid, problem.functional)
    cfg = ctx.config
    if cfg.formulation != "time":
        raise ValueError("immediate-update schemes need the time-domain "
                         "penalty; use the filtered variant for spectral "
                         "shaping")
    if cfg.target == "spectral":
        raise ValueError("immediate-update schemes support final-time and "
                         "time-dependent targets only")
    grid = problem.grid
    prop = problem.propagator_for(config)
    m, n_steps = _steps_for(prop, grid)
    s_nodes = 0.5 * (1.0 - prop.rule.y)
    alpha_nodes, alpha_scalar = _alpha_at_nodes(cfg.alpha, grid, n_steps,
                                                s_nodes)
    system = problem.system

    field = problem.guess
    rows = []
    try:
        traj, br = _forward_eval(problem, ctx, prop, field)
    except (InstabilityError, PropagationError):
        return _finish(method, INSTABILITY, rows, field, None, None)
    props = 1
    _emit(rows, on_row, TraceRow(0, br, 1.0, props, math.nan))
    best = (br.j, field, traj, br)

    limit = config.budget if config.budget is not None else config.max_iterations
    status = BUDGET_EXHAUSTED
    for it in range(1, limit + 1):
        chi_t, source = _chi_setup(ctx, traj)
        psi_ref = traj

        def psi_mu(i):
            return apply_mu(system, psi_ref.step_nodes(i))

        try:
            chi_traj, _ = _immediate_sweep(
                system, grid, prop, chi_t, psi_mu, -1, alpha_nodes,
                alpha_scalar, source=source, guard=source is None)
        except (InstabilityError, PropagationError):
            props += 1
            status = INSTABILITY
            break
        props += 1

        chi_ref = chi_traj

        def chi_mu(i):
            return apply_mu(system, chi_ref.step_nodes(i))

        try:
            traj_t, new_nodes = _immediate_sweep(
                system, grid, prop, problem.psi0, chi_mu, +1,
                alpha_nodes, alpha_scalar)
        except (InstabilityError, PropagationError):
            props += 1
            status = INSTABILITY
            break
        props += 1
        samples = _node_grid_samples(new_nodes, m, grid.n_t)

        if filt_values is None:
            new_field = ControlField.from_time(grid, samples)
            br_t = evaluate(ctx, traj_t, new_field)
        else:
            # project the updated field onto the filter, then re-propagate
            # plainly: the swept trajectory belongs to the unfiltered field
            bar = dct1(RealSignal(grid, samples))
            new_field = ControlField.from_spectrum(
                grid, filt_values * bar.values)
            try:
                traj_t, br_t = _forward_eval(problem, ctx, prop, new_field)
            except (InstabilityError, PropagationError):
                props += 1
                status = INSTABILITY
                break
            props += 1
        change = _rel_change(field, new_field, "time")
        _emit(rows, on_row, TraceRow(it, br_t, 1.0, props, change))
        if br_t.j > best[0]:
            best = (br_t.j, new_field, traj_t, br_t)
        prev = field
        field, traj, br = new_field, traj_t, br_t
        if config.budget is None and convergence_check(prev, field, "time",
                                                       config.tau):
            status = CONVERGED
            break

    if filt_values is not None:
        # spectral projection breaks the monotonicity guarantee; hand back
        # the best iterate seen rather than the last one
        return _finish(method, status, rows, best[1], best[2], best[3])
    return _finish(method, status, rows, field, traj, br)


def optimize_krotov(problem, config=None, on_row=None):
    """Immediate-update iteration: the backward sweep recomputes the field
    from the stored forward states node by node, the forward sweep from the
    stored costate, so every propagation uses the newest field available.
    Monotonic in exact arithmetic for final-time and time-dependent targets.
    """
    config = config or OptimizerConfig(method="krotov")
    return _krotov_engine(problem, config, on_row, "krotov", None)


def optimize_krotov_filtered(problem, filt, config=None, on_row=None):
    """Immediate-update iteration interrupted by a spectral projection: the
    field produced by the forward sweep is transformed, multiplied by the
    filter, transformed back, and re-propagated plainly.  The projection
    destroys monotonicity, so the trace keeps the best iterate; filt is a
    FilterSpec or a sampled filter on the problem's frequency grid.
    """
    config = config or OptimizerConfig(method="krotov-filtered")
    fgrid = problem.grid.frequency_grid()
    filt_values = _filter_values(filt, fgrid)
    return _krotov_engine(problem, config, on_row, "krotov-filtered",
                          filt_values)


def _filter_values(filt, fgrid):
    from .spectral import FilterSpec, make_filter
    if isinstance(filt, FilterSpec):
        return make_filter(filt, fgrid).values
    if isinstance(filt, Spectrum):
        if filt.grid != fgrid:
            raise ValueError("filter grid does not match the problem grid")
        return np.asarray(filt.values, dtype=float)
    arr = np.asarray(filt, dtype=float)
    if arr.shape != (fgrid.n_t,):
        raise ValueError("filter samples do not match the frequency grid")
    return arr


# ---------------------------------------------------------------------------
# immediate update against a time-domain penalty kernel


def _settle_front(cross, seed, tol, cap):
    """Solve val(x) = x for the sample at the sweep front.

    cross(x) propagates the crossing with the front sample set to x and
    returns (state, val), val being the penalty-row solve there.  Plain
    repetition diverges once the local gain passes one (coarse grids), so
    after the first step the residual is driven down by secant updates.
    """
    x_prev = r_prev = None
    x = seed
    for _ in range(cap):
        state, val = cross(x)
        r = val - x
        if abs(r) <= tol * max(1.0, abs(val)):
            return state
        if x_prev is None or r == r_prev:
            x_next = val
        else:
            x_next = x - r * (x - x_prev) / (r - r_prev)
        x_prev, r_prev, x = x, r, x_next
    raise PropagationError("kernel sweep front sample did not settle")


def optimize_degani(problem, alpha_omega, config=None, on_row=None):
    """Immediate update with the penalty expressed through the kernel
    beta(t,t') built from alpha_omega.  The field value at a grid node is
    solved from its own penalty row the moment both trajectories are known
    there: the backward sweep updates while the costate passes, the forward
    sweep while the new state passes.  The problem's alpha plays no role;
    the kernel replaces it.  Final-time targets only.
    """
    config = config or OptimizerConfig(method="degani")
    cfg = problem.functional
    if cfg.formulation != "time":
        raise ValueError("the kernel scheme works on the time grid")
    if cfg.target != "final" or cfg.restriction is not None:
        raise ValueError("the kernel scheme supports plain final-time "
                         "targets only")
    ctx = prepare_context(problem.system, problem.grid, problem.functional)
    grid, system = problem.grid, problem.system
    n_t = grid.n_t

    aw = np.asarray(alpha_omega, dtype=float)
    beta = build_beta_kernel(aw, grid)
    ww = grid.dt / endpoint_factors(n_t)
    pivot = np.diag(beta) * ww
    scale = float(np.max(np.abs(beta)) * np.max(ww))
    if not np.all(np.abs(pivot) > 1e-12 * max(scale, _EPS)):
        raise ValueError("penalty kernel has a vanishing diagonal pivot; "
                         "the per-node solve would break down")

    prop = problem.propagator_for(config)
    m, n_steps = _steps_for(prop, grid)
    zeta_step = max(prop.zeta / n_steps, 100.0 * _EPS)
    solver = StepSolver(system, prop.rule, zeta_step, prop.max_picard,
                        prop.max_halvings)
    h_sub = grid.dt / m
    o_map = state_map(ctx.o_full)

    def kernel_penalty(vec):
        wv = ww * vec
        return -float(wv @ beta @ wv)

    def breakdown_for(psi_t, vec):
        jm = j_max_final(psi_t, ctx.o_full)
        jb = j_bound(psi_t, cfg.kappa, system, ctx.comm)
        jp = kernel_penalty(vec)
        return FunctionalBreakdown(jm + jb + jp, jm, jb, 0.0, jp, 0.0)

    def update(work, i, chi_i, psi_i):
        cross = float(np.vdot(chi_i, apply_mu(system, psi_i[None, :])[0]).imag)
        rest = float(beta[i] @ (ww * work)) - beta[i, i] * ww[i] * work[i]
        work[i] = (-cross - rest) / pivot[i]
        return work[i]

    def window_eval(work, lo, hi):
        # live view, linear between the crossing endpoints: matches the
        # trapezoid accuracy of the kernel itself, and unlike a wider window
        # it cannot amplify the grid-frequency mode of the sequential solve
        xs = np.arange(lo, hi + 1) * grid.dt
        vals = work[lo:hi + 1]

        def f_eval(t):
            return _barycentric_interp(xs, vals, np.asarray(t, dtype=float))

        return f_eval

    eps = problem.guess.time_values().astype(float).copy()
    rows = []
    try:
        traj = propagate_forward(system, eps, problem.psi0, prop, grid=grid)
    except (InstabilityError, PropagationError):
        return _finish("degani", INSTABILITY, rows,
                       ControlField.from_time(grid, eps), None, None)
    props = 1
    br = breakdown_for(traj.final_state, eps)
    _emit(rows, on_row, TraceRow(0, br, 1.0, props, math.nan))
    psi_grid = traj.grid_states()

    limit = config.budget if config.budget is not None else config.max_iterations
    status = BUDGET_EXHAUSTED
    for it in range(1, limit + 1):
        work = eps.copy()
        chi = o_map(psi_grid[-1][None, :])[0] + terminal_chi(
            cfg.kappa, system, psi_grid[-1])
        chi_grid = np.empty((n_t, system.dim), dtype=complex)
        chi_grid[-1] = chi
        ref = float(np.linalg.norm(chi))
        update(work, n_t - 1, chi, psi_grid[-1])
        try:
            for i in range(n_t - 2, -1, -1):
                f_eval = window_eval(work, i, i + 1)
                chi0 = chi

                def cross_bwd(x, i=i):
                    work[i] = x
                    c = chi0
                    for sub in range(m - 1, -1, -1):
                        t1 = i * grid.dt + (sub + 1) * h_sub
                        c = solver.solve(c, t1, -h_sub, f_eval)[-1]
                    return c, update(work, i, c, psi_grid[i])

                chi = _settle_front(cross_bwd, work[i + 1], zeta_step,
                                    prop.max_picard)
                nn = float(np.linalg.norm(chi))
                if ref > 0.0 and abs(nn - ref) > 1e3 * prop.zeta * ref:
                    raise InstabilityError("costate norm drifted during "
                                           "the kernel sweep")
                chi_grid[i] = chi
            props += 1

            psi = problem.psi0.copy()
            ref_psi = float(np.linalg.norm(psi))
            psi_new = np.empty_like(chi_grid)
            psi_new[0] = psi
            update(work, 0, chi_grid[0], psi)
            for i in range(n_t - 1):
                f_eval = window_eval(work, i, i + 1)
                psi0_step = psi

                def cross_fwd(x, i=i):
                    work[i + 1] = x
                    u = psi0_step
                    for sub in range(m):
                        t0 = i * grid.dt + sub * h_sub
                        u = solver.solve(u, t0, h_sub, f_eval)[-1]
                    return u, update(work, i + 1, chi_grid[i + 1], u)

                # the j > i entries of work still hold the backward values,
                # so the neighbour already seeds the front sample well
                psi = _settle_front(cross_fwd, work[i + 1], zeta_step,
                                    prop.max_picard)
                nn = float(np.linalg.norm(psi))
                if abs(nn - ref_psi) > 1e3 * prop.zeta * ref_psi:
                    raise InstabilityError("state norm drifted during the "
                                           "kernel sweep")
                psi_new[i + 1] = psi
            props += 1
        except (InstabilityError, PropagationError):
            props += 1
            status = INSTABILITY
            break

        new_eps = work
        br_t = breakdown_for(psi, new_eps)
        change = _change_ratio(eps, new_eps)
        _emit(rows, on_row, TraceRow(it, br_t, 1.0, props, change))
        eps, psi_grid, br = new_eps, psi_new, br_t
        if config.budget is None and change < config.tau:
            status = CONVERGED
            break

    field = ControlField.from_time(grid, eps)
    try:
        traj = propagate_forward(system, field, problem.psi0, prop, grid=grid)
        props += 1
        br = breakdown_for(traj.final_state, eps)
    except (InstabilityError, PropagationError):
        return _finish("degani", INSTABILITY, rows, field, None, br)
    return _finish("degani", status, rows, field, traj, br)


# ---------------------------------------------------------------------------
# gradient ascent and quasi-Newton, sharing one line search


def _line_search(probe, j0, k_seed, k_cap, k_floor, n_refine):
    """Deterministic bracketing plus golden-section refinement on (0, k_cap].

    probe(k) evaluates and caches a trial; returns None when no probed K
    improves on j0 before k_floor, else the best K seen.  The seed is
    probed first and exactly, so an exact optimum at the seed survives
    refinement bit for bit.
    """
    k1 = min(k_seed, k_cap)
    j1 = probe(k1)
    if j1 > j0:
        a, mid, f_mid = 0.0, k1, j1
        b = None
        while mid < k_cap:
            nxt = min(2.0 * mid, k_cap)
            f_nxt = probe(nxt)
            if f_nxt <= f_mid:
                b = nxt
                break
            a, mid, f_mid = mid, nxt, f_nxt
        if b is None:
            return mid  # improving all the way to the cap
    else:
        k = k1
        while True:
            k *= 0.5
            if k < k_floor:
                return None
            jk = probe(k)
            if jk > j0:
                break
        a, mid, f_mid = 0.0, k, jk
        b = 2.0 * k  # already probed, not better than j0

    for _ in range(n_refine):
        if (mid - a) > (b - mid):
            x = mid - (1.0 - _INV_PHI) * (mid - a)
            fx = probe(x)
            if fx > f_mid:
                b, mid, f_mid = mid, x, fx
            else:
                a = x
        else:
            x = mid + (1.0 - _INV_PHI) * (b - mid)
            fx = probe(x)
            if fx > f_mid:
                a, mid, f_mid = mid, x, fx
            else:
                b = x
    return mid


class _ProbeCache:
    """Evaluates trial fields once per K and remembers the best."""

    def __init__(self, problem, ctx, prop, make_field):
        self.problem = problem
        self.ctx = ctx
        self.prop = prop
        self.make_field = make_field
        self.seen = {}
        self.count = 0

    def __call__(self, k):
        if k in self.seen:
            return self.seen[k][0]
        trial = self.make_field(k)
        self.count += 1
        try:
            traj, br = _forward_eval(self.problem, self.ctx, self.prop, trial)
            j = br.j
        except (InstabilityError, PropagationError):
            traj, br, j = None, None, -math.inf
        self.seen[k] = (j, trial, traj, br)
        return j

    def best(self):
        k_best, payload = None, None
        for k, entry in self.seen.items():
            if payload is None or entry[0] > payload[0]:
                k_best, payload = k, entry
        return k_best, payload

    def smallest_k(self):
        return min(self.seen)


def _ls_engine(problem, config, on_row, method):
    ctx = prepare_context(problem.system, problem.grid, problem.functional)
    formulation = ctx.config.formulation
    grid = problem.grid
    prop = problem.propagator_for(config)
    system = problem.system

    if formulation == "frequency":
        support = np.flatnonzero(np.isfinite(ctx.alpha_omega))
        if support.size == 0:
            raise ValueError("the penalty filter leaves no usable bins")
        alpha_red = ctx.alpha_omega[support]
        wq = grid.frequency_grid().dw / endpoint_factors(grid.n_t)[support]

        def extract(fld):
            return fld.spectrum().values[support]

        def insert(vec):
            full = np.zeros(grid.n_t)
            full[support] = vec
            return ControlField.from_spectrum(grid, full)

        def raw_gradient(fld, traj, chi):
            g = gradient_freq(system, fld, traj, chi, ctx.alpha_omega)
            return g.values[support]
    else:
        alpha_red = np.broadcast_to(
            np.asarray(ctx.config.alpha, dtype=float), (grid.n_t,))
        wq = grid.dt / endpoint_factors(grid.n_t)

        def extract(fld):
            return fld.time_values()

        def insert(vec):
            return ControlField.from_time(grid, vec)

        def raw_gradient(fld, traj, chi):
            g = gradient_time(system, fld, traj, chi, ctx.config.alpha)
            return g.values

    field = problem.guess
    rows = []
    try:
        traj, br = _forward_eval(problem, ctx, prop, field)
    except (InstabilityError, PropagationError):
        return _finish(method, INSTABILITY, rows, field, None, None)
    props = 1
    _emit(rows, on_row, TraceRow(0, br, config.k_init, props, math.nan))

    quasi = method == "quasi-newton"
    b0 = 1.0 / (2.0 * alpha_red * wq) if quasi else None
    hmat = np.diag(b0) if quasi else None
    x_prev = gamma_prev = None

    k_cap = config.k_max
    k_seed = min(config.k_init, k_cap)
    limit = config.budget if config.budget is not None else config.max_iterations
    status = BUDGET_EXHAUSTED
    for it in range(1, limit + 1):
        try:
            chi_t, source = _chi_setup(ctx, traj)
            chi_traj = propagate_backward(system, field, source, chi_t, prop,
                                          grid=grid)
        except (InstabilityError, PropagationError):
            props += 1
            status = INSTABILITY
            break
        props += 1

        grad = raw_gradient(field, traj, chi_traj)
        if quasi:
            gamma = wq * grad  # functional gradient w.r.t. the bin values
            if x_prev is not None:
                s_vec = extract(field) - x_prev
                y_vec = gamma_prev - gamma  # curvature of -J
                ys = float(y_vec @ s_vec)
                if ys > 1e-12 * float(np.linalg.norm(y_vec)
                                      * np.linalg.norm(s_vec)):
                    rho = 1.0 / ys
                    hy = hmat @ y_vec
                    hmat = (hmat - rho * (np.outer(s_vec, hy)
                                          + np.outer(hy, s_vec))
                            + rho * rho * float(y_vec @ hy)
                            * np.outer(s_vec, s_vec)
                            + rho * np.outer(s_vec, s_vec))
            x_prev, gamma_prev = extract(field), gamma
            if float(np.linalg.norm(gamma)) == 0.0:
                status = CONVERGED
                break
            direction = hmat @ gamma
            if float(direction @ gamma) <= 0.0:
                hmat = np.diag(b0)
                direction = b0 * gamma
        else:
            direction = grad
            if float(np.linalg.norm(direction)) == 0.0:
                status = CONVERGED
                break

        base = extract(field)
        cache = _ProbeCache(problem, ctx, prop,
                            lambda k: insert(base + k * direction))
        k_acc = _line_search(cache, br.j, k_seed, k_cap, config.k_floor,
                             config.ls_refine)
        props += cache.count
        if k_acc is None:
            j_small, trial, _, _ = cache.seen[cache.smallest_k()]
            if (math.isfinite(j_small) and trial is not None
                    and j_small >= br.j - 1e-12 * max(1.0, abs(br.j))
                    and convergence_check(field, trial, formulation,
                                          config.tau)):
                status = CONVERGED
            else:
                status = K_UNDERFLOW
            break
        k_best, (j_t, trial, traj_t, br_t) = cache.best()
        change = _rel_change(field, trial, formulation)
        _emit(rows, on_row, TraceRow(it, br_t, k_best, props, change))
        prev = field
        field, traj, br = trial, traj_t, br_t
        k_cap = k_best  # accepted K never increases
        k_seed = k_best
        if config.budget is None and convergence_check(prev, field,
                                                       formulation,
                                                       config.tau):
            status = CONVERGED
            break
    return _finish(method, status, rows, field, traj, br)


def optimize_gradient(problem, config=None, on_row=None):
    """Steepest ascent on the functional gradient with a bracketing plus
    golden-section line search in the step parameter K.  A zero gradient
    converges immediately; accepted steps strictly increase J.
    """
    config = config or OptimizerConfig(method="gradient")
    return _ls_engine(problem, config, on_row, "gradient")


def optimize_quasi_newton(problem, config=None, on_row=None):
    """BFGS-type ascent on the reduced field vector: penalty-support bins in
    the frequency formulation, all samples in the time formulation.  The
    inverse curvature starts as the diagonal penalty Hessian, so the first
    direction coincides with the relaxation one; a non-ascent direction
    resets the memory to that diagonal.
    """
    config = config or OptimizerConfig(method="quasi-newton")
    return _ls_engine(problem, config, on_row, "quasi-newton")


def optimize(problem, config, on_row=None, **kwargs):
    """Dispatch on config.method; kernel and filter arguments arrive as
    alpha_omega= and filt= keywords."""
    method = config.method
    if method == "naive":
        return optimize_naive(problem, config, on_row=on_row)
    if method == "relaxation":
        return optimize_relaxation(problem, config, on_row=on_row)
    if method == "gradient":
        return optimize_gradient(problem, config, on_row=on_row)
    if method == "quasi-newton":
        return optimize_quasi_newton(problem, config, on_row=on_row)
    if method == "krotov":
        return optimize_krotov(problem, config, on_row=on_row)
    if method == "krotov-filtered":
        if "filt" not in kwargs:
            raise ValueError("the filtered scheme needs filt=")
        return optimize_krotov_filtered(problem, kwargs["filt"], config,
                                        on_row=on_row)
    if method == "degani":
        if "alpha_omega" not in kwargs:
            raise ValueError("the kernel scheme needs alpha_omega=")
        return optimize_degani(problem, kwargs["alpha_omega"], config,
                               on_row=on_row)
    raise ValueError(f"unknown method {method!r}")
