"""Feasibility testing, cost bounds, and the sparsest-controller pathway.

The feasibility test alternates an SDP step in the lifted matrix with a
closed-form eigenprojector step for the trace multiplier; the cost bounds
come from the semidefinite relaxation (below) and the scaled-gain programs
with the weakened inverse block (above).  The sparsest-stabilizing-gain
search runs a fixed-rank projection heuristic with reweighting and a
greedy certified pruning pass.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import conic, lifting
from .conic import (
    BlockLayout,
    EngineProgram,
    ViewBuilder,
    gain_from_theta,
    lyapunov_operator,
    solve_engine,
    svec,
    svec_len,
    solve_sdp,
)
from .linalg import (
    hurwitz_margin,
    numerical_rank,
    project_rank,
    sum_smallest_eigs,
    symmetrize,
)
from .model import AdmmOptions, StructurePattern

FEAS_TOL = 1e-6
_STALL_LEVEL = 1e-2


class InfeasibleProblem(Exception):
    """The convex program has an empty feasible set."""


class UnsupportedStructure(Exception):
    """The requested bound needs state feedback (C = I)."""


class HeuristicFailure(Exception):
    """No stabilizing gain was found within the allotted restarts."""


class ParameterTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class FeasibilityReport:
    objective: float
    verdict: str  # 'Feasible' | 'Infeasible' | 'Inconclusive'
    x_certificate: np.ndarray
    multiplier: np.ndarray
    iterations: int

    def to_dict(self):
        return {
            "objective": self.objective,
            "verdict": self.verdict,
            "x_certificate": self.x_certificate.tolist(),
            "multiplier": self.multiplier.tolist(),
            "iterations": self.iterations,
        }


@dataclass(frozen=True)
class BoundsReport:
    lower: float
    upper: float

    @property
    def gap(self):
        return self.upper - self.lower

    def to_dict(self):
        return {"lower": self.lower, "upper": self.upper, "gap": self.gap}


def _multiplier_from(x_matrix, keep):
    """Projector onto the eigenvectors of the `keep` smallest eigenvalues."""
    w, v = np.linalg.eigh(symmetrize(x_matrix))
    basis = v[:, :keep]
    return basis @ basis.T


def _x_step_feasible(system, var, x_matrix, opts, tol=1e-4):
    """Loose membership check guarding against stalled inner solves."""
    scale = 1.0 + float(np.linalg.norm(x_matrix))
    if np.linalg.eigvalsh(symmetrize(x_matrix))[0] < -tol * scale:
        return False
    dyn = (system.a_matrix @ var.x11 + var.x11 @ system.a_matrix.T
           + system.b_matrix @ var.x12.T + var.x12 @ system.b_matrix.T)
    if np.linalg.eigvalsh(symmetrize(dyn))[0] > tol * scale:
        return False
    return np.linalg.eigvalsh(symmetrize(var.x11))[0] > -tol * scale


def feasibility_test(system, pattern, opts=None, restarts=10, seed=0,
                     max_alternations=200):
    """Alternating test for stabilizability with the given gain structure.

    Minimizes the trace pairing of the lifted matrix against a bounded
    multiplier.  The pairing reaching zero certifies a fixed-rank feasible
    point, hence a structured stabilizing gain; an empty convex set or a
    pairing stalled above the noise floor over several multiplier restarts
    certifies the opposite.  Anything in between is reported Inconclusive.
    """
    opts = opts or AdmmOptions(inner_tol=1e-8, inner_max=4000)
    n, m = system.n, system.m
    d = 2 * n + m
    keep = n + m
    rng = np.random.default_rng(seed)

    total_alternations = 0
    stalled_values = []
    best = None
    for restart in range(restarts):
        if restart == 0:
            y_mult = (keep / d) * np.eye(d)
        else:
            q, _ = np.linalg.qr(rng.normal(size=(d, d)))
            y_mult = q[:, :keep] @ q[:, :keep].T
        prev_obj = np.inf
        objective = np.inf
        x_matrix = np.eye(d)
        for _ in range(max_alternations):
            var, report = solve_sdp(
                {"matrix": y_mult},
                [("dynamics_strict", system, opts.strict_eps),
                 ("lifted_psd", system, pattern),
                 ("x11_strict", system, opts.strict_eps)],
                opts)
            total_alternations += 1
            if report.status == "Infeasible":
                return FeasibilityReport(
                    objective=np.inf, verdict="Infeasible",
                    x_certificate=np.zeros((d, d)), multiplier=y_mult,
                    iterations=total_alternations)
            x_matrix = lifting.assemble(var, system.c_matrix)
            if not _x_step_feasible(system, var, x_matrix, opts):
                # Projections stalled without meeting the set: evidence the
                # set is empty, folded into the restart aggregation.
                objective = np.inf
                break
            y_mult = _multiplier_from(x_matrix, keep)
            objective = float(sum_smallest_eigs(x_matrix, keep))
            scale = 1.0 + float(np.linalg.norm(x_matrix))
            if objective <= FEAS_TOL * scale:
                return FeasibilityReport(
                    objective=objective, verdict="Feasible",
                    x_certificate=x_matrix, multiplier=y_mult,
                    iterations=total_alternations)
            if prev_obj - objective < 1e-9:
                break
            prev_obj = objective
        stalled_values.append(objective)
        if best is None or objective < best[0]:
            best = (objective, x_matrix, y_mult)
    verdict = "Infeasible" if min(stalled_values) > _STALL_LEVEL else "Inconclusive"
    return FeasibilityReport(
        objective=best[0], verdict=verdict, x_certificate=best[1],
        multiplier=best[2], iterations=total_alternations)


def lower_bound(problem, opts=None):
    """Semidefinite-relaxation value: a floor under every achievable cost.

    The cardinality term is dropped (it is nonnegative), so the value also
    bounds the pure quadratic cost of any stabilizing structured gain.
    """
    opts = opts or AdmmOptions(inner_tol=1e-8, inner_max=20000)
    system = problem.system
    var, report = solve_sdp(
        {"x11": problem.q_weight, "x22": problem.r_weight},
        [("dynamics_eq", system, problem.noise_cov),
         ("lifted_psd", system, problem.pattern),
         ("x11_strict", system, opts.strict_eps)],
        opts)
    if report.status == "Infeasible":
        raise InfeasibleProblem("semidefinite relaxation is infeasible")
    return float(np.trace(problem.q_weight @ var.x11)
                 + np.trace(problem.r_weight @ var.x22))


def _scaled_gain_program(problem, opts, diagonal_gamma, reweight_rounds=4):
    """Shared body of the two upper-bound programs, in reduced form.

    In the printed programs the semidefinite block with the weakened
    inverse corner 2*Gamma - X11 forces Gamma = X11 and K_tilde*C = X12'
    at every feasible point (the corner's Schur complement is
    -(Gamma - X11) X11^-1 (Gamma - X11), so it must vanish).  Substituting
    those identities gives an equivalent, better conditioned program over
    (Gamma diagonal, X12, X22) with the single block [[Gamma, X12],
    [X12', X22]] >= 0; the gain is recovered as X12' Gamma^-1.

    For the scalar variant (Gamma = alpha*I) the identity K_tilde*C = X12'
    additionally restricts X12' to the masked row space of C, enforced
    here by parameterizing X12 = (K_tilde C)'.
    """
    system = problem.system
    n, m, p = system.n, system.m, system.p
    pattern = problem.pattern
    positions = np.nonzero(pattern.mask)
    nfree = int(pattern.count())

    layout = BlockLayout()
    if diagonal_gamma:
        layout.add("gamma", "vec", n)
    else:
        layout.add("gamma", "scalar", None)
    layout.add("k", "vec", nfree)
    layout.add("x22", "sym", m)

    eye_n = np.eye(n)
    views = []
    # [[Gamma, (K~C)'], [K~C, X22]] >= 0 encodes X22 >= X12' Gamma^-1 X12
    # with X12 = (K~C)'.
    big = ViewBuilder(layout, n + m, n + m)
    if diagonal_gamma:
        big.vec_diag("gamma", 0, 0)
    else:
        big.scalar_eye("gamma", 0, 0, n)
    big.gain_block("k", 0, n, system.c_matrix, positions, transpose=True)
    big.gain_block("k", n, 0, system.c_matrix, positions)
    big.block("x22", n, n)
    views.append(big.build("psd"))

    gsize = n if diagonal_gamma else 1
    gpos = ViewBuilder(layout, 1, gsize)
    _, _, goff, _ = layout.blocks["gamma"]
    for i in range(gsize):
        gpos._push(0, i, goff + i, 1.0)
        gpos.g[i] = -opts.strict_eps
    views.append(gpos.build("nonneg"))

    if nfree:
        kview = ViewBuilder(layout, 1, nfree)
        _, _, koff, _ = layout.blocks["k"]
        for i in range(nfree):
            kview._push(0, i, koff + i, 1.0)
        l1 = kview.build("l1", weights=np.ones(nfree))
        views.append(l1)
    else:
        l1 = None

    # dynamics balance with X11 = Gamma and X12 = (K~C)':
    # A Gamma + Gamma A' + B (K~C) ... rows in svec coordinates
    dyn = lyapunov_operator(system.a_matrix, system.b_matrix)
    ns = svec_len(n)
    nm = n * m
    eq_a = np.zeros((ns, layout.size))
    x11_cols = dyn[:, :ns]
    x12_cols = dyn[:, ns:]
    idx = conic._sym_coord_index(n)
    if diagonal_gamma:
        for i in range(n):
            eq_a[:, goff + i] = x11_cols[:, idx[(i, i)]]
    else:
        eq_a[:, goff] = sum(x11_cols[:, idx[(i, i)]] for i in range(n))
    c_mat = system.c_matrix
    _, _, koff, _ = layout.blocks["k"]
    for col, (i, j) in enumerate(zip(*positions)):
        # X12 entry (t, i) = C[j, t]; vec index of x12 (row-major n x m)
        contrib = np.zeros(nm)
        for t in range(n):
            contrib[t * m + i] = c_mat[j, t]
        eq_a[:, koff + col] = x12_cols @ contrib
    eq_b = svec(-problem.noise_cov)

    cost = np.zeros(layout.size)
    qsym = symmetrize(problem.q_weight)
    if diagonal_gamma:
        cost[layout.slice("gamma")] = np.diag(qsym)
    else:
        cost[goff] = float(np.trace(qsym))
    cost[layout.slice("x22")] = svec(symmetrize(problem.r_weight))

    program = EngineProgram(layout=layout, cost=cost, views=views,
                            anchor_view=None, eq_a=eq_a, eq_b=eq_b)

    warm = None
    theta = None
    delta = 1e-4
    for _ in range(max(1, reweight_rounds)):
        theta, report, warm = solve_engine(program, opts, l1_lam=problem.lam, warm=warm)
        if report.status == "Infeasible":
            raise InfeasibleProblem("upper-bound program is infeasible")
        if problem.lam == 0 or l1 is None:
            break
        k_free = theta[layout.slice("k")]
        l1.weights = 1.0 / (np.abs(k_free) + delta)

    blocks = layout.unpack(theta)
    k_tilde = gain_from_theta(blocks["k"], pattern)
    gamma = blocks["gamma"]
    if diagonal_gamma:
        k_hat = k_tilde / gamma[None, :]
    else:
        k_hat = k_tilde / float(gamma)
    # Entries below the solver's noise floor are genuine zeros of the
    # reweighted surrogate.
    k_hat = np.where(np.abs(k_hat) > 1e-6, k_hat, 0.0)
    return pattern.apply(k_hat)


def _certified_upper_value(problem, k_hat):
    from .admm import evaluate_cost

    system = problem.system
    margin = hurwitz_margin(
        system.a_matrix + system.b_matrix @ k_hat @ system.c_matrix)
    if margin >= 0:
        raise InfeasibleProblem("recovered upper-bound gain is not stabilizing")
    j, _ = evaluate_cost(system, k_hat, problem.q_weight, problem.r_weight,
                         problem.noise_cov)
    return j + problem.lam * np.count_nonzero(k_hat), k_hat


def upper_bound_state(problem, opts=None):
    """Upper bound via the diagonal-scaling program; state feedback only.

    Returns (value, gain): the exact cost of the recovered stabilizing
    gain plus its weighted cardinality, which dominates the rank-feasible
    optimum.  Raises UnsupportedStructure when C is not the identity.
    """
    if not problem.system.state_feedback():
        raise UnsupportedStructure("upper_bound_state requires C = I")
    opts = opts or AdmmOptions(inner_tol=1e-8, inner_max=20000)
    k_hat = _scaled_gain_program(problem, opts, diagonal_gamma=True)
    return _certified_upper_value(problem, k_hat)


def upper_bound_output(problem, opts=None):
    """Upper bound via the scalar-scaling program (output feedback allowed)."""
    opts = opts or AdmmOptions(inner_tol=1e-8, inner_max=20000)
    k_hat = _scaled_gain_program(problem, opts, diagonal_gamma=False)
    return _certified_upper_value(problem, k_hat)


def bounds(problem, opts=None):
    upper, _ = (upper_bound_state(problem, opts)
                if problem.system.state_feedback()
                else upper_bound_output(problem, opts))
    return BoundsReport(lower=lower_bound(problem, opts), upper=upper)


# ---------------------------------------------------------------------------
# sparsest stabilizing controller


def _stabilize_on_support(system, mask, opts, seed=0):
    """Try to stabilize with the given support; return a gain or None.

    The support is accepted or rejected by the feasibility test; the gain
    is read off the certificate, with a retry at a padded strictness when
    the recovered margin is only marginally negative.
    """
    from dataclasses import replace

    pattern = StructurePattern(mask)
    if not mask.any():
        return np.zeros(mask.shape) if hurwitz_margin(system.a_matrix) < 0 else None
    report = feasibility_test(system, pattern, opts, restarts=1, seed=seed,
                              max_alternations=60)
    if report.verdict != "Feasible":
        return None
    for trial_opts in (opts, replace(opts, strict_eps=max(opts.strict_eps, 1e-3))):
        if trial_opts is not opts:
            report = feasibility_test(system, pattern, trial_opts, restarts=1,
                                      seed=seed, max_alternations=60)
            if report.verdict != "Feasible":
                continue
        var = lifting.decompose(report.x_certificate, system.c_matrix, pattern)
        k = pattern.apply(var.k_gain)
        margin = hurwitz_margin(system.a_matrix + system.b_matrix @ k @ system.c_matrix)
        if margin < -1e-9:
            return k
    return None


def _rank_heuristic_gain(system, pattern, opts, rng):
    """Fixed-rank projection heuristic for the cardinality program.

    Runs consensus iterations between the strict Lyapunov cone and the
    fixed-rank set of the stacked two-block-column matrix, with
    inverse-magnitude reweighting shrinking the gain block.
    """
    n, m = system.n, system.m
    pattern_count = int(pattern.count())
    positions = np.nonzero(pattern.mask)

    layout = BlockLayout()
    layout.add("x11", "sym", n)
    layout.add("x12", "full", (n, m))
    layout.add("k", "vec", pattern_count)

    eye_n = np.eye(n)
    views = []
    strict = ViewBuilder(layout, n, n)
    strict.block("x11", 0, 0).const(-1e-4 * eye_n, 0, 0)
    views.append(strict.build("psd"))
    dyn = lyapunov_operator(system.a_matrix, system.b_matrix)
    lyap = ViewBuilder(layout, n, n)
    lyap.sym_operator(-dyn, ["x11", "x12"])
    lyap.const(-1e-4 * eye_n, 0, 0)
    views.append(lyap.build("psd"))
    if pattern_count:
        kview = ViewBuilder(layout, 1, pattern_count)
        _, _, koff, _ = layout.blocks["k"]
        for i in range(pattern_count):
            kview._push(0, i, koff + i, 1.0)
        views.append(kview.build("l1", weights=np.ones(pattern_count)))
        l1 = views[-1]

    # Stacked matrix [[X11, X12], [I, (KC)']], rank n at consistency.
    stack = ViewBuilder(layout, 2 * n, n + m)
    stack.block("x11", 0, 0).block("x12", 0, n)
    stack.const(eye_n, n, 0)
    stack.gain_block("k", n, n, system.c_matrix, positions, transpose=True)
    anchor_view = stack.build("free")

    program = EngineProgram(layout=layout, cost=np.zeros(layout.size),
                            views=views, anchor_view=anchor_view,
                            eq_a=None, eq_b=None)

    x11 = np.eye(n)
    x12 = rng.normal(scale=0.3, size=(n, m))
    k0 = rng.normal(scale=0.3, size=pattern_count)
    theta = layout.pack({"x11": x11, "x12": x12, "k": k0})
    t_mat = (anchor_view.f @ theta + anchor_view.g).reshape(2 * n, n + m)
    v_cons = project_rank(t_mat, n)
    dual = np.zeros_like(t_mat)
    warm = None
    delta = 1e-3
    rho_rank = 10.0
    lam_spar = 1.0
    for _ in range(120):
        anchor = v_cons - dual
        theta, report, warm = solve_engine(
            program, opts, rho=rho_rank, anchor=anchor.ravel(),
            l1_lam=lam_spar, warm=warm, polish=False)
        t_mat = (anchor_view.f @ theta + anchor_view.g).reshape(2 * n, n + m)
        v_cons = project_rank(t_mat + dual, n)
        dual = dual + t_mat - v_cons
        k_free = theta[layout.slice("k")]
        if pattern_count:
            l1.weights = 1.0 / (np.abs(k_free) + delta)
        if np.linalg.norm(t_mat - v_cons) < 1e-6 * (1 + np.linalg.norm(t_mat)):
            break
    return gain_from_theta(theta[layout.slice("k")], pattern)


def sparsest_controller(system, pattern, opts=None, restarts=3, seed=0):
    """Fewest-nonzeros stabilizing structured static gain (heuristic).

    Runs the fixed-rank projection heuristic from several random starts,
    then greedily prunes entries whose removal keeps a certified
    stabilizing gain on the reduced support.  Returns (gain, cardinality).
    """
    opts = opts or AdmmOptions(inner_tol=1e-7, inner_max=3000)
    m, p = pattern.mask.shape
    if hurwitz_margin(system.a_matrix) < 0:
        return np.zeros((m, p)), 0
    base = feasibility_test(system, pattern, opts, restarts=3, seed=seed)
    if base.verdict == "Infeasible":
        raise InfeasibleProblem("structure admits no stabilizing gain")

    best = None
    for restart in range(restarts):
        rng = np.random.default_rng(seed + 17 * restart)
        k_heur = _rank_heuristic_gain(system, pattern, opts, rng)
        order = np.argsort(np.abs(k_heur), axis=None)
        support = pattern.mask & (np.abs(k_heur) > 1e-6)
        k_cur = _stabilize_on_support(system, support, opts, seed=seed)
        if k_cur is None:
            support = pattern.mask.copy()
            k_cur = _stabilize_on_support(system, support, opts, seed=seed)
            if k_cur is None:
                continue
        # Greedy pruning: drop entries smallest-first while a certified
        # stabilizing gain survives on the reduced support.
        improved = True
        while improved:
            improved = False
            for flat in order:
                i, j = np.unravel_index(flat, (m, p))
                if not support[i, j]:
                    continue
                trial = support.copy()
                trial[i, j] = False
                k_trial = _stabilize_on_support(system, trial, opts, seed=seed)
                if k_trial is not None:
                    support, k_cur = trial, k_trial
                    improved = True
        card = int(np.count_nonzero(support))
        if best is None or card < best[1]:
            best = (np.where(support, k_cur, 0.0), card)
            if card == 0:
                break
    if best is None:
        raise HeuristicFailure("no stabilizing gain found within restarts")
    return best


# ---------------------------------------------------------------------------
# block-diagonal rank-minimization assembly


@dataclass(frozen=True)
class ArmpInstance:
    """Block-diagonal affine rank-minimization instance.

    Blocks: diag(vec(K)), nu copies of the zero-padded stacked matrix, and
    rho copies of the slack block tying positive definiteness of
    diag(X11, N) to a rank condition.
    """

    system: object
    pattern: object
    nu: int
    rho_rank: int
    eps: float

    @property
    def psi_side(self):
        n, m = self.system.n, self.system.m
        return max(2 * self.system.n, self.system.n + self.system.m)

    def psi_block(self, x11, x12, k):
        n, m = self.system.n, self.system.m
        kc = np.asarray(k) @ self.system.c_matrix
        stacked = np.block([[np.asarray(x11), np.asarray(x12)],
                            [np.eye(n), kc.T]])
        side = self.psi_side
        out = np.zeros((side, side))
        out[:2 * n, :n + m] = stacked
        return out

    def phi_block(self, x11, noise, d_block=None):
        n = self.system.n
        core = scipy.linalg.block_diag(np.asarray(x11), np.asarray(noise))
        shifted = core - self.eps * np.eye(2 * n)
        if d_block is None:
            w, v = np.linalg.eigh(symmetrize(shifted))
            d_block = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
        return np.block([[np.eye(2 * n), d_block],
                         [np.asarray(d_block).T, shifted]])

    def assemble(self, x11, x12, k, noise, d_block=None):
        blocks = [np.diag(np.asarray(k).ravel())]
        blocks += [self.psi_block(x11, x12, k)] * self.nu
        blocks += [self.phi_block(x11, noise, d_block)] * self.rho_rank
        return scipy.linalg.block_diag(*blocks)

    def total_rank(self, x11, x12, k, noise, d_block=None):
        return numerical_rank(self.assemble(x11, x12, k, noise, d_block))


def build_armp(system, pattern, nu, rho_rank, eps=1e-6):
    """Validated block-diagonal rank-minimization instance.

    The block counts must satisfy nu > m*n and
    rho_rank > m*n + nu * max(2n, n+m).
    """
    n, m = system.n, system.m
    if not eps > 0:
        raise ParameterTooSmall("eps must be positive")
    if not nu > m * n:
        raise ParameterTooSmall(f"nu must exceed m*n = {m * n}")
    floor = m * n + nu * max(2 * n, n + m)
    if not rho_rank > floor:
        raise ParameterTooSmall(f"rho_rank must exceed {floor}")
    return ArmpInstance(system=system, pattern=pattern, nu=int(nu),
                        rho_rank=int(rho_rank), eps=float(eps))


# ---------------------------------------------------------------------------
# discrete-time rank test


def discrete_rank_test(system_discrete, pattern, k, noise_cov=None):
    """Check a gain against the discrete-time balance and rank conditions.

    Builds X11 from the closed-loop discrete balance (spectral radius must
    be below one), fills the consistent blocks, and verifies the printed
    identity and the rank-n condition of the stacked matrix.
    """
    a = system_discrete.a_matrix
    b = system_discrete.b_matrix
    c = system_discrete.c_matrix
    n = system_discrete.n
    k = pattern.apply(k)
    if not np.array_equal(k, np.asarray(k)):
        return False
    noise = np.eye(n) if noise_cov is None else np.asarray(noise_cov, dtype=float)
    a_cl = a + b @ k @ c
    if np.max(np.abs(np.linalg.eigvals(a_cl))) >= 1.0:
        return False
    x11 = scipy.linalg.solve_discrete_lyapunov(a_cl.T, noise)
    x11 = symmetrize(x11)
    if np.linalg.eigvalsh(x11)[0] <= 0:
        return False
    y_t = b @ k @ c
    x12 = x11 @ y_t
    x22 = y_t.T @ x11 @ y_t
    residual = a.T @ x11 @ a + a.T @ x12 + x12.T @ a + x22 - x11 + noise
    if np.linalg.norm(residual) > 1e-8 * (1.0 + np.linalg.norm(noise)):
        return False
    stacked = np.vstack([
        np.hstack([x11, x12]),
        np.hstack([x12.T, x22]),
        np.hstack([np.eye(n), y_t]),
    ])
    return numerical_rank(stacked) == n
