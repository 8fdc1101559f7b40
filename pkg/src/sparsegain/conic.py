"""Inner convex solver.

Solves the lifted-variable subproblems (the proximal X-update of the outer
loop) and the stand-alone semidefinite programs (relaxation, feasibility
step, cost-bound programs) with a self-contained consensus splitting
scheme: an equality-constrained quadratic step over the flat block
parameterization, plus cone projections / soft-thresholding on consensus
copies of each matrix view.  No external conic solver is used.

The scheme, penalty adaptation, and polishing pass are internal details;
only the residual contract of solve_subproblem / solve_sdp is normative.
"""

import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

from . import lifting
from .lifting import AugmentedLifted, LiftedVariable
from .linalg import symmetrize

_SQRT2 = float(np.sqrt(2.0))


class ResidualWarning(UserWarning):
    """Affine constraint could only be met in the least-squares sense."""


# ---------------------------------------------------------------------------
# symmetric vectorization


def svec_len(d):
    return d * (d + 1) // 2


def svec(m):
    """Upper-triangle vectorization with sqrt(2)-scaled off-diagonals."""
    m = np.asarray(m, dtype=float)
    d = m.shape[0]
    iu = np.triu_indices(d)
    scale = np.where(iu[0] == iu[1], 1.0, _SQRT2)
    return m[iu] * scale


def smat(v, d):
    """Inverse of svec."""
    out = np.zeros((d, d))
    iu = np.triu_indices(d)
    scale = np.where(iu[0] == iu[1], 1.0, 1.0 / _SQRT2)
    out[iu] = np.asarray(v) * scale
    return out + np.triu(out, 1).T


def _sym_coord_index(d):
    """Map (i, j) with i <= j to its svec coordinate."""
    idx = {}
    k = 0
    for i in range(d):
        for j in range(i, d):
            idx[(i, j)] = k
            k += 1
    return idx


# ---------------------------------------------------------------------------
# flat block parameterization


class BlockLayout:
    """Named matrix blocks packed into one flat parameter vector.

    Kinds: 'sym' (svec coordinates), 'full' (row-major), 'vec', 'scalar'.
    """

    def __init__(self):
        self.blocks = {}
        self.size = 0

    def add(self, name, kind, shape):
        if kind == "sym":
            size = svec_len(shape)
        elif kind == "full":
            size = shape[0] * shape[1]
        elif kind == "vec":
            size = shape
        elif kind == "scalar":
            size = 1
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        self.blocks[name] = (kind, shape, self.size, size)
        self.size += size
        return self

    def slice(self, name):
        _, _, off, size = self.blocks[name]
        return slice(off, off + size)

    def pack(self, values):
        theta = np.zeros(self.size)
        for name, value in values.items():
            kind, shape, off, size = self.blocks[name]
            if kind == "sym":
                theta[off:off + size] = svec(value)
            elif kind == "full":
                theta[off:off + size] = np.asarray(value, dtype=float).ravel()
            elif kind == "vec":
                theta[off:off + size] = np.asarray(value, dtype=float).ravel()
            else:
                theta[off] = float(value)
        return theta

    def unpack(self, theta):
        out = {}
        for name, (kind, shape, off, size) in self.blocks.items():
            seg = theta[off:off + size]
            if kind == "sym":
                out[name] = smat(seg, shape)
            elif kind == "full":
                out[name] = seg.reshape(shape)
            elif kind == "vec":
                out[name] = seg.copy()
            else:
                out[name] = float(seg[0])
        return out


class ViewBuilder:
    """Sparse affine map theta -> matrix view (row-major flattened)."""

    def __init__(self, layout, nrows, ncols):
        self.layout = layout
        self.nrows, self.ncols = nrows, ncols
        self._r, self._c, self._v = [], [], []
        self.g = np.zeros(nrows * ncols)

    def _flat(self, r, c):
        return r * self.ncols + c

    def _push(self, r, c, col, val):
        self._r.append(self._flat(r, c))
        self._c.append(col)
        self._v.append(val)

    def const(self, mat, r0, c0):
        mat = np.asarray(mat, dtype=float)
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                if mat[i, j] != 0.0:
                    self.g[self._flat(r0 + i, c0 + j)] += mat[i, j]
        return self

    def block(self, name, r0, c0, transpose=False, coeff=1.0):
        kind, shape, off, _ = self.layout.blocks[name]
        if kind == "sym":
            idx = _sym_coord_index(shape)
            for i in range(shape):
                for j in range(shape):
                    a, b = min(i, j), max(i, j)
                    scale = 1.0 if a == b else 1.0 / _SQRT2
                    r, c = (j, i) if transpose else (i, j)
                    self._push(r0 + r, c0 + c, off + idx[(a, b)], coeff * scale)
        elif kind == "full":
            a, b = shape
            for i in range(a):
                for j in range(b):
                    r, c = (j, i) if transpose else (i, j)
                    self._push(r0 + r, c0 + c, off + i * b + j, coeff)
        else:
            raise ValueError(f"block() does not support kind {kind!r}")
        return self

    def scalar_eye(self, name, r0, c0, dim, coeff=1.0):
        _, _, off, _ = self.layout.blocks[name]
        for i in range(dim):
            self._push(r0 + i, c0 + i, off, coeff)
        return self

    def vec_diag(self, name, r0, c0, coeff=1.0):
        _, shape, off, _ = self.layout.blocks[name]
        for i in range(shape):
            self._push(r0 + i, c0 + i, off + i, coeff)
        return self

    def gain_block(self, name, r0, c0, c_matrix, positions, transpose=False, coeff=1.0):
        """Place K C (or its transpose) where K has free entries at `positions`."""
        c_matrix = np.asarray(c_matrix, dtype=float)
        _, _, off, _ = self.layout.blocks[name]
        n = c_matrix.shape[1]
        for idx, (i, j) in enumerate(zip(*positions)):
            for t in range(n):
                val = coeff * c_matrix[j, t]
                if val == 0.0:
                    continue
                r, c = (t, i) if transpose else (i, t)
                self._push(r0 + r, c0 + c, off + idx, val)
        return self

    def inner(self, name, coefmat, r, c, coeff=1.0):
        """Add coeff * <coefmat, block> to the scalar view entry (r, c)."""
        kind, shape, off, size = self.layout.blocks[name]
        if kind == "sym":
            vals = svec(symmetrize(coefmat))
        elif kind == "full":
            vals = np.asarray(coefmat, dtype=float).ravel()
        else:
            raise ValueError(f"inner() does not support kind {kind!r}")
        for col, val in enumerate(vals):
            if val != 0.0:
                self._push(r, c, off + col, coeff * val)
        return self

    def sym_operator(self, op_cols, block_names, r0=0, c0=0, coeff=1.0):
        """Place a symmetric-matrix-valued operator given in svec rows.

        op_cols maps the stacked coordinates of `block_names` to svec
        coordinates of a d x d symmetric output placed at (r0, c0).
        """
        nsym = op_cols.shape[0]
        d = int((np.sqrt(8 * nsym + 1) - 1) / 2)
        pairs = [(i, j) for i in range(d) for j in range(i, d)]
        col0 = 0
        for name in block_names:
            _, _, off, size = self.layout.blocks[name]
            sub = op_cols[:, col0:col0 + size]
            rows, cols = np.nonzero(sub)
            for k, col in zip(rows, cols):
                i, j = pairs[k]
                if i == j:
                    self._push(r0 + i, c0 + i, off + col, coeff * sub[k, col])
                else:
                    val = coeff * sub[k, col] / _SQRT2
                    self._push(r0 + i, c0 + j, off + col, val)
                    self._push(r0 + j, c0 + i, off + col, val)
            col0 += size
        return self

    def build(self, cone, weights=None):
        f = sp.coo_matrix(
            (self._v, (self._r, self._c)),
            shape=(self.nrows * self.ncols, self.layout.size),
        ).tocsr()
        f.sum_duplicates()
        return ConeView(
            f=f, g=self.g, shape=(self.nrows, self.ncols), cone=cone, weights=weights
        )


@dataclass
class ConeView:
    """Affine view F theta + g with an attached cone or l1 role."""

    f: sp.csr_matrix
    g: np.ndarray
    shape: tuple
    cone: str  # 'psd' | 'nonneg' | 'l1' | 'free'
    weights: np.ndarray = None


# ---------------------------------------------------------------------------
# dynamics operator


def lyapunov_operator(a, b):
    """Dense map (svec(X11), vec(X12)) -> svec(A X11 + X11 A' + B X12' + X12 B')."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    m = b.shape[1]
    ns = svec_len(n)
    cols = np.zeros((ns, ns + n * m))
    col = 0
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            if i == j:
                e[i, i] = 1.0
            else:
                e[i, j] = e[j, i] = 1.0 / _SQRT2
            cols[:, col] = svec(a @ e + e @ a.T)
            col += 1
    for i in range(n):
        for j in range(m):
            e = np.zeros((n, m))
            e[i, j] = 1.0
            cols[:, col] = svec(b @ e.T + e @ b.T)
            col += 1
    return cols


# ---------------------------------------------------------------------------
# the splitting engine


@dataclass
class EngineProgram:
    layout: BlockLayout
    cost: np.ndarray
    views: list
    anchor_view: ConeView = None
    eq_a: np.ndarray = None
    eq_b: np.ndarray = None


@dataclass
class EngineWarm:
    z: list
    u: list
    beta: float


@dataclass
class SolveReport:
    """Outcome of one inner solve."""

    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    status: str  # 'Converged' | 'MaxIters' | 'Infeasible'


class _Factorization:
    """Cached sparse KKT solves for H theta + A' mu = rhs, A theta = b.

    H is reg*I + rho Fa'Fa + beta M'M, which is diagonal-dominant and very
    sparse for the standard lifted programs; one sparse LU of the KKT
    system serves every inner iteration.
    """

    def __init__(self, h_sparse, eq_a):
        n = h_sparse.shape[0]
        self.n_theta = n
        self.eq_a = eq_a
        if eq_a is not None:
            a = sp.csc_matrix(eq_a)
            kkt = sp.bmat([[h_sparse, a.T], [a, None]], format="csc")
            self.n_eq = a.shape[0]
        else:
            kkt = sp.csc_matrix(h_sparse)
            self.n_eq = 0
        self.lu = sp.linalg.splu(kkt)

    def solve(self, rhs, eq_b):
        if self.n_eq == 0:
            return self.lu.solve(rhs)
        full = np.concatenate([rhs, eq_b])
        return self.lu.solve(full)[: self.n_theta]


def _project_cone(view, y, lam_over_beta):
    if view.cone == "psd":
        d = view.shape[0]
        w, v = np.linalg.eigh(symmetrize(y.reshape(view.shape)))
        w = np.maximum(w, 0.0)
        return ((v * w) @ v.T).ravel()
    if view.cone == "nonneg":
        return np.maximum(y, 0.0)
    if view.cone == "l1":
        thr = lam_over_beta * view.weights
        return np.sign(y) * np.maximum(np.abs(y) - thr, 0.0)
    raise ValueError(view.cone)


def solve_engine(program, opts, *, rho=0.0, anchor=None, l1_lam=0.0,
                 warm=None, polish=True, polish_tol=1e-9, polish_max=300):
    """Run the consensus splitting scheme on an EngineProgram.

    Returns (theta, report, warm_state).  `anchor` is the target of the
    proximal term (rho/2)||F_a theta + g_a - anchor||^2 when the program has
    an anchor view; `l1_lam` scales the weights of every 'l1' view.
    """
    views = [v for v in program.views if v.cone != "free"]
    cone_views = [v for v in views if v.cone in ("psd", "nonneg")]
    m_all = sp.vstack([v.f for v in views]).tocsr()
    mt = m_all.T.tocsr()
    g_all = np.concatenate([v.g for v in views])
    seg = np.cumsum([0] + [v.g.size for v in views])
    over_relax = 1.6

    tol = opts.inner_tol
    max_iter = opts.inner_max
    n_theta = program.layout.size

    hm = (mt @ m_all).tocsc()
    ha = None
    anchor_vec = None
    if program.anchor_view is not None and rho > 0.0 and anchor is not None:
        fa = program.anchor_view.f
        ha = (fa.T @ fa).tocsc()
        anchor_vec = np.asarray(anchor, dtype=float).ravel() - program.anchor_view.g
        rhs_anchor = rho * (fa.T @ anchor_vec)
    else:
        rhs_anchor = np.zeros(n_theta)

    beta = warm.beta if warm is not None else max(1.0, rho)
    reg = 1e-12 * max(1.0, beta)

    def factorize(beta):
        h = reg * sp.eye(n_theta, format="csc") + beta * hm
        if ha is not None:
            h = h + rho * ha
        return _Factorization(h.tocsc(), program.eq_a)

    fac = factorize(beta)

    if warm is not None:
        z = warm.z.copy()
        u = warm.u.copy()
    else:
        u = np.zeros(g_all.size)
        z = g_all.copy()
        for i, v in enumerate(views):
            z[seg[i]:seg[i + 1]] = _project_cone(v, z[seg[i]:seg[i + 1]], l1_lam / beta)

    theta = np.zeros(n_theta)
    status = "MaxIters"
    r_norm = d_norm = np.inf
    window_r = np.inf
    window_u = 0.0
    beta_updates = 0
    last_beta_change = 0
    it = 0

    for it in range(1, max_iter + 1):
        rhs = -program.cost + rhs_anchor + beta * (mt @ (z - u - g_all))
        theta = fac.solve(rhs, program.eq_b)

        y = m_all @ theta + g_all
        y_hat = over_relax * y + (1.0 - over_relax) * z
        z_old = z
        z = np.empty_like(y)
        for i, v in enumerate(views):
            sl = slice(seg[i], seg[i + 1])
            z[sl] = _project_cone(v, y_hat[sl] + u[sl], l1_lam / beta)
        u = u + y_hat - z

        r_norm = np.linalg.norm(y - z)
        d_norm = beta * np.linalg.norm(mt @ (z - z_old))
        scale_p = max(np.linalg.norm(y), np.linalg.norm(z), 1.0)
        scale_d = max(beta * np.linalg.norm(mt @ u), 1.0)

        if os.environ.get("SPARSEGAIN_DEBUG_ENGINE") and it % 100 == 0:
            print(f"    engine it={it} r={r_norm:.3e} d={d_norm:.3e} "
                  f"beta={beta} |u|={np.linalg.norm(u):.3e}")

        if r_norm <= tol * scale_p and d_norm <= tol * scale_d:
            status = "Converged"
            break

        # Infeasible programs leave the consensus gap pinned at the distance
        # between the sets while the dual grows without bound.
        if it % 200 == 0:
            u_norm = np.linalg.norm(u)
            if (
                it >= 400
                and it - last_beta_change >= 400
                and r_norm > 0.95 * window_r
                and r_norm > 1e-3 * max(1.0, np.linalg.norm(z))
                and u_norm > window_u * 1.10
            ):
                status = "Infeasible"
                break
            window_r = r_norm
            window_u = u_norm

        if it % 200 == 0 and beta_updates < 3:
            r_rel = r_norm / scale_p
            d_rel = d_norm / scale_d
            if r_rel > 25.0 * d_rel:
                beta *= 4.0
                u = u / 4.0
                fac = factorize(beta)
                beta_updates += 1
                last_beta_change = it
            elif d_rel > 25.0 * r_rel:
                beta /= 4.0
                u = u * 4.0
                fac = factorize(beta)
                beta_updates += 1
                last_beta_change = it

    if polish and status != "Infeasible" and cone_views:
        theta = _polish(program, theta, cone_views, polish_tol, polish_max)

    obj = float(program.cost @ theta)
    if anchor_vec is not None:
        fa = program.anchor_view.f
        obj += 0.5 * rho * float(np.sum((fa @ theta - anchor_vec) ** 2))
    for v in views:
        if v.cone == "l1":
            obj += l1_lam * float(v.weights @ np.abs(v.f @ theta + v.g))

    report = SolveReport(
        iterations=it, primal_residual=float(r_norm), dual_residual=float(d_norm),
        objective=obj, status=status,
    )
    return theta, report, EngineWarm(z=z, u=u, beta=beta)


def _polish(program, theta, cone_views, tol, max_iter):
    """Alternating projections between the equality manifold and the cones."""
    m_c = sp.vstack([v.f for v in cone_views]).tocsr()
    g_c = np.concatenate([v.g for v in cone_views])
    seg = np.cumsum([0] + [v.g.size for v in cone_views])
    n_theta = program.layout.size
    tiny = 1e-10
    h = tiny * sp.eye(n_theta, format="csc") + (m_c.T @ m_c).tocsc()
    fac = _Factorization(h.tocsc(), program.eq_a)
    for _ in range(max_iter):
        y = m_c @ theta + g_c
        z = np.empty_like(y)
        for i, v in enumerate(cone_views):
            z[seg[i]:seg[i + 1]] = _project_cone(v, y[seg[i]:seg[i + 1]], 0.0)
        gap = np.linalg.norm(y - z)
        if gap <= tol * (1.0 + np.linalg.norm(y)):
            break
        rhs = m_c.T @ (z - g_c) + tiny * theta
        theta = fac.solve(rhs, program.eq_b)
    return theta


# ---------------------------------------------------------------------------
# lifted program construction


def _mask_positions(pattern):
    rows, cols = np.nonzero(pattern.mask)
    return rows, cols


def gain_from_theta(theta_k, pattern):
    k = np.zeros(pattern.mask.shape)
    k[pattern.mask] = theta_k
    return k


class LiftedProgram:
    """Reusable subproblem instance for one synthesis problem.

    Construction precomputes the layout, views, and dynamics constraint;
    solve() is then called repeatedly with fresh anchors and l1 weights.
    """

    def __init__(self, problem, opts, include_quadratic=True, gamma=None):
        system = problem.system
        n, m, p = system.n, system.m, system.p
        self.problem = problem
        self.n, self.m, self.p = n, m, p
        self.bound = problem.input_bound
        self.augmented = self.bound is not None and np.isfinite(self.bound.u_max)
        # gamma is a fixed ellipsoid scale chosen outside the convex solve;
        # leaving it free lets the fixed-rank projection zero the whole
        # bottom block row.
        self.gamma = float(gamma) if gamma is not None else None
        if self.augmented and self.gamma is None:
            raise ValueError("augmented program needs a fixed gamma")
        pattern = problem.pattern
        self.pattern = pattern
        self.positions = _mask_positions(pattern)
        d = 2 * n + m

        layout = BlockLayout()
        layout.add("x11", "sym", n)
        layout.add("x12", "full", (n, m))
        layout.add("x22", "sym", m)
        layout.add("k", "vec", int(pattern.count()))
        layout.add("z", "sym", n)
        if self.augmented:
            layout.add("w", "sym", n)
            layout.add("y", "full", (n, m))
            if self.bound.norm_kind == "inf":
                layout.add("v", "sym", m)
        self.layout = layout

        c_mat = system.c_matrix
        eye_n = np.eye(n)

        def square_view(builder, shift):
            builder.block("x11", 0, 0)
            builder.block("x12", 0, n)
            builder.const(eye_n, 0, d - n)
            builder.block("x12", n, 0, transpose=True)
            builder.block("x22", n, n)
            builder.gain_block("k", n, d - n, c_mat, self.positions)
            builder.const(eye_n, d - n, 0)
            builder.gain_block("k", d - n, n, c_mat, self.positions, transpose=True)
            builder.block("z", d - n, d - n)
            if shift:
                builder.const(-shift * eye_n, 0, 0)
            return builder

        # Enforce a hair more than strict_eps so the polished iterate still
        # clears the strictness tolerance.  The cone constraint X >= 0 and
        # the strictness X11 >= eps I are kept separate so fixed-rank points
        # remain feasible.
        self.enforced_eps = opts.strict_eps + 2e-8
        views = [square_view(ViewBuilder(layout, d, d), 0.0).build("psd")]
        strict = ViewBuilder(layout, n, n)
        strict.block("x11", 0, 0).const(-self.enforced_eps * eye_n, 0, 0)
        views.append(strict.build("psd"))

        weights0 = np.ones(int(pattern.count()))
        kb = ViewBuilder(layout, 1, int(pattern.count()))
        _, _, off, size = layout.blocks["k"]
        for i in range(size):
            kb._push(0, i, off + i, 1.0)
        views.append(kb.build("l1", weights=weights0))
        self._l1_view = views[-1]

        if self.augmented:
            views.extend(self._bound_views())
            anchor = ViewBuilder(layout, 3 * n + m, d)
            square_view(anchor, 0.0)
            anchor.const(self.gamma * eye_n, d, 0)
            anchor.block("y", d, n)
            anchor.block("w", d, d - n)
            self.anchor_view = anchor.build("free")
        else:
            self.anchor_view = square_view(ViewBuilder(layout, d, d), 0.0).build("free")

        dyn = lyapunov_operator(system.a_matrix, system.b_matrix)
        ns = svec_len(n)
        eq_a = np.zeros((ns, layout.size))
        eq_a[:, layout.slice("x11")] = dyn[:, :ns]
        eq_a[:, layout.slice("x12")] = dyn[:, ns:]
        eq_b = svec(-problem.noise_cov)

        cost = np.zeros(layout.size)
        if include_quadratic:
            cost[layout.slice("x11")] = svec(symmetrize(problem.q_weight))
            cost[layout.slice("x22")] = svec(symmetrize(problem.r_weight))

        self.program = EngineProgram(
            layout=layout, cost=cost, views=views,
            anchor_view=self.anchor_view, eq_a=eq_a, eq_b=eq_b,
        )

    def _bound_views(self):
        n, m = self.n, self.m
        bound = self.bound
        c_mat = self.problem.system.c_matrix
        views = []
        if bound.norm_kind == "two":
            lmi = ViewBuilder(self.layout, n + m, n + m)
            lmi.block("w", 0, 0)
            lmi.gain_block("k", 0, n, c_mat, self.positions, transpose=True)
            lmi.gain_block("k", n, 0, c_mat, self.positions)
            lmi.const(bound.u_max ** 2 * np.eye(m), n, n)
            views.append(lmi.build("psd"))
        else:
            lmi = ViewBuilder(self.layout, n + m, n + m)
            lmi.block("v", 0, 0)
            lmi.gain_block("k", 0, m, c_mat, self.positions)
            lmi.gain_block("k", m, 0, c_mat, self.positions, transpose=True)
            lmi.block("w", m, m)
            views.append(lmi.build("psd"))
            diag = ViewBuilder(self.layout, 1, m)
            idx = _sym_coord_index(m)
            _, _, off, _ = self.layout.blocks["v"]
            for i in range(m):
                diag._push(0, i, off + idx[(i, i)], -1.0)
                diag.g[i] = bound.u_max ** 2
            views.append(diag.build("nonneg"))
        ell = ViewBuilder(self.layout, 1, 1)
        ell.inner("w", -np.outer(bound.x0, bound.x0), 0, 0)
        ell.g[0] = 1.0
        views.append(ell.build("nonneg"))
        return views

    @property
    def consensus_shape(self):
        n, m = self.n, self.m
        return (3 * n + m, 2 * n + m) if self.augmented else (2 * n + m, 2 * n + m)

    def set_weights(self, weights):
        self._l1_view.weights = np.asarray(weights, dtype=float)[self.pattern.mask]

    def extract(self, theta):
        blocks = self.layout.unpack(theta)
        base = LiftedVariable(
            x11=blocks["x11"], x12=blocks["x12"], x22=blocks["x22"],
            k_gain=gain_from_theta(blocks["k"], self.pattern), z_block=blocks["z"],
        )
        if not self.augmented:
            return base
        return AugmentedLifted(
            base=base, gamma=self.gamma, w_inv=blocks["w"], y_aux=blocks["y"],
            v_diag=blocks.get("v"),
        )

    def consensus_matrix(self, theta):
        shape = self.consensus_shape
        return (self.anchor_view.f @ theta + self.anchor_view.g).reshape(shape)

    def pack_point(self, var):
        values = {}
        base = var.base if isinstance(var, AugmentedLifted) else var
        values["x11"] = base.x11
        values["x12"] = base.x12
        values["x22"] = base.x22
        values["k"] = base.k_gain[self.pattern.mask]
        values["z"] = base.z_block
        if self.augmented:
            values["w"] = var.w_inv
            values["y"] = var.y_aux
            if self.bound.norm_kind == "inf":
                kc = base.k_gain @ self.problem.system.c_matrix
                v = var.v_diag
                if v is None:
                    v = kc @ np.linalg.solve(symmetrize(var.w_inv), kc.T)
                    v = symmetrize(v) + 1e-6 * np.eye(self.m)
                values["v"] = v
        return self.layout.pack(values)

    def solve(self, anchor, opts, *, rho=None, lam=None, warm=None,
              polish=True, polish_max=300):
        rho = opts.penalty_rho if rho is None else rho
        lam = self.problem.lam if lam is None else lam
        theta, report, warm_out = solve_engine(
            self.program, opts, rho=rho,
            anchor=None if anchor is None else np.asarray(anchor).ravel(),
            l1_lam=lam, warm=warm, polish=polish, polish_max=polish_max,
        )
        return self.extract(theta), report, warm_out


# ---------------------------------------------------------------------------
# spec-level operations


@dataclass(frozen=True)
class ConvexSubproblem:
    """One proximal X-update instance."""

    problem: object
    anchor: np.ndarray
    penalty_rho: float
    weight_matrix: np.ndarray
    include_quadratic: bool = True
    extra_lmis: tuple = ()


def prox_weighted_l1(k, weights, step, lam=1.0):
    """Entrywise soft threshold of K at step * lam * weights."""
    k = np.asarray(k, dtype=float)
    thr = step * lam * np.asarray(weights, dtype=float)
    return np.sign(k) * np.maximum(np.abs(k) - thr, 0.0)


def project_affine_dynamics(v, system, noise_cov):
    """Least-squares projection of (X11, X12) onto the noise-balance constraint.

    Minimizes the change to (x11, x12) subject to
    A X11 + X11 A' + B X12' + X12 B' + N = 0; other blocks pass through.
    When the operator does not reach N for any (X11, X12), the nearest
    point in its range is used and a ResidualWarning is issued.
    """
    n = system.n
    dyn = lyapunov_operator(system.a_matrix, system.b_matrix)
    x = np.concatenate([svec(v.x11), np.asarray(v.x12, dtype=float).ravel()])
    b = svec(-np.asarray(noise_cov, dtype=float))
    gram = dyn @ dyn.T
    correction = dyn.T @ np.linalg.lstsq(gram, dyn @ x - b, rcond=None)[0]
    x_new = x - correction
    resid = np.linalg.norm(dyn @ x_new - b)
    if resid > 1e-9 * (1.0 + np.linalg.norm(noise_cov)):
        warnings.warn(
            f"dynamics constraint met only in least squares (residual {resid:.3e})",
            ResidualWarning,
        )
    ns = svec_len(n)
    return replace(v, x11=smat(x_new[:ns], n), x12=x_new[ns:].reshape(v.x12.shape))


def solve_subproblem(sub, opts, *, warm=None, program=None, polish=True):
    """Solve the proximal X-update over the lifted convex set.

    Returns (LiftedVariable-or-AugmentedLifted, SolveReport).  The result
    satisfies the dynamics constraint exactly, has its gain masked by
    construction, and is PSD up to the polishing tolerance.
    """
    if program is None:
        program = LiftedProgram(sub.problem, opts, include_quadratic=sub.include_quadratic)
    program.set_weights(sub.weight_matrix)
    var, report, _ = program.solve(
        sub.anchor, opts, rho=sub.penalty_rho, polish=polish,
        lam=sub.problem.lam if sub.include_quadratic else 0.0, warm=warm,
    )
    return var, report


def solve_sdp(objective, constraints, opts, *, warm=None):
    """Run a PSD-relaxed lifted program with a declarative constraint list.

    `objective` maps block names ('x11', 'x22', 'matrix', ...) to
    coefficient matrices of linear trace terms.  Constraints are tuples:

    - ('dynamics_eq', system, N): noise-balance equality
    - ('dynamics_strict', system, eps): Lyapunov inequality <= -eps I
    - ('lifted_psd', system, pattern, shift): assembled matrix PSD
    - ('x11_strict', n, eps): X11 >= eps I
    - ('block_ge'|'block_le', name, matrix): one-block bounds

    Returns (LiftedVariable, SolveReport).
    """
    system = pattern = None
    for con in constraints:
        if con[0] in ("dynamics_eq", "dynamics_strict", "lifted_psd"):
            system = con[1]
        if con[0] == "lifted_psd":
            pattern = con[2]
    if system is None:
        raise ValueError("constraints must mention the system")
    n, m = system.n, system.m
    if pattern is None:
        raise ValueError("constraints must include a lifted_psd view")
    d = 2 * n + m
    positions = _mask_positions(pattern)

    layout = BlockLayout()
    layout.add("x11", "sym", n)
    layout.add("x12", "full", (n, m))
    layout.add("x22", "sym", m)
    layout.add("k", "vec", int(pattern.count()))
    layout.add("z", "sym", n)

    eye_n = np.eye(n)
    views = []
    eq_a = eq_b = None
    dyn = lyapunov_operator(system.a_matrix, system.b_matrix)
    ns = svec_len(n)

    for con in constraints:
        tag = con[0]
        if tag == "dynamics_eq":
            eq_a = np.zeros((ns, layout.size))
            eq_a[:, layout.slice("x11")] = dyn[:, :ns]
            eq_a[:, layout.slice("x12")] = dyn[:, ns:]
            eq_b = svec(-np.asarray(con[2], dtype=float))
        elif tag == "dynamics_strict":
            vb = ViewBuilder(layout, n, n)
            vb.sym_operator(-dyn, ["x11", "x12"])
            vb.const(-con[2] * eye_n, 0, 0)
            views.append(vb.build("psd"))
        elif tag == "lifted_psd":
            shift = con[3] if len(con) > 3 else 0.0
            vb = ViewBuilder(layout, d, d)
            vb.block("x11", 0, 0).block("x12", 0, n).const(eye_n, 0, d - n)
            vb.block("x12", n, 0, transpose=True).block("x22", n, n)
            vb.gain_block("k", n, d - n, system.c_matrix, positions)
            vb.const(eye_n, d - n, 0)
            vb.gain_block("k", d - n, n, system.c_matrix, positions, transpose=True)
            vb.block("z", d - n, d - n)
            if shift:
                vb.const(-shift * eye_n, 0, 0)
            views.append(vb.build("psd"))
        elif tag == "x11_strict":
            vb = ViewBuilder(layout, n, n)
            vb.block("x11", 0, 0).const(-con[2] * eye_n, 0, 0)
            views.append(vb.build("psd"))
        elif tag in ("block_ge", "block_le"):
            name, bound_mat = con[1], np.asarray(con[2], dtype=float)
            dim = bound_mat.shape[0]
            sign = 1.0 if tag == "block_ge" else -1.0
            vb = ViewBuilder(layout, dim, dim)
            vb.block(name, 0, 0, coeff=sign)
            vb.const(-sign * bound_mat, 0, 0)
            views.append(vb.build("psd"))
        else:
            raise ValueError(f"unknown constraint {tag!r}")

    cost = np.zeros(layout.size)
    for name, coef in objective.items():
        if name == "matrix":
            vb = views[[i for i, c in enumerate(constraints)
                        if c[0] == "lifted_psd"][0]]
            cost += vb.f.T @ svec_full_weight(coef)
        else:
            kind = layout.blocks[name][0]
            if kind == "sym":
                cost[layout.slice(name)] += svec(symmetrize(coef))
            else:
                cost[layout.slice(name)] += np.asarray(coef, dtype=float).ravel()

    prog = EngineProgram(layout=layout, cost=cost, views=views,
                         anchor_view=None, eq_a=eq_a, eq_b=eq_b)
    theta, report, warm_out = solve_engine(prog, opts, warm=warm)
    blocks = layout.unpack(theta)
    var = LiftedVariable(
        x11=blocks["x11"], x12=blocks["x12"], x22=blocks["x22"],
        k_gain=gain_from_theta(blocks["k"], pattern), z_block=blocks["z"],
    )
    return var, report


def svec_full_weight(mat):
    """Row-major flattening used when a cost is given on a full matrix view."""
    return np.asarray(mat, dtype=float).ravel()
