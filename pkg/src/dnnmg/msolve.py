"""Newton / GMRES / geometric multigrid / cell-based Vanka solver stack.

The linear systems of each Newton iteration are solved by right-preconditioned
GMRES with one multigrid V-cycle as the preconditioner.  The smoother solves
the dense (d+1)*3^d saddle-point block of every cell against the sweep-start
residual (Jacobi coupling), averages contributions on shared dofs and applies
a damped update; the coarsest level is solved by dense LU.  The Jacobian (and
with it the whole preconditioner) is reused across iterations and time steps
until the Newton contraction rate deteriorates.
"""

import numpy as np
import scipy.linalg
import scipy.sparse.linalg
from dataclasses import dataclass, field


@dataclass
class NewtonSettings:
    rho_max: float = 0.1
    tol_rel: float = 1e-8
    tol_abs: float = 1e-12
    max_iter: int = 20
    damping_depth: int = 5


@dataclass
class MgSettings:
    pre_smooth: int = 6
    post_smooth: int = 6
    coarse_level: int = 0
    vanka_damping: float = 0.7
    cycles_per_application: int = 1


@dataclass
class GmresSettings:
    tol_rel: float = 1e-4
    restart: int = 30
    max_iter: int = 200


class NewtonError(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(f"{msg} (residual history: {[f'{r:.3e}' for r in history]})")
        self.history = history


# -- Vanka smoother --------------------------------------------------------------

class VankaData:
    """Cell-local blocks of a level Jacobian, prefactored.

    Blocks are gathered straight from the CSR data array via the assembler's
    canonical pattern positions.  Singular local blocks are regularized by a
    1e-12 diagonal shift and their cell ids flagged.
    """

    def __init__(self, asm, J):
        nc, ndl = asm.n_cells, asm.ndl
        self.dofs = asm.cell_dofs
        counts = np.bincount(self.dofs.reshape(-1), minlength=asm.space.ndof)
        self.weight = 1.0 / counts
        blocks = J.data[asm.flat_pos].reshape(nc, ndl, ndl)
        self.flagged = []
        try:
            self.inv = np.linalg.inv(blocks)
        except np.linalg.LinAlgError:
            inv = np.empty_like(blocks)
            for c in range(nc):
                try:
                    inv[c] = np.linalg.inv(blocks[c])
                except np.linalg.LinAlgError:
                    inv[c] = np.linalg.inv(blocks[c] + 1e-12 * np.eye(ndl))
                    self.flagged.append(c)
            self.inv = inv
        self.ndof = asm.space.ndof


def vanka_smooth(J, vanka, x, b, sweeps, damping):
    """Jacobi-coupled cell-Vanka sweeps; all cells read the sweep-start iterate."""
    for _ in range(sweeps):
        r = b - J @ x
        rl = r[vanka.dofs]
        dl = np.einsum('cij,cj->ci', vanka.inv, rl)
        upd = np.bincount(vanka.dofs.reshape(-1), weights=dl.reshape(-1),
                          minlength=vanka.ndof)
        x = x + damping * (vanka.weight * upd)
    return x


# -- geometric multigrid -----------------------------------------------------------

class LevelSystem:
    def __init__(self, J, vanka, mask):
        self.J = J
        self.vanka = vanka
        self.mask = mask


class MgPreconditioner:
    """V-cycle over assembled level systems; dense LU on the coarsest level."""

    def __init__(self, systems, prolongs, settings=None):
        self.systems = systems            # index 0 = coarsest
        self.prolongs = prolongs          # prolongs[l]: level l -> l+1, dofs
        self.cfg = settings or MgSettings()
        self._coarse_lu = scipy.linalg.lu_factor(systems[0].J.toarray())

    @property
    def top(self):
        return len(self.systems) - 1

    def coarse_solve(self, b):
        return scipy.linalg.lu_solve(self._coarse_lu, b)

    def vcycle(self, l, x, b):
        if l == 0:
            return self.coarse_solve(b)
        sysl = self.systems[l]
        x = vanka_smooth(sysl.J, sysl.vanka, x, b, self.cfg.pre_smooth,
                         self.cfg.vanka_damping)
        defect = b - sysl.J @ x
        coarse = self.prolongs[l - 1].T @ defect
        coarse[self.systems[l - 1].mask] = 0.0
        corr = self.vcycle(l - 1, np.zeros_like(coarse), coarse)
        fine = self.prolongs[l - 1] @ corr
        fine[sysl.mask] = 0.0
        x = x + fine
        return vanka_smooth(sysl.J, sysl.vanka, x, b, self.cfg.post_smooth,
                            self.cfg.vanka_damping)

    def apply(self, r):
        z = np.zeros_like(r)
        for _ in range(self.cfg.cycles_per_application):
            z = self.vcycle(self.top, z, r)
        return z


def vcycle_contraction(mg, rhs, n_cycles=8):
    """Per-cycle residual reduction factors of the top-level V-cycle."""
    J = mg.systems[mg.top].J
    x = np.zeros_like(rhs)
    norms = [np.linalg.norm(rhs)]
    for _ in range(n_cycles):
        x = mg.vcycle(mg.top, x, rhs)
        norms.append(np.linalg.norm(rhs - J @ x))
    norms = np.asarray(norms)
    return norms[1:] / norms[:-1]


# -- GMRES --------------------------------------------------------------------------

def gmres(matvec, b, precond=None, x0=None, tol_rel=1e-4, restart=30, max_iter=200):
    """Right-preconditioned restarted GMRES.

    Returns (x, info) with info = dict(iterations, residuals, converged,
    stagnated).  Residual norms are those of the unpreconditioned system.
    """
    n = b.shape[0]
    if precond is None:
        precond = lambda v: v
    x = np.zeros(n) if x0 is None else x0.copy()
    r = b - matvec(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    target = tol_rel * (beta if beta > 0 else 1.0)
    info = {"iterations": 0, "residuals": [beta], "converged": beta <= target,
            "stagnated": False}
    if info["converged"]:
        return x, info
    total = 0
    while total < max_iter:
        V = np.zeros((restart + 1, n))
        Z = np.zeros((restart, n))
        H = np.zeros((restart + 1, restart))
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        g = np.zeros(restart + 1)
        V[0] = r / beta
        g[0] = beta
        cycle_start = beta
        j = -1
        for j in range(restart):
            Z[j] = precond(V[j])
            w = np.array(matvec(Z[j]), dtype=float)   # copy: matvec may alias
            for i in range(j + 1):
                H[i, j] = V[i] @ w
                w -= H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            if H[j + 1, j] > 1e-300:
                V[j + 1] = w / H[j + 1, j]
            # apply stored Givens rotations, then the new one
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            rho = np.hypot(H[j, j], H[j + 1, j])
            if rho < 1e-300:                           # breakdown: no progress
                info["stagnated"] = True
                j -= 1
                break
            cs[j], sn[j] = H[j, j] / rho, H[j + 1, j] / rho
            H[j, j] = rho
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            res = abs(g[j + 1])
            info["residuals"].append(res)
            if res <= target or total >= max_iter:
                break
        # solution update of this cycle
        m = j + 1
        if m == 0:
            info["iterations"] = total
            return x, info
        y = scipy.linalg.solve_triangular(H[:m, :m], g[:m], lower=False)
        x = x + Z[:m].T @ y
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        info["iterations"] = total
        if beta <= target:
            info["converged"] = True
            return x, info
        if beta >= cycle_start * (1.0 - 1e-12):
            info["stagnated"] = True
            return x, info
    info["iterations"] = total
    return x, info


# -- linear solver wrappers -----------------------------------------------------------

class MgGmresSolver:
    """GMRES preconditioned by one multigrid V-cycle."""

    def __init__(self, J, mg, settings=None):
        self.J = J
        self.mg = mg
        self.cfg = settings or GmresSettings()
        self.last_info = None
        self.total_iterations = 0
        self.solves = 0

    def solve(self, r):
        x, info = gmres(lambda v: self.J @ v, r, precond=self.mg.apply,
                        tol_rel=self.cfg.tol_rel, restart=self.cfg.restart,
                        max_iter=self.cfg.max_iter)
        self.last_info = info
        self.total_iterations += info["iterations"]
        self.solves += 1
        return x


class DirectSolver:
    """Sparse LU, for desk-scale runs and as a reference path."""

    def __init__(self, J):
        self.lu = scipy.sparse.linalg.splu(J.tocsc())
        self.total_iterations = 0
        self.solves = 0

    def solve(self, r):
        self.solves += 1
        return self.lu.solve(r)


# -- Newton -----------------------------------------------------------------------------

@dataclass
class NewtonStats:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    jacobian_builds: int = 0
    gmres_iterations: int = 0
    damping_used: list = field(default_factory=list)


def newton_solve(x0, residual_fn, jacobian_fn, settings=None, solver=None):
    """Damped Newton with contraction-gated Jacobian reuse.

    residual_fn(x) -> r with constrained rows zeroed; jacobian_fn(x) -> a
    linear solver object with .solve(r).  A solver passed in (e.g. kept from
    the previous time step) is reused until the contraction rate rho exceeds
    rho_max.  Returns (x, stats, solver).
    """
    cfg = settings or NewtonSettings()
    stats = NewtonStats()
    x = x0.copy()
    r = residual_fn(x)
    rn = np.linalg.norm(r)
    stats.residuals.append(rn)
    tol = max(cfg.tol_abs, cfg.tol_rel * rn)
    if rn <= tol:
        return x, stats, solver
    if solver is None:
        solver = jacobian_fn(x)
        stats.jacobian_builds += 1
    rebuilt_here = stats.jacobian_builds > 0
    for _ in range(cfg.max_iter):
        gmres_before = getattr(solver, "total_iterations", 0)
        delta = solver.solve(r)
        stats.gmres_iterations += getattr(solver, "total_iterations", 0) - gmres_before
        eps, best = 1.0, None
        for _ in range(cfg.damping_depth):
            xt = x + eps * delta
            rt = residual_fn(xt)
            rtn = np.linalg.norm(rt)
            if best is None or rtn < best[2]:
                best = (xt, rt, rtn, eps)
            if rtn < rn:
                break
            eps *= 0.5
        xt, rt, rtn, eps = best
        if rtn >= rn:
            if rebuilt_here:
                raise NewtonError("Newton step failed to reduce the residual",
                                  stats.residuals)
            solver = jacobian_fn(x)
            stats.jacobian_builds += 1
            rebuilt_here = True
            continue
        rho = rtn / rn
        x, r, rn = xt, rt, rtn
        stats.iterations += 1
        stats.residuals.append(rn)
        stats.damping_used.append(eps)
        if rn <= tol:
            return x, stats, solver
        if rho > cfg.rho_max:
            solver = jacobian_fn(x)
            stats.jacobian_builds += 1
            rebuilt_here = True
        else:
            rebuilt_here = False
    raise NewtonError(f"Newton did not converge in {cfg.max_iter} iterations",
                      stats.residuals)
