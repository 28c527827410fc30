"""Drag/lift functionals, error measures, lift spectrum, summary statistics.

Drag and lift are evaluated by testing the momentum weak form with the
discrete characteristic function of the obstacle-boundary dofs (the volume
form of the boundary force, super-convergent compared to direct surface
quadrature).  A direct surface-quadrature evaluation is provided as the
independent cross-check; both use the convention that the normal points out
of the obstacle into the fluid, which makes the channel-benchmark drag
positive.
"""

import numpy as np

from . import mesh as meshmod
from .elements import gauss_rule, shape_q2, grad_q2, lattice


def _momentum_form(asm, x_values, nu, f_nodal=None, x_prev=None, k=None):
    """Momentum weak rows of the (quasi-)stationary residual, unconstrained.

    (v.grad v, phi) + nu (grad v, grad phi) - (p, div phi) - (f, phi),
    plus (1/k)(v - v_prev, phi) when the previous state is given.
    """
    f = asm.fields(x_values)
    v, gv, p = f["v"], f["gv"], f["p"]
    conv = np.einsum('cqj,cqij->cqi', v, gv)
    acc = conv
    if x_prev is not None:
        vp = asm.fields(x_prev)["v"]
        acc = acc + (v - vp) / k
    if f_nodal is not None:
        floc = np.asarray(f_nodal)[asm.space.cell_nodes]
        acc = acc - np.einsum('qa,cai->cqi', asm.N, floc)
    w = asm.w
    mom = np.einsum('cq,cqi,qa->cai', w, acc, asm.N)
    mom += nu * np.einsum('cq,cqij,cqaj->cai', w, gv, asm.G)
    mom -= np.einsum('cq,cq,cqai->cai', w, p, asm.G)
    cont = np.zeros((asm.n_cells, asm.nloc))
    return asm.scatter_dual(cont, mom)


def drag_lift(asm, x, nu, f_nodal=None, x_prev=None, k=None):
    """Volume (Babuska-Miller) evaluation of the obstacle drag and lift.

    The stationary form matches the surface integral of the momentum flux for
    any smooth field whose forcing f closes the stationary equation; passing
    (x_prev, k) adds the discrete time-derivative term for time-accurate
    functionals during a run.
    """
    space = asm.space
    obst = space.nodes_with_tag(meshmod.OBSTACLE)
    if obst.size == 0:
        raise ValueError("mesh has no obstacle-tagged boundary")
    dual = _momentum_form(asm, x.values if hasattr(x, "values") else x, nu,
                          f_nodal=f_nodal,
                          x_prev=x_prev.values if hasattr(x_prev, "values") else x_prev,
                          k=k)
    m = dual.reshape(space.n_nodes, space.n_comp)
    return tuple(-float(m[obst, 1 + i].sum()) for i in range(asm.dim))[:2]


def drag_lift_surface(asm, x, nu, n_gauss=6):
    """Direct surface quadrature of the momentum flux over the obstacle.

    Integrates (nu dv/dn - p n) . e_dir with the normal pointing out of the
    obstacle into the fluid; the independent oracle for drag_lift.
    """
    space = asm.space
    dim = space.dim
    lvl = space.hierarchy.levels[space.level]
    xv = x.values if hasattr(x, "values") else x
    m = xv.reshape(space.n_nodes, space.n_comp)
    q1, w1 = gauss_rule(dim - 1, n_gauss) if dim > 1 else (None, None)
    out = np.zeros(dim)
    for (c, fid, tag) in lvl.boundary_faces:
        if tag != meshmod.OBSTACLE:
            continue
        axis, side = fid // 2, fid % 2
        free = [a for a in range(dim) if a != axis]
        ref = np.empty((q1.shape[0], dim))
        ref[:, axis] = float(side)
        for j, a in enumerate(free):
            ref[:, a] = q1[:, j]
        N = shape_q2(ref, dim)
        dN = grad_q2(ref, dim)
        Xc = space.nodes[space.cell_nodes[c]]
        J = np.einsum('qaj,ai->qij', dN, Xc)
        detJ = np.linalg.det(J)
        Jinv = np.linalg.inv(J)
        # Nanson: n dS = det(J) J^{-T} e_axis dA; e points out of the cell
        sign = -1.0 if side == 0 else 1.0
        nvec = sign * detJ[:, None] * Jinv[:, axis, :]
        # flip: out of the obstacle = into the fluid = opposite of cell-outward
        nvec = -nvec
        vloc = m[space.cell_nodes[c], 1:]
        ploc = m[space.cell_nodes[c], 0]
        gvq = np.einsum('qaj,ai->qij', np.einsum('qak,qkj->qaj', dN, Jinv), vloc)
        pq = N @ ploc
        dvdn = np.einsum('qij,qj->qi', gvq, nvec)
        flux = nu * dvdn - pq[:, None] * nvec
        out += np.einsum('q,qi->i', w1, flux)
    return tuple(float(v) for v in out[:2])


# -- error measures --------------------------------------------------------------------

def relative_errors(x_test, x_ref, space):
    """(e_v, e_p): Euclidean-norm ratios of the velocity/pressure blocks."""
    mt = x_test.values.reshape(space.n_nodes, space.n_comp)
    mr = x_ref.values.reshape(space.n_nodes, space.n_comp)
    nv = np.linalg.norm(mr[:, 1:])
    npp = np.linalg.norm(mr[:, 0])
    if nv == 0.0 or npp == 0.0:
        raise ZeroDivisionError("reference state has a zero-norm block")
    ev = np.linalg.norm(mt[:, 1:] - mr[:, 1:]) / nv
    ep = np.linalg.norm(mt[:, 0] - mr[:, 0]) / npp
    return float(ev), float(ep)


def time_integrated_error(diff_norms, ref_norms, k):
    """sqrt( sum ||diff||^2 k / sum ||ref||^2 k ), the rectangle rule in time."""
    diff_norms = np.asarray(diff_norms, dtype=float)
    ref_norms = np.asarray(ref_norms, dtype=float)
    if diff_norms.size == 0:
        raise ValueError("empty series")
    den = float(np.sum(ref_norms ** 2) * k)
    if den == 0.0:
        raise ZeroDivisionError("zero reference series")
    return float(np.sqrt(np.sum(diff_norms ** 2) * k / den))


def lift_spectrum(series, k):
    """One-sided amplitude spectrum of a functional series (mean removed).

    Returns (frequencies_hz, amplitudes); amplitudes use the one-sided
    convention 2|X_m|/n (no doubling of the zero bin).
    """
    y = np.asarray(series, dtype=float)
    if y.size < 16:
        raise ValueError("need at least 16 samples for a spectrum")
    y = y - y.mean()
    X = np.fft.rfft(y)
    freq = np.fft.rfftfreq(y.size, d=k)
    amp = np.abs(X) * 2.0 / y.size
    amp[0] = np.abs(X[0]) / y.size
    if y.size % 2 == 0:
        amp[-1] = np.abs(X[-1]) / y.size
    return freq, amp


def summarize(times, series, window):
    """(min, max, mean, amplitude) over a time window; amp = max - min."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(series, dtype=float)
    lo, hi = window
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if not np.any(sel):
        raise ValueError(f"empty window {window}")
    ys = y[sel]
    return (float(ys.min()), float(ys.max()), float(ys.mean()),
            float(ys.max() - ys.min()))


def trajectory_errors(traj_test, traj_ref, space, embed=None):
    """Per-step velocity/pressure difference and reference norms of two runs.

    traj_test may live on a coarser level; `embed` maps its dof vectors to
    the reference level.  Returns dict of arrays keyed by t, dv, dp, rv, rp.
    """
    n = min(traj_test.n_steps, traj_ref.n_steps)
    t = np.empty(n)
    dv = np.empty(n)
    dp = np.empty(n)
    rv = np.empty(n)
    rp = np.empty(n)
    for i in range(1, n + 1):
        xt = traj_test.values(i)
        if embed is not None:
            xt = embed(xt)
        mr = traj_ref.values(i).reshape(space.n_nodes, space.n_comp)
        mt = xt.reshape(space.n_nodes, space.n_comp)
        t[i - 1] = traj_ref.time(i)
        dv[i - 1] = np.linalg.norm(mt[:, 1:] - mr[:, 1:])
        dp[i - 1] = np.linalg.norm(mt[:, 0] - mr[:, 0])
        rv[i - 1] = np.linalg.norm(mr[:, 1:])
        rp[i - 1] = np.linalg.norm(mr[:, 0])
    return {"t": t, "dv": dv, "dp": dp, "rv": rv, "rp": rp}
