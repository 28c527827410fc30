"""Patch-local restriction/extension and the network prediction pipeline.

A global fine-level vector is gathered patch-by-patch into the rows of a
batch matrix (pure index gather, no arithmetic); per-patch vectors are pushed
back by a scatter-add followed by the componentwise valence scaling mu (the
reciprocal of the number of patches sharing each dof), which averages the
predictions of shared dofs.  The network maps [state | residual | geometry]
rows to velocity updates; pressure dofs are never predicted and stay zero.
"""

import numpy as np

from . import net as netmod


def velocity_slots(patchset):
    """Local patch-row indices holding velocity dofs (node-major layout)."""
    ncomp = patchset.ncomp
    base = np.arange(patchset.nodes_per_patch) * ncomp
    return (base[:, None] + np.arange(1, ncomp)[None, :]).reshape(-1)


def local_restrict(x, patchset):
    """Rows of patch-local values of a global fine-level vector."""
    x = np.asarray(x)
    if x.shape[0] != patchset.mu.shape[0]:
        raise ValueError(f"vector length {x.shape[0]} does not match the "
                         f"fine level ({patchset.mu.shape[0]} dofs)")
    return x[patchset.dof_table]


def global_extend(rows, patchset, mu=None):
    """Scatter-add per-patch rows and average shared dofs by mu."""
    mu = patchset.mu if mu is None else mu
    out = np.bincount(patchset.dof_table.reshape(-1),
                      weights=np.asarray(rows, dtype=float).reshape(-1),
                      minlength=mu.shape[0])
    return mu * out


def input_width(patchset):
    return 2 * patchset.ndof_patch + patchset.n_geo


def output_width(patchset):
    return (patchset.ncomp - 1) * patchset.nodes_per_patch


def assemble_network_input(x_tilde, r, patchset):
    """Per-patch feature rows [state | residual | geometry]."""
    return np.concatenate([local_restrict(x_tilde, patchset),
                           local_restrict(r, patchset),
                           patchset.geom_table], axis=1)


def predict_correction(model, x_tilde, r, patchset, dirichlet_mask=None):
    """Global velocity defect predicted patchwise; pressure block is zero.

    The model must be in eval mode (deterministic batch-norm statistics).
    """
    if model.mode != "eval":
        raise ValueError("predict_correction requires an eval-mode model")
    n_in = input_width(patchset)
    n_out = output_width(patchset)
    if model.arch.n_in != n_in or model.arch.n_out != n_out:
        raise ValueError(
            f"model architecture ({model.arch.n_in} -> {model.arch.n_out}) does "
            f"not match the patch layout ({n_in} -> {n_out})")
    X = assemble_network_input(x_tilde, r, patchset)
    pred = netmod.forward(model, X)
    rows = np.zeros((len(patchset), patchset.ndof_patch))
    rows[:, velocity_slots(patchset)] = pred
    d = global_extend(rows, patchset)
    if dirichlet_mask is not None:
        d[dirichlet_mask] = 0.0
    return d


def patch_targets(v_ref, x_tilde, patchset):
    """Training targets: the fine-minus-prolongated velocity per patch."""
    diff = np.asarray(v_ref) - np.asarray(x_tilde)
    return local_restrict(diff, patchset)[:, velocity_slots(patchset)]
