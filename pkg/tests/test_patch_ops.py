import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnnmg import mesh as meshmod
from dnnmg.net import Architecture, MlpModel, zero_weights
from dnnmg.patch_ops import (local_restrict, global_extend, input_width,
                             output_width, assemble_network_input,
                             predict_correction, velocity_slots, patch_targets)


@pytest.fixture(scope="module")
def ps2(request):
    h = meshmod.build_template_mesh("channel_cylinder_2d", growth=2.0)
    meshmod.refine_uniform(h)
    meshmod.refine_uniform(h)
    return meshmod.build_patches(h, 0, 1)


def test_local_restrict_is_pure_gather(ps2):
    n = ps2.mu.shape[0]
    x = np.arange(n, dtype=float)
    rows = local_restrict(x, ps2)
    assert np.array_equal(rows, ps2.dof_table.astype(float))
    const = local_restrict(np.full(n, 3.25), ps2)
    assert np.all(const == 3.25)


def test_local_restrict_length_mismatch(ps2):
    with pytest.raises(ValueError, match="length"):
        local_restrict(np.zeros(ps2.mu.shape[0] + 1), ps2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_extend_restrict_identity_property(ps2, seed):
    x = np.random.default_rng(seed).standard_normal(ps2.mu.shape[0])
    back = global_extend(local_restrict(x, ps2), ps2)
    assert np.abs(back - x).max() < 1e-14


def test_valence_scaling_counts(ps2):
    inv = 1.0 / ps2.mu
    assert np.all(ps2.mu > 0) and np.all(ps2.mu <= 1.0)
    assert np.abs(inv - np.round(inv)).max() == 0.0
    counts = np.zeros_like(ps2.mu)
    for p in ps2.patches:
        counts[p.local_to_global] += 1.0
    assert np.array_equal(counts, inv)


def test_shared_dof_average(ps2):
    # one patch contributes a, another sharing the dof contributes 0 -> a/valence
    dof = int(np.nonzero(1.0 / ps2.mu >= 2)[0][0])
    owners = np.nonzero((ps2.dof_table == dof).any(axis=1))[0]
    assert owners.size >= 2
    rows = np.zeros((len(ps2), ps2.ndof_patch))
    slot = np.nonzero(ps2.dof_table[owners[0]] == dof)[0][0]
    rows[owners[0], slot] = 5.0
    out = global_extend(rows, ps2)
    assert out[dof] == pytest.approx(5.0 / owners.size, rel=1e-14)
    rows[:] = 0.0
    assert np.all(global_extend(rows, ps2) == 0.0)


def test_network_widths_2d_3d(ps2, box3d):
    assert input_width(ps2) == 64 and output_width(ps2) == 18
    ps31 = meshmod.build_patches(box3d, 0, 1)
    ps32 = meshmod.build_patches(box3d, 0, 2)
    assert input_width(ps31) == 240 and output_width(ps31) == 81
    assert input_width(ps32) == 1024 and output_width(ps32) == 375


def test_assemble_network_input_layout(ps2, rng):
    n = ps2.mu.shape[0]
    xt = rng.standard_normal(n)
    r = rng.standard_normal(n)
    X = assemble_network_input(xt, r, ps2)
    w = ps2.ndof_patch
    assert X.shape == (len(ps2), 2 * w + ps2.n_geo)
    assert np.array_equal(X[:, :w], local_restrict(xt, ps2))
    assert np.array_equal(X[:, w:2 * w], local_restrict(r, ps2))
    assert np.array_equal(X[:, 2 * w:], ps2.geom_table)
    Xz = assemble_network_input(np.zeros(n), np.zeros(n), ps2)
    assert np.all(Xz[:, :2 * w] == 0.0)
    assert np.array_equal(Xz[:, 2 * w:], ps2.geom_table)


def test_zero_weight_model_zero_defect(ps2, rng):
    model = zero_weights(MlpModel(
        Architecture(input_width(ps2), 12, 2, output_width(ps2)), seed=0)).eval()
    n = ps2.mu.shape[0]
    d = predict_correction(model, rng.standard_normal(n), rng.standard_normal(n), ps2)
    assert np.all(d == 0.0)


def test_predicted_defect_pressure_block_zero(ps2, rng):
    model = MlpModel(Architecture(input_width(ps2), 12, 2, output_width(ps2)),
                     seed=3).eval()
    n = ps2.mu.shape[0]
    d = predict_correction(model, rng.standard_normal(n), rng.standard_normal(n), ps2)
    assert np.abs(d).max() > 0.0
    assert np.all(d.reshape(-1, ps2.ncomp)[:, 0] == 0.0)


def test_prediction_invariant_under_patch_reordering(ps2, rng):
    import copy
    model = MlpModel(Architecture(input_width(ps2), 12, 2, output_width(ps2)),
                     seed=3).eval()
    n = ps2.mu.shape[0]
    xt, r = rng.standard_normal(n), rng.standard_normal(n)
    d1 = predict_correction(model, xt, r, ps2)
    perm = rng.permutation(len(ps2))
    shuffled = copy.copy(ps2)
    shuffled.dof_table = ps2.dof_table[perm]
    shuffled.geom_table = ps2.geom_table[perm]
    d2 = predict_correction(model, xt, r, shuffled)
    assert np.abs(d1 - d2).max() < 1e-12


def test_model_patch_mismatch_rejected(ps2, rng):
    model = MlpModel(Architecture(10, 8, 2, 4), seed=0).eval()
    n = ps2.mu.shape[0]
    with pytest.raises(ValueError, match="architecture"):
        predict_correction(model, np.zeros(n), np.zeros(n), ps2)
    tr_model = MlpModel(Architecture(input_width(ps2), 8, 2, output_width(ps2)),
                        seed=0).train()
    with pytest.raises(ValueError, match="eval"):
        predict_correction(tr_model, np.zeros(n), np.zeros(n), ps2)


def test_patch_targets_velocity_slots(ps2, rng):
    n = ps2.mu.shape[0]
    ref = rng.standard_normal(n)
    xt = rng.standard_normal(n)
    T = patch_targets(ref, xt, ps2)
    assert T.shape == (len(ps2), output_width(ps2))
    diff_rows = local_restrict(ref - xt, ps2)
    assert np.array_equal(T, diff_rows[:, velocity_slots(ps2)])
