import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from muse.operators import (
    MaskSpec,
    dft_matrix,
    generate_vd_mask,
    load_dense,
    make_dense,
    make_dense_gaussian,
    make_identity,
    make_masked_dft,
    read_mask_csv,
    save_dense,
    simulate_measurements,
    write_mask_csv,
)
from muse.tensor import make_rng, to_interleaved

from oracles import jacobi_singular_values


def dense_matrix(op):
    return np.column_stack([op.apply(e) for e in np.eye(op.in_dim)])


def adjoint_gap(op, rng, pairs=100):
    worst = 0.0
    for _ in range(pairs):
        x = rng.standard_normal(op.in_dim)
        y = rng.standard_normal(op.out_dim)
        gap = abs(op.apply(x) @ y - x @ op.adjoint(y))
        worst = max(worst, gap / (np.linalg.norm(x) * np.linalg.norm(y)))
    return worst


def test_dft_is_unitary():
    f = dft_matrix(8)
    assert_allclose(f.conj().T @ f, np.eye(8), atol=1e-13)


def test_full_mask_is_isometry(rng):
    op = make_masked_dft((8, 4), np.ones(8, dtype=bool))
    x = rng.standard_normal(op.in_dim)
    assert_allclose(op.normal(x), x, atol=1e-12)
    assert abs(op.norm_estimate() - 1.0) <= 1e-6


def test_half_mask_norm_is_one():
    mask = np.zeros(8, dtype=bool)
    mask[::2] = True
    op = make_masked_dft((8, 4), mask)
    assert abs(jacobi_singular_values(dense_matrix(op))[0] - 1.0) <= 1e-10


def test_dense_gaussian_normalised():
    op = make_dense_gaussian(8, 16, make_rng(5))
    top = jacobi_singular_values(dense_matrix(op))[0]
    assert 1 - 1e-4 <= top <= 1.0 + 1e-12


def test_identity():
    op = make_identity(5)
    x = np.arange(5.0)
    assert_array_equal(op.apply(x), x)
    assert op.norm_estimate() == 1.0


def test_constant_image_hits_dc_line_only():
    shape = (8, 4)
    op = make_masked_dft(shape, np.ones(8, dtype=bool))
    k = op.apply(to_interleaved(np.full(shape, 1.0 + 0.5j))).reshape(8, 4, 2)
    mag = np.hypot(k[..., 0], k[..., 1])
    # zero frequency sits at index n // 2 along both axes
    assert mag[4, 2] > 1
    mag[4, 2] = 0
    assert mag.max() < 1e-12


@pytest.mark.parametrize("kind", ["dense", "masked"])
def test_adjoint_identity(kind, rng):
    if kind == "dense":
        op = make_dense_gaussian(6, 10, rng)
    else:
        op = make_masked_dft((8, 3), MaskSpec(8, acceleration=2, center_fraction=0.25, seed=2))
    assert adjoint_gap(op, rng) <= 1e-10


def test_linearity(rng):
    op = make_masked_dft((8, 2), MaskSpec(8, acceleration=2, center_fraction=0.25))
    x, y = rng.standard_normal((2, op.in_dim))
    lhs = op.apply(2.0 * x - 3.0 * y)
    rhs = 2.0 * op.apply(x) - 3.0 * op.apply(y)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)


def test_dimension_mismatch(rng):
    op = make_dense_gaussian(3, 4, rng)
    with pytest.raises(ValueError):
        op.apply(np.zeros(3))
    with pytest.raises(ValueError):
        op.adjoint(np.zeros(4))


def test_mask_full_sampling():
    assert generate_vd_mask(MaskSpec(16, acceleration=1.0, center_fraction=0.1)).all()


def test_mask_counts_and_centre():
    mask = generate_vd_mask(MaskSpec(320, acceleration=4, center_fraction=0.04, seed=0))
    assert mask.sum() == 80
    assert mask[154:167].all()


@pytest.mark.parametrize("n,acc,cf", [(17, 3.0, 0.1), (64, 2.5, 0.08), (100, 8.0, 0.04), (9, 2.0, 0.0)])
def test_mask_cardinality_exact(n, acc, cf):
    mask = generate_vd_mask(MaskSpec(n, acc, cf, seed=1))
    assert mask.sum() == int(np.floor(n / acc + 0.5))


def test_mask_seeded():
    spec = MaskSpec(64, acceleration=4, center_fraction=0.08, seed=9)
    assert_array_equal(generate_vd_mask(spec), generate_vd_mask(spec))


def test_mask_errors():
    with pytest.raises(ValueError):
        generate_vd_mask(MaskSpec(16, acceleration=0.5))
    with pytest.raises(ValueError):
        generate_vd_mask(MaskSpec(16, acceleration=8, center_fraction=0.5))
    with pytest.raises(ValueError):
        make_masked_dft((8, 2), np.zeros(8, dtype=bool))


def test_mask_csv_round_trip(tmp_path):
    mask = generate_vd_mask(MaskSpec(32, acceleration=4, center_fraction=0.1))
    write_mask_csv(mask, tmp_path / "m.csv")
    assert_array_equal(read_mask_csv(tmp_path / "m.csv"), mask)


def test_dense_io_round_trip(tmp_path, rng):
    op = make_dense(rng.standard_normal((4, 6)))
    save_dense(op, tmp_path / "a.bin")
    back = load_dense(tmp_path / "a.bin")
    x = rng.standard_normal(6)
    assert_allclose(back.apply(x), op.apply(x), rtol=1e-12)


def test_noiseless_measurements(rng):
    op = make_dense_gaussian(4, 4, rng)
    x = rng.standard_normal(4)
    assert_array_equal(simulate_measurements(op, x, 0.0, rng), op.apply(x))
    with pytest.raises(ValueError):
        simulate_measurements(op, x, -1.0, rng)


def test_noise_variance():
    # 2e5 chi-square draws: relative std of the variance estimate is 0.3%
    op = make_identity(200000)
    b = simulate_measurements(op, np.zeros(op.in_dim), 0.1, make_rng(3))
    assert abs(b.var() / 0.01 - 1) < 0.03


def test_measurements_seeded():
    op = make_identity(10)
    a = simulate_measurements(op, np.ones(10), 0.2, make_rng(4))
    b = simulate_measurements(op, np.ones(10), 0.2, make_rng(4))
    assert_array_equal(a, b)
