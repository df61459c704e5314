import numpy as np
import pytest

from meda_lude.errors import (
    EmptyPopulationError,
    FitnessError,
    InputError,
    PersistError,
    ShapeError,
)
from meda_lude.gm_distribution import (
    VAR_FLOOR,
    BasicEDAConfig,
    ClassGaussian,
    GMMParams,
    LatentPopulation,
    blend_gaussian,
    estimate_class_gaussian,
    evolve_update,
    gmm_from_class_gaussians,
    init_gmm,
    load_gmm,
    run_basic_eda,
    sample_population,
    save_gmm,
    select_superior,
    truncation_count,
)


def test_estimate_matches_population_moment_oracle():
    # Oracle: divide-by-n moments computed with explicit loops.
    rng = np.random.default_rng(7)
    feats = rng.normal(size=(13, 4))
    n = feats.shape[0]
    mean = np.array([sum(feats[i, j] for i in range(n)) / n for j in range(4)])
    var = np.array(
        [sum((feats[i, j] - mean[j]) ** 2 for i in range(n)) / n for j in range(4)]
    )
    g = estimate_class_gaussian(feats)
    np.testing.assert_allclose(g.mean, mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose(g.variance, var, rtol=0, atol=1e-12)


def test_estimate_frozen_values():
    g = estimate_class_gaussian(np.array([[1.0, 2.0], [3.0, 6.0]]))
    np.testing.assert_allclose(g.mean, [2.0, 4.0], atol=1e-15)
    np.testing.assert_allclose(g.variance, [1.0, 4.0], atol=1e-15)


def test_estimate_single_row_hits_variance_floor():
    g = estimate_class_gaussian(np.array([[5.0, -1.0]]))
    np.testing.assert_allclose(g.mean, [5.0, -1.0], atol=0)
    np.testing.assert_allclose(g.variance, [VAR_FLOOR, VAR_FLOOR], atol=0)


def test_estimate_empty_raises():
    with pytest.raises(EmptyPopulationError):
        estimate_class_gaussian(np.empty((0, 3)))


def test_blend_frozen_values():
    new = ClassGaussian(np.array([1.0, 2.0]), np.array([4.0, 9.0]))
    old = ClassGaussian(np.array([3.0, -2.0]), np.array([1.0, 1.0]))
    out = blend_gaussian(new, old, 0.7)
    np.testing.assert_allclose(out.mean, [1.6, 0.8], atol=1e-12)
    np.testing.assert_allclose(out.variance, [3.1, 6.6], atol=1e-12)


def test_blend_gamma_extremes():
    new = ClassGaussian(np.array([1.0]), np.array([2.0]))
    old = ClassGaussian(np.array([5.0]), np.array([8.0]))
    np.testing.assert_allclose(blend_gaussian(new, old, 1.0).mean, [1.0])
    np.testing.assert_allclose(blend_gaussian(new, old, 0.0).variance, [8.0])
    with pytest.raises(InputError):
        blend_gaussian(new, old, 1.5)


def test_evolve_update_weights_quality_pool():
    quali = ClassGaussian(np.array([1.0, 0.0]), np.array([2.0, 1.0]))
    diver = ClassGaussian(np.array([3.0, 4.0]), np.array([6.0, 9.0]))
    out = evolve_update(quali, diver, 0.75)
    np.testing.assert_allclose(out.mean, [1.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(out.variance, [3.0, 3.0], atol=1e-12)


def test_gmm_params_validation_and_floor():
    with pytest.raises(ShapeError):
        GMMParams(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(InputError):
        GMMParams(np.array([[np.nan]]), np.array([[0.0]]))
    g = GMMParams(np.zeros((1, 2)), np.full((1, 2), -100.0))
    assert np.all(g.variances() >= VAR_FLOOR)


def test_sample_population_blocks_and_determinism():
    gmm = GMMParams(np.array([[0.0, 0.0], [10.0, 10.0]]), np.zeros((2, 2)))
    pop = sample_population(gmm, [3, 2], np.random.default_rng(11))
    assert len(pop) == 5
    np.testing.assert_array_equal(pop.labels, [0, 0, 0, 1, 1])
    # Class-1 draws sit near their mean, far from class 0's.
    assert np.all(pop.features[3:] > 5.0)
    again = sample_population(gmm, [3, 2], np.random.default_rng(11))
    np.testing.assert_array_equal(pop.features, again.features)


def test_sample_population_zero_count_class_skipped():
    gmm = GMMParams(np.zeros((3, 2)), np.zeros((3, 2)))
    pop = sample_population(gmm, [0, 4, 0], np.random.default_rng(0))
    np.testing.assert_array_equal(pop.labels, [1, 1, 1, 1])


def test_sample_population_errors():
    gmm = GMMParams(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(EmptyPopulationError):
        sample_population(gmm, [0, 0], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        sample_population(gmm, [1, 2, 3], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        sample_population(gmm, [-1, 2], np.random.default_rng(0))


def test_latent_population_validation():
    with pytest.raises(ShapeError):
        LatentPopulation(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(InputError):
        LatentPopulation(np.full((1, 2), np.inf), np.zeros(1))
    with pytest.raises(InputError):
        LatentPopulation(np.zeros((1, 2)), np.array([-1]))


def test_select_superior_descending_with_stable_ties():
    fitness = np.array([1.0, 3.0, 3.0, -2.0, 5.0])
    np.testing.assert_array_equal(select_superior(fitness, 0.8), [4, 1, 2, 0])
    # eta small enough to keep one survivor still returns the argmax.
    np.testing.assert_array_equal(select_superior(fitness, 0.01), [4])


def test_truncation_count_floor_and_minimum():
    assert truncation_count(100, 0.3) == 30
    assert truncation_count(10, 0.25) == 2
    assert truncation_count(3, 0.1) == 1


def test_eta_one_blend_equals_population_stats():
    # With every individual selected, the blended statistics must equal the
    # population statistics regardless of gamma.
    rng = np.random.default_rng(3)
    pop = rng.normal(size=(40, 3))
    fitness = rng.normal(size=40)
    keep = select_superior(fitness, 1.0)
    assert keep.size == 40
    survivors = pop[keep]
    blended = blend_gaussian(
        ClassGaussian(survivors.mean(axis=0), survivors.var(axis=0)),
        ClassGaussian(pop.mean(axis=0), pop.var(axis=0)),
        0.7,
    )
    np.testing.assert_allclose(blended.mean, pop.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(blended.variance, pop.var(axis=0), atol=1e-12)


def test_run_basic_eda_sphere_progress_and_history():
    cfg = BasicEDAConfig(
        dims=3, pop_size=60, eta=0.4, gamma=0.7, iterations=40,
        init_lo=-4.0, init_hi=4.0,
    )
    best_x, best_f, history = run_basic_eda(
        lambda pop: -np.sum(pop * pop, axis=1), cfg, np.random.default_rng(1)
    )
    assert len(history) == 40
    bests = [h.best_fitness for h in history]
    assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))
    assert best_f == bests[-1]
    assert best_f > -0.05
    np.testing.assert_allclose(-np.sum(best_x * best_x), best_f, atol=1e-12)


def test_run_basic_eda_deterministic_under_seed():
    cfg = BasicEDAConfig(dims=2, pop_size=20, eta=0.5, gamma=0.5, iterations=5)
    fn = lambda pop: -np.abs(pop).sum(axis=1)
    a = run_basic_eda(fn, cfg, np.random.default_rng(9))
    b = run_basic_eda(fn, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]


def test_run_basic_eda_nonfinite_fitness_names_offender():
    cfg = BasicEDAConfig(dims=1, pop_size=4, eta=0.5, gamma=0.5, iterations=3)

    def bad(pop):
        out = np.zeros(pop.shape[0])
        out[2] = np.nan
        return out

    with pytest.raises(FitnessError):
        run_basic_eda(bad, cfg, np.random.default_rng(0))


def test_basic_eda_config_validation():
    with pytest.raises(InputError):
        BasicEDAConfig(dims=2, eta=0.0)
    with pytest.raises(InputError):
        BasicEDAConfig(dims=2, gamma=1.5)
    with pytest.raises(InputError):
        BasicEDAConfig(dims=2, init_lo=1.0, init_hi=1.0)
    with pytest.raises(InputError):
        BasicEDAConfig(dims=0)


def test_gmm_round_trip_and_persist_errors(tmp_path):
    rng = np.random.default_rng(5)
    gmm = init_gmm(3, 4, rng)
    gmm.log_variances += rng.normal(size=(3, 4))
    gmm.clamp_variances()
    path = tmp_path / "dist.bin"
    save_gmm(gmm, str(path))
    back = load_gmm(str(path))
    np.testing.assert_array_equal(back.means, gmm.means)
    np.testing.assert_array_equal(back.log_variances, gmm.log_variances)
    # Saving the loaded copy reproduces the bytes exactly.
    path2 = tmp_path / "dist2.bin"
    save_gmm(back, str(path2))
    assert path.read_bytes() == path2.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTHING0" + path.read_bytes()[8:])
    with pytest.raises(PersistError):
        load_gmm(str(bad))
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(PersistError):
        load_gmm(str(trunc))
    trailing = tmp_path / "trail.bin"
    trailing.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(PersistError):
        load_gmm(str(trailing))


def test_gmm_from_class_gaussians_round_trip():
    gaussians = [
        ClassGaussian(np.array([1.0, 2.0]), np.array([0.5, 2.0])),
        ClassGaussian(np.array([-1.0, 0.0]), np.array([1.0, 4.0])),
    ]
    gmm = gmm_from_class_gaussians(gaussians)
    assert gmm.class_count == 2
    np.testing.assert_allclose(gmm.variances()[1], [1.0, 4.0], atol=1e-12)
    back = gmm.class_gaussian(0)
    np.testing.assert_allclose(back.mean, [1.0, 2.0], atol=0)
    np.testing.assert_allclose(back.variance, [0.5, 2.0], atol=1e-15)
