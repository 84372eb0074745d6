import numpy as np
import pytest

from hhedit.data import Dataset, Household
from hhedit.gibbs import (
    ClassedData,
    ConfigError,
    GibbsConfig,
    derive_flags,
    run_gibbs,
    step_augment,
    step_impute_household,
    step_latent,
    step_update_params,
    sufficient_counts,
)
from hhedit.measurement import ErrorModelConfig
from hhedit.model import AttemptCapExceeded, Hyperparams, NdpmpmParams
from hhedit.rules import parse_rules
from hhedit.schema import load_schema
from hhedit.util import substream

TOY = load_schema(
    """
sizes: [2, 3]
variables:
- {name: Size, level: household, cardinality: 2, role: size}
- {name: Flag, level: household, cardinality: 2}
- {name: A, level: individual, cardinality: 2}
- {name: B, level: individual, cardinality: 2}
"""
)

RULES = parse_rules(
    "rule no11: forall p: p.A == 1 and p.B == 1 and Flag == 2 => violation",
    TOY,
    check_draws=2_000,
)


def toy_params(F=2, S=2, seed=0):
    return NdpmpmParams.from_prior(TOY, F, S, Hyperparams(), np.random.default_rng(seed))


def household(flag, members, size_code=1):
    return Household(
        np.array([size_code, flag], dtype=np.int32), np.array(members, dtype=np.int32)
    )


# ---------------------------------------------------------------------------
# flags

def test_derive_flags_marks_violations_and_missing():
    ds = Dataset(
        TOY,
        [
            household(2, [[1, 1], [2, 2]]),  # violates
            household(1, [[1, 1], [2, 2]]),  # clean
            household(1, [[0, 1], [2, 2]]),  # missing cell
        ],
    )
    grp = ds.groups()[2]
    z = derive_flags(grp.hh, grp.ind, RULES)
    assert z.tolist() == [True, False, True]


# ---------------------------------------------------------------------------
# S2 + S3

def test_impute_clean_household_is_identity():
    params = toy_params()
    hh = household(1, [[1, 2], [2, 1]])
    out, e_hh, e_ind = step_impute_household(
        params,
        TOY,
        np.full(2, 0.5),
        np.full(2, 0.5),
        hh,
        z=False,
        g=0,
        m=np.zeros(2, dtype=np.int64),
        ruleset=RULES,
        rng=np.random.default_rng(0),
    )
    assert np.array_equal(out.hh, hh.hh) and np.array_equal(out.ind, hh.ind)
    assert not e_hh.any() and not e_ind.any()


def test_impute_flagged_household_passes_rules_and_sets_errors():
    params = toy_params(seed=3)
    bad = household(2, [[1, 1], [1, 1]])  # violates no11
    rng = np.random.default_rng(1)
    for _ in range(50):
        out, e_hh, e_ind = step_impute_household(
            params,
            TOY,
            np.full(2, 0.5),
            np.full(2, 0.5),
            bad,
            z=True,
            g=0,
            m=np.zeros(2, dtype=np.int64),
            ruleset=RULES,
            rng=rng,
        )
        assert not RULES.violates(out)[0]
        assert out.hh[0] == bad.hh[0]  # size cell never resampled
        # error indicators are exactly the changed observed cells
        assert np.array_equal(e_hh, out.hh != bad.hh)
        assert np.array_equal(e_ind, out.ind != bad.ind)
        assert e_hh.any() or e_ind.any()


def test_impute_missing_cells_always_marked_error():
    params = toy_params(seed=4)
    withmiss = household(1, [[0, 1], [2, 2]])
    out, e_hh, e_ind = step_impute_household(
        params,
        TOY,
        np.full(2, 0.5),
        np.full(2, 0.5),
        withmiss,
        z=True,
        g=1,
        m=np.zeros(2, dtype=np.int64),
        ruleset=RULES,
        rng=np.random.default_rng(2),
    )
    assert out.ind[0, 0] in (1, 2)
    assert e_ind[0, 0]
    assert not RULES.violates(out)[0]


def test_impute_zero_error_rate_with_violating_data_hits_cap():
    # with every error rate exactly 0 the proposal pins all observed cells,
    # so a rule-violating household can never be repaired
    params = toy_params(seed=5)
    bad = household(2, [[1, 1], [1, 1]])
    with pytest.raises(AttemptCapExceeded) as err:
        step_impute_household(
            params,
            TOY,
            np.zeros(2),
            np.zeros(2),
            bad,
            z=True,
            g=0,
            m=np.zeros(2, dtype=np.int64),
            ruleset=RULES,
            rng=np.random.default_rng(3),
            cap=40,
        )
    assert err.value.rule_hits["no11"] > 0


def test_impute_non_error_prone_observed_cells_are_pinned():
    params = toy_params(seed=6)
    cfg = ErrorModelConfig.build(TOY, error_prone=["A"])
    bad = household(2, [[1, 1], [1, 1]])
    rng = np.random.default_rng(4)
    for _ in range(30):
        out, _, _ = step_impute_household(
            params,
            TOY,
            np.full(2, 0.5),
            np.full(2, 0.5),
            bad,
            z=True,
            g=0,
            m=np.zeros(2, dtype=np.int64),
            ruleset=RULES,
            rng=rng,
            error_config=cfg,
        )
        assert out.hh[1] == bad.hh[1]  # Flag is not error-prone
        assert np.array_equal(out.ind[:, 1], bad.ind[:, 1])  # B pinned too
        assert not RULES.violates(out)[0]


# ---------------------------------------------------------------------------
# S4

def test_augment_empty_ruleset_returns_nothing():
    params = toy_params()
    empty = parse_rules("", TOY)
    cfg = GibbsConfig(F=2, S=2, psi=1.0)
    aug, t0 = step_augment(
        params, TOY, {2: 50, 3: 30}, cfg, empty, lambda h: np.random.default_rng(h)
    )
    assert not aug.g and t0 == {2: 0, 3: 0}


def test_augment_skips_sizes_with_zero_target():
    params = toy_params(seed=7)
    cfg = GibbsConfig(F=2, S=2, psi=1.0)
    aug, t0 = step_augment(
        params, TOY, {2: 40, 3: 0}, cfg, RULES, lambda h: np.random.default_rng(h)
    )
    assert t0[3] == 0 and 3 not in aug.g


def test_augmented_households_all_violate_and_match_size():
    params = toy_params(seed=8)
    cfg = GibbsConfig(F=2, S=2, psi=0.5)
    aug, t0 = step_augment(
        params, TOY, {2: 101, 3: 40}, cfg, RULES, lambda h: np.random.default_rng(h)
    )
    for h, hh_arr in aug.hh.items():
        assert RULES.any_violation(hh_arr, aug.ind[h]).all()
        assert (hh_arr[:, 0] == TOY.code_for_size(h)).all()
        assert len(hh_arr) == t0[h]


def test_augment_acceptance_fraction_matches_enumeration():
    # with psi=1 the violator share among generated candidates matches the
    # size-conditioned model mass of the violating set
    from tests.test_model import enumerate_domain

    from hhedit.model import household_mixture_weight

    params = toy_params(seed=9)
    cfg = GibbsConfig(F=2, S=2, psi=1.0)
    target = 30_000
    aug, t0 = step_augment(
        params, TOY, {2: target}, cfg, RULES, lambda h: np.random.default_rng(101)
    )
    # enumerate the size-conditioned law: weights given size 2
    mass_viol = mass_all = 0.0
    for hh in enumerate_domain(h=2):
        w = household_mixture_weight(params, TOY, hh).sum()
        mass_all += w
        if RULES.violates(hh)[0]:
            mass_viol += w
    p = mass_viol / mass_all
    frac = t0[2] / (t0[2] + target)
    se = np.sqrt(p * (1 - p) / (t0[2] + target))
    assert abs(frac - p) <= 3 * se


# ---------------------------------------------------------------------------
# S5

def test_latent_single_class_is_constant():
    params = toy_params(F=1, S=2)
    hh = np.array([[1, 1], [1, 2]], dtype=np.int32)
    ind = np.array([[[1, 1], [2, 2]], [[1, 2], [2, 1]]], dtype=np.int32)
    g, m = step_latent(params, {2: hh}, {2: ind}, lambda h: np.random.default_rng(0))
    assert (g[2] == 0).all()


def test_latent_separated_classes_are_recovered():
    params = toy_params(F=2, S=1)
    # class 0 emits all-1s, class 1 emits all-2s, deterministically
    for k in range(2):
        params.lam[k][:] = [[1.0, 0.0], [0.0, 1.0]]
        params.phi[k][:, 0, :] = [[1.0, 0.0], [0.0, 1.0]]
    params.lam[0][:] = 0.5  # size variable uninformative
    ones = household(1, [[1, 1], [1, 1]])
    twos = household(1, [[2, 2], [2, 2]], size_code=1)
    twos.hh[1] = 2
    hh = np.stack([ones.hh, twos.hh])
    ind = np.stack([ones.ind, twos.ind])
    g, _ = step_latent(params, {2: hh}, {2: ind}, lambda h: np.random.default_rng(1))
    assert g[2].tolist() == [0, 1]


def test_latent_class_posterior_matches_direct_formula():
    from hhedit.model import household_mixture_weight

    params = toy_params(F=3, S=2, seed=11)
    target = household(2, [[1, 2], [2, 1]])
    w = household_mixture_weight(params, TOY, target)
    exact = w / w.sum()
    reps = 100_000
    hh = np.repeat(target.hh[None, :], reps, axis=0)
    ind = np.repeat(target.ind[None, :, :], reps, axis=0)
    g, _ = step_latent(params, {2: hh}, {2: ind}, lambda h: np.random.default_rng(2))
    freq = np.bincount(g[2], minlength=3) / reps
    assert np.max(np.abs(freq - exact)) < 0.01


# ---------------------------------------------------------------------------
# S6-S11

def test_update_with_no_data_draws_from_prior():
    hyper = Hyperparams()
    counts = (
        np.zeros(3, dtype=np.int64),
        np.zeros((3, 2), dtype=np.int64),
        [np.zeros((3, 2), dtype=np.int64), np.zeros((3, 2), dtype=np.int64)],
        [np.zeros((3, 2, 2), dtype=np.int64), np.zeros((3, 2, 2), dtype=np.int64)],
    )
    rng = np.random.default_rng(3)
    alpha = 2.0
    draws_u = []
    draws_lam = []
    for _ in range(20_000):
        params = step_update_params(TOY, 3, 2, counts, hyper, alpha, 1.0, rng)
        draws_u.append(params.u[0])
        draws_lam.append(params.lam[0][0, 0])
    # u_g ~ Beta(1, alpha) has mean 1/(1+alpha); uniform Dirichlet rows have mean 1/2
    assert abs(np.mean(draws_u) - 1 / (1 + alpha)) < 0.01
    assert abs(np.mean(draws_lam) - 0.5) < 0.01


def test_sufficient_counts_match_recount_and_weights():
    g1 = {2: np.array([0, 1, 1]), 3: np.array([0])}
    m1 = {2: np.array([[0, 1], [1, 1], [0, 0]]), 3: np.array([[1, 0, 1]])}
    hh1 = {2: np.array([[1, 2], [1, 1], [1, 2]], dtype=np.int32), 3: np.array([[2, 1]], dtype=np.int32)}
    ind1 = {
        2: np.array([[[1, 1], [2, 2]], [[2, 1], [1, 2]], [[1, 1], [1, 1]]], dtype=np.int32),
        3: np.array([[[1, 2], [2, 1], [2, 2]]], dtype=np.int32),
    }
    observed = ClassedData(g1, m1, hh1, ind1)
    # four augmented households of size 2 in class 0, psi = 1/2 -> weight 2 each
    g0 = {2: np.zeros(4, dtype=np.int64)}
    m0 = {2: np.ones((4, 2), dtype=np.int64)}
    hh0 = {2: np.tile(np.array([[1, 2]], dtype=np.int32), (4, 1))}
    ind0 = {2: np.tile(np.array([[[2, 2], [2, 2]]], dtype=np.int32), (4, 1, 1))}
    augmented = ClassedData(g0, m0, hh0, ind0)
    U, V, eta, nu = sufficient_counts(TOY, 2, 2, observed, augmented, {2: 2, 3: 2})
    assert U.tolist() == [2 + 4 * 2, 2]  # each augmented household adds weight 2
    assert V[1].tolist() == [2, 2]
    # class-0 members: 2 at m=0, 3 at m=1, plus 4x2 augmented members at m=1, weight 2
    assert V[0].tolist() == [2, 3 + 16]
    # brute-force recount of one lambda concentration
    exp = np.zeros((2, 2), dtype=int)
    for h in g1:
        for i, g in enumerate(g1[h]):
            exp[g, hh1[h][i, 1] - 1] += 1
    exp[0, 1] += 4 * 2
    assert np.array_equal(eta[1], exp)
    # and one phi concentration
    expn = np.zeros((2, 2, 2), dtype=int)
    for h in g1:
        for i, g in enumerate(g1[h]):
            for j in range(h):
                expn[g, m1[h][i][j], ind1[h][i, j, 0] - 1] += 1
    expn[0, 1, 1] += 4 * 2 * 2  # 4 households x 2 members x weight 2
    assert np.array_equal(nu[0], expn)


# ---------------------------------------------------------------------------
# run_gibbs behavior

def clean_dataset(n=40, seed=0):
    rng = np.random.default_rng(seed)
    households = []
    for _ in range(n):
        size_code = int(rng.integers(1, 3))
        h = TOY.size_for_code(size_code)
        while True:
            flag = int(rng.integers(1, 3))
            ind = rng.integers(1, 3, size=(h, 2)).astype(np.int32)
            cand = Household(np.array([size_code, flag], dtype=np.int32), ind)
            if not RULES.violates(cand)[0]:
                households.append(cand)
                break
    return Dataset(TOY, households)


def test_clean_fully_observed_data_is_a_fixed_point():
    ds = clean_dataset()
    cfg = GibbsConfig(iterations=40, burn_in=10, thin=2, n_imputations=5, F=2, S=2, seed=9)
    res = run_gibbs(ds, RULES, cfg)
    assert res.flagged == 0
    for imp in res.imputed:
        for orig, new in zip(ds.households, imp.households):
            assert np.array_equal(orig.hh, new.hh)
            assert np.array_equal(orig.ind, new.ind)
    # with nothing flagged the error rates are prior draws: Beta(1, 1)
    eps = [v for _, name, v in res.traces if name.startswith("epsilon:")]
    assert abs(np.mean(eps) - 0.5) < 4 * np.sqrt(1 / 12 / len(eps))


def test_same_seed_same_results_across_thread_counts():
    ds = clean_dataset(seed=2)
    ds.households[0].ind[:, 0] = 1
    ds.households[0].ind[:, 1] = 1
    ds.households[0].hh[1] = 2  # make one household violate
    ds = Dataset(TOY, ds.households)
    outs = []
    for threads in (1, 3):
        cfg = GibbsConfig(
            iterations=30, burn_in=10, thin=2, n_imputations=4, F=2, S=2, seed=77, threads=threads
        )
        res = run_gibbs(ds, RULES, cfg)
        outs.append(res)
    assert outs[0].traces == outs[1].traces
    for a, b in zip(outs[0].imputed, outs[1].imputed):
        for x, y in zip(a.households, b.households):
            assert np.array_equal(x.hh, y.hh) and np.array_equal(x.ind, y.ind)


def test_emission_spacing_uses_defaults_arithmetic():
    cfg = GibbsConfig()  # 10000 iterations, 5000 burn-in, thin 5, 50 imputations
    assert (cfg.iterations - cfg.burn_in) // cfg.thin == 1000
    cfg.validate(TOY)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        GibbsConfig(iterations=100, burn_in=200).validate(TOY)
    with pytest.raises(ConfigError):
        GibbsConfig(iterations=100, burn_in=50, thin=10, n_imputations=10).validate(TOY)
    with pytest.raises(ConfigError):
        GibbsConfig(psi=0.3).validate(TOY)  # 1/psi not an integer
    with pytest.raises(ConfigError):
        GibbsConfig(psi={2: 0.5}).validate(TOY)  # size 3 missing


def test_trace_probability_specs():
    ds = clean_dataset(seed=5)
    cfg = GibbsConfig(
        iterations=12,
        burn_in=4,
        thin=2,
        n_imputations=2,
        F=2,
        S=2,
        seed=1,
        trace_probs=("marginal:Flag:1", "bivariate:A:1:B:2"),
    )
    res = run_gibbs(ds, RULES, cfg)
    names = {name for _, name, _ in res.traces}
    assert "marginal:Flag:1" in names and "bivariate:A:1:B:2" in names
    vals = [v for _, name, v in res.traces if name == "marginal:Flag:1"]
    truth = np.mean([hh.hh[1] == 1 for hh in ds.households])
    assert all(abs(v - truth) < 1e-12 for v in vals)  # clean data never changes
