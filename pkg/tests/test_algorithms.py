from dataclasses import replace

import numpy as np
import pytest

from bilevel.bench import format_record
from bilevel.core import EvalCounter, Individual, Tag, UsageError
from bilevel.algorithms import (
    ALGORITHMS,
    RADIUS_FLOOR,
    BleaqConfig,
    LowerStart,
    Mode,
    RunState,
    Termination,
    bleaq2_offspring_update,
    bleaq2_solve,
    nested_solve,
    rank_key,
)
from bilevel.metamodel import PhiModel, PsiModel, fit_quadratic
from bilevel.problems import make_mtp, make_tp


def short(config: BleaqConfig, gens: int) -> BleaqConfig:
    return replace(config, ea=config.ea.with_(max_gens=gens))


def _state(problem, config=None, seed=0):
    return RunState(problem, config or BleaqConfig(), EvalCounter(), np.random.default_rng(seed))


def _tag1(problem, x_u, x_l, state):
    ind = Individual(np.asarray(x_u, float), np.asarray(x_l, float), tag=Tag.TAG1)
    ind.f_val, _ = problem.lower_values(ind.x_u, ind.x_l)
    ind.ll_violation = 0.0
    F, G = problem.upper_values(ind.x_u, ind.x_l)
    ind.F_val, ind.ul_violation = F, 0.0
    state.archive.add(ind)
    return ind


def test_config_validation_and_neighbourhood():
    assert BleaqConfig().neighbors_for(2) == 12
    assert BleaqConfig(neighborhood_size=20).neighbors_for(2) == 20
    with pytest.raises(UsageError):
        BleaqConfig(neighborhood_size=3).neighbors_for(2)
    with pytest.raises(UsageError):
        BleaqConfig(local_search_every_k=0)
    with pytest.raises(UsageError):
        BleaqConfig(max_ll_calls=0)
    assert BleaqConfig.nested().ea.parents_mu == 2


def test_nested_rejects_adaptive_mode():
    with pytest.raises(UsageError):
        nested_solve(make_tp(1), mode=Mode.ADAPTIVE)


def test_registry_of_algorithms():
    assert set(ALGORITHMS) == {"nested", "psi", "phi", "bleaq2"}


def test_rank_key_penalizes_failed_lower_level():
    ok = Individual(np.zeros(1), np.zeros(1), F_val=5.0, ul_violation=0.0, ll_violation=0.0, tag=Tag.TAG1)
    bad = Individual(np.zeros(1), np.zeros(1), F_val=-5.0, ul_violation=0.0, ll_violation=0.5, tag=Tag.TAG0)
    pred = Individual(np.zeros(1), np.zeros(1), F_val=-5.0, ul_violation=0.0, tag=Tag.TAG0)
    assert rank_key(ok) < rank_key(bad)
    assert rank_key(pred) < rank_key(ok)


def test_corner_start_is_lower_bound_vertex():
    st = _state(make_mtp(1))
    assert np.array_equal(st.lower_start(np.zeros(2)), st.problem.lower_bounds[:, 0])
    st = _state(make_mtp(1), BleaqConfig(ll_start=LowerStart.ARCHIVE))
    _tag1(st.problem, [1.0, 1.0], [1.0, 1.0, 0.5, 0.5], st)
    assert np.array_equal(st.lower_start(np.zeros(2)), [1.0, 1.0, 0.5, 0.5])


def test_radius_restarts_below_floor():
    st = _state(make_tp(1))
    steps = 0
    while st.ls_radius >= RADIUS_FLOOR * 2:
        st.shrink_radius()
        steps += 1
    st.shrink_radius()
    assert st.ls_radius == 1.0 and steps > 0


def test_step3_scarce_tag1_runs_lower_level_solve():
    p = make_tp(1)
    st = _state(p)
    pop = [Individual(np.zeros(2), np.zeros(2), tag=Tag.TAG1 if i < 20 else Tag.TAG0) for i in range(50)]
    decisions = []
    kid = bleaq2_offspring_update(np.array([5.0, 6.0]), pop, st, decisions)
    assert kid.tag is Tag.TAG1 and not decisions
    assert np.allclose(kid.x_l, [5.0, 6.0], atol=1e-4)
    assert st.counter.ll_evals > 0


def test_step3_psi_branch_needs_no_lower_level_evaluations():
    # TP1's lower level gives y = x for x inside [0, 10]^2: an exact linear reaction
    p = make_tp(1)
    st = _state(p)
    rng = np.random.default_rng(0)
    for x in rng.uniform(1.0, 9.0, (15, 2)):
        ind = _tag1(p, x, x, st)
        ind.f_val = float(np.sin(7 * x[0]) * np.cos(5 * x[1]))  # rough recorded values
    psi, phi, _ = st.fit_mappings(np.array([4.0, 5.0]))
    assert psi.mse < 1e-12 < phi.mse
    pop = [Individual(np.zeros(2), np.zeros(2), tag=Tag.TAG1)] * 50
    decisions = []
    kid = bleaq2_offspring_update(np.array([4.0, 5.0]), pop, st, decisions)
    assert st.counter.ll_evals == 0 and st.counter.ul_evals == 1
    assert kid.tag is Tag.TAG0 and decisions[-1].mapping == "psi"
    assert np.allclose(kid.x_l, [4.0, 5.0], atol=1e-8)


def test_mapping_choice_follows_mse_with_ties_to_psi():
    from bilevel.algorithms import _mapping_choice

    def quad(mse):
        return fit_quadratic(np.arange(3.0)[:, None], np.zeros(3)).__class__(
            1, np.zeros(1), np.ones(1), np.zeros(3), mse)

    assert _mapping_choice(PsiModel((quad(0.01),)), PhiModel(quad(0.5))) == "psi"
    assert _mapping_choice(PsiModel((quad(0.5),)), PhiModel(quad(0.5))) == "psi"
    assert _mapping_choice(PsiModel((quad(0.5),)), PhiModel(quad(0.01))) == "phi"


def test_step3_set_valued_archive_takes_phi_branch():
    p = make_mtp(1)
    st = _state(p)
    rng = np.random.default_rng(1)
    for i, x in enumerate(rng.uniform(1.0, 9.0, (8, 2))):
        for t in (-0.5, 0.5):  # duplicated x_u, two optimal diagonal points
            _tag1(p, x, [x[0], x[1], t, t], st)
    # sample logs for the surrogates around the same region
    for z in np.column_stack([rng.uniform(1, 9, (80, 4)), rng.uniform(-1, 1, (80, 2))]):
        F, G = p.upper_values(z[:2], z[2:])
        f, g = p.lower_values(z[:2], z[2:])
        st.upper_log.add(z, F, G)
        st.lower_log.add(z, f, g)
    psi, phi, _ = st.fit_mappings(np.array([5.0, 5.0]))
    assert psi.mse > phi.mse
    pop = [Individual(np.zeros(2), np.zeros(4), tag=Tag.TAG1)] * 50
    decisions = []
    kid = bleaq2_offspring_update(np.array([5.0, 5.0]), pop, st, decisions)
    assert decisions[-1].mapping == "phi" and kid.tag is Tag.TAG0
    assert st.counter.ll_evals == 0


def test_accuracy_termination_at_initialization():
    cfg = BleaqConfig(accuracy_target=1e9)
    rec = bleaq2_solve(make_tp(1), cfg, seed=0)
    assert rec.terminated_by is Termination.ACCURACY and rec.success and rec.generations == 0


def test_budget_termination():
    rec = nested_solve(make_tp(1), BleaqConfig.nested(max_ll_calls=2000), seed=0)
    assert rec.terminated_by is Termination.BUDGET and not rec.success


def test_variance_termination_with_loose_threshold():
    cfg = BleaqConfig.nested()
    rec = nested_solve(make_tp(1), replace(cfg, ea=cfg.ea.with_(alpha_stop=1e9)), seed=0)
    assert rec.terminated_by is Termination.VARIANCE and rec.generations == 1


def test_generation_cap():
    rec = nested_solve(make_tp(4), short(BleaqConfig.nested(), 3), seed=0)
    assert rec.terminated_by is Termination.GENERATIONS and rec.generations == 3
    assert [e.gen for e in rec.trace] == [1, 2, 3]


def _counting(problem):
    calls = {"F": 0, "f": 0}

    def F(x, y, _F=problem.F):
        calls["F"] += 1
        return _F(x, y)

    def f(x, y, _f=problem.f):
        calls["f"] += 1
        return _f(x, y)

    return replace(problem, F=F, f=f), calls


@pytest.mark.parametrize("algo", ["nested", "phi", "bleaq2"])
def test_counter_matches_real_function_calls(algo):
    p, calls = _counting(make_tp(3))
    cfg = BleaqConfig() if algo == "bleaq2" else BleaqConfig.nested()
    rec = ALGORITHMS[algo](p, short(cfg, 12), seed=3)
    assert rec.counter.ul_evals == calls["F"]
    assert rec.counter.ll_evals == calls["f"]


def test_same_seed_gives_identical_records():
    cfg = short(BleaqConfig(), 15)
    a = format_record(bleaq2_solve(make_tp(2), cfg, seed=11))
    b = format_record(bleaq2_solve(make_tp(2), cfg, seed=11))
    assert a == b


def test_nested_best_never_gets_worse():
    rec = nested_solve(make_tp(4), short(BleaqConfig.nested(), 30), mode=Mode.PSI, seed=2)
    best = [e.best_F for e in rec.trace]
    assert all(b2 <= b1 + 1e-12 for b1, b2 in zip(best, best[1:]))


def test_trace_records_both_errors_when_step3b_runs():
    rec = bleaq2_solve(make_tp(1), short(BleaqConfig(), 25), seed=0)
    gens = {d.gen for d in rec.decisions}
    assert gens
    for e in rec.trace:
        if e.gen in gens:
            assert e.e_mse_psi is not None and e.e_mse_phi is not None and e.chosen_mapping


def test_tp1_solved_by_bleaq2():
    rec = bleaq2_solve(make_tp(1), seed=0)
    assert rec.success
    assert abs(rec.best.F_val - 225.0) <= 1e-2 and abs(rec.best.f_val - 100.0) <= 1e-2


def test_smd14_reaches_point_below_tabulated_value():
    from bilevel.problems import PAPER_DIMS, make_smd14

    p = make_smd14(PAPER_DIMS[("smd14", 5)])
    rec = bleaq2_solve(p, seed=0)
    assert rec.best.tag is Tag.TAG1
    assert rec.best.F_val <= -0.24
    assert abs(rec.best.f_val - 1.0) <= 1e-2
