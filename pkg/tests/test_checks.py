"""The gradient self-check registry: coverage, passing runs, fault injection."""

import pytest

from motionprior.checks import CHECKS, CheckContext, CheckResult, run_checks
from motionprior.diffcore import set_gradient_fault

EXPECTED_NAMES = {
    "fk", "encoder", "prior", "decoder", "gmm_loglik",
    "e_data", "e_cvae", "e_init", "e_skel", "e_env", "e_gnd", "e_shape",
    "rollout",
}


@pytest.fixture(scope="module")
def ctx():
    return CheckContext(seed=0)


def test_registry_covers_every_operation():
    assert set(CHECKS) == EXPECTED_NAMES
    for name, (factory, tol) in CHECKS.items():
        assert callable(factory)
        assert 0 < tol <= 1e-3


def test_rollout_tolerance_is_looser():
    assert CHECKS["rollout"][1] > CHECKS["fk"][1]


def test_result_pass_threshold():
    assert CheckResult("fk", 0, 5e-5, 1e-4).passed
    assert not CheckResult("fk", 0, 2e-4, 1e-4).passed


def test_all_checks_pass_on_fresh_instances(ctx):
    results = run_checks(ctx, instances=2, seed=0)
    assert len(results) == 2 * len(CHECKS)
    bad = [(r.name, r.instance, r.error) for r in results if not r.passed]
    assert not bad, bad


def test_named_subset_runs_only_those(ctx):
    results = run_checks(ctx, names=["e_gnd", "e_shape"], instances=3, seed=1)
    assert {r.name for r in results} == {"e_gnd", "e_shape"}
    assert len(results) == 6


def test_injected_gradient_fault_is_caught(ctx):
    set_gradient_fault(5e-4)
    try:
        results = run_checks(ctx, names=["e_gnd"], instances=1, seed=0)
    finally:
        set_gradient_fault(0.0)
    assert not results[0].passed
    # and the hook resets cleanly
    clean = run_checks(ctx, names=["e_gnd"], instances=1, seed=0)
    assert clean[0].passed


def test_seeds_give_distinct_instances(ctx):
    a = run_checks(ctx, names=["gmm_loglik"], instances=2, seed=0)
    assert a[0].error != a[1].error
