import pytest

from panomamba.tensor import ContractError
from panomamba.verify import SUITES, run_suite


def test_each_named_suite_passes():
    for name in SUITES:
        results = run_suite(name)
        assert results, name
        for r in results:
            assert r.ok, f"{r.suite}.{r.name}: {r.detail}"


def test_all_aggregates_every_suite():
    results = run_suite("all")
    assert len(results) == sum(len(v) for v in SUITES.values())
    assert all(r.ok for r in results)


def test_jobs_thread_pool_same_outcomes():
    serial = {(r.suite, r.name): r.ok for r in run_suite("scan")}
    threaded = {(r.suite, r.name): r.ok for r in run_suite("scan", jobs=4)}
    assert serial == threaded


def test_unknown_suite_rejected():
    with pytest.raises(ContractError):
        run_suite("nope")
