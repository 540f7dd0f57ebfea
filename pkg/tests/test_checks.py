"""The property battery itself: green end to end, readable summaries."""

from setnn import checks


def test_run_all_is_green():
    results = checks.run_all(seed=0)
    assert [r.name for r in results] == list(checks.SUITES)
    for r in results:
        assert r.passed, f"{r.name}: {r.detail}"
        assert r.seconds >= 0.0
        assert r.detail


def test_summary_table_formats_pass_and_fail():
    rows = [
        checks.CheckResult("alpha", True, "all good", 0.5),
        checks.CheckResult("betagamma", False, "2 failures", 1.25),
    ]
    table = checks.summary_table(rows)
    lines = table.split("\n")
    assert lines[0].startswith("PASS  alpha")
    assert lines[1].startswith("FAIL  betagamma")
    assert "2 failures" in lines[1]
