import time

import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")
    config.stash[_VERDICTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        number, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        item.config.stash[_VERDICTS][number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[_VERDICTS]
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        title, passed, detail = verdicts[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The default desk configuration run end to end once through the CLI."""
    from weakmil.cli import main

    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    code = main(["run-all", "--out", str(out), "--threads", "1"])
    return out, time.perf_counter() - t0, code
