import pytest

from frwmw.geometry import parse_structure

CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test body sets ``rec["detail"]``."""
    number = request.node.get_closest_marker("criterion").args[0]
    rec = {"title": request.node.get_closest_marker("criterion").args[1], "detail": ""}
    CRITERIA[number] = rec
    yield rec


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.when == "call":
        rec = CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "detail": ""})
        rec["passed"] = rep.passed
    elif marker and rep.when == "setup" and not rep.passed:
        CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "detail": ""})["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        rec = CRITERIA[number]
        status = "PASS" if rec.get("passed") else "FAIL"
        detail = f" ({rec['detail']})" if rec["detail"] else ""
        terminalreporter.write_line(f"[{status}] {number}. {rec['title']}{detail}")


def structure(doc_text, **kw):
    return parse_structure(doc_text, **kw)


def doc(conductors, dielectrics=(), background=1.0, world=None, master=None):
    import json

    d = {
        "units": "nm",
        "background_eps": background,
        "conductors": [{"id": i, "lo": list(lo), "hi": list(hi)} for i, (lo, hi) in enumerate(conductors, 1)],
        "dielectrics": [{"lo": list(lo), "hi": list(hi), "eps": e} for lo, hi, e in dielectrics],
        "master": master or 1,
    }
    if world is not None:
        d["world"] = {"lo": list(world[0]), "hi": list(world[1])}
    return json.dumps(d)
