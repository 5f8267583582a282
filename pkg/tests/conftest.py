import numpy as np
import pytest

from hybridmap.core import CameraIntrinsics, Pose, RGBDFrame


@pytest.fixture
def intrinsics():
    # principal point on a pixel center so the optical axis hits pixel (59, 79)
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=79.5, cy=59.5, width=200, height=120)


def make_frame(intr, depth, pose=None, color=None, frame_id=0):
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), (intr.height, intr.width)).copy()
    if color is None:
        color = np.full((intr.height, intr.width, 3), 0.5)
    return RGBDFrame(color, depth, intr, pose or Pose.identity(), frame_id)


@pytest.fixture
def frame_factory(intrinsics):
    def factory(depth=2.0, pose=None, color=None, frame_id=0, intr=None):
        return make_frame(intr or intrinsics, depth, pose, color, frame_id)

    return factory


# ------------------------------------------------------------------ acceptance report
_CRITERIA: dict[str, dict] = {}  # id -> title and per-phase outcomes
_ACCEPTANCE_ITEMS: dict[str, dict] = {}  # node id -> its criterion entry


def pytest_runtest_logreport(report):
    entry = _ACCEPTANCE_ITEMS.get(report.nodeid)
    if entry is None:
        return
    if report.when == "call" or report.outcome != "passed":
        entry["status"].append(report.outcome)


def pytest_collection_finish(session):
    for item in session.items:  # after -k / -m deselection
        mark = item.get_closest_marker("criterion")
        if mark is None:
            continue
        cid, title = mark.args
        crit = _CRITERIA.setdefault(cid, {"title": title, "status": []})
        _ACCEPTANCE_ITEMS[item.nodeid] = crit


def pytest_terminal_summary(terminalreporter):
    if not any(c["status"] for c in _CRITERIA.values()):
        return  # e.g. --collect-only
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        crit = _CRITERIA[cid]
        status = crit["status"]
        if not status:
            verdict = "NOT RUN"
        elif all(s == "passed" for s in status):
            verdict = "PASS"
        elif any(s == "failed" for s in status):
            verdict = "FAIL"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(f"{cid:>3} {verdict:<7} {crit['title']}")
