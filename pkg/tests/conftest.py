import io

import pytest

from aakt.data import Interaction, StudentSequence, parse_interactions


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Print one PASS/FAIL line per acceptance criterion."""
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("criterion")
    if marker:
        status = "PASS" if report.passed else "FAIL"
        number, name = marker.args
        print(f"\ncriterion {number:>2} ({name}): {status}")


def make_sequence(records, student_id="s0"):
    """records: list of (question_id, skill_ids, correct, time_ms)."""
    interactions = [
        Interaction(
            question_id=q,
            skill_ids=(skills,) if isinstance(skills, int) else tuple(skills),
            correct=c,
            time_ms=t,
            order_key=float(i),
        )
        for i, (q, skills, c, t) in enumerate(records)
    ]
    return StudentSequence(student_id, interactions)


@pytest.fixture
def tiny_dataset():
    text = (
        "student_id,question_id,skill_ids,correct,time_ms\n"
        "A,q1,3;7,1,1000\n"
        "A,q2,3,0,2000\n"
        "B,q1,7,1,500\n"
    )
    return parse_interactions(io.StringIO(text))
