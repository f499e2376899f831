import threading
import time

import pytest

from cfdtm.errors import WatchdogTimeoutError
from cfdtm.executor import ConditionExecutor
from cfdtm.versioning import VersionCounters


@pytest.fixture
def rig():
    executor = ConditionExecutor(workers=2)
    vc = VersionCounters("x")
    vc.next_grant = 10
    vc.add_hook(executor.on_counter_change)
    yield executor, vc
    executor.close()


def test_condition_true_at_submit_runs_immediately(rig):
    executor, vc = rig
    handle = executor.submit("x", lambda: True, lambda: "ran")
    assert handle.join(5.0) == "ran"


def test_parked_until_counter_change(rig):
    executor, vc = rig
    handle = executor.submit("x", lambda: vc.access_ready(2), lambda: vc.released_version)
    assert not handle.done()
    time.sleep(0.05)
    assert not handle.done()
    vc.mark_released(1)
    assert handle.join(5.0) == 1          # condition held at fire time


def test_two_tasks_fire_in_version_order(rig):
    executor, vc = rig
    fired = []

    def make_action(pv):
        def action():
            fired.append(pv)
            if pv < 3:
                vc.mark_released(pv)      # cascades the next task
        return action

    h3 = executor.submit("x", lambda: vc.access_ready(3), make_action(3))
    h2 = executor.submit("x", lambda: vc.access_ready(2), make_action(2))
    vc.mark_released(1)
    h2.join(5.0)
    h3.join(5.0)
    assert fired == [2, 3]


def test_one_change_enables_two_tasks_submission_order(rig):
    executor, vc = rig
    fired = []
    h1 = executor.submit("x", lambda: vc.released_version >= 1,
                         lambda: fired.append("first"))
    h2 = executor.submit("x", lambda: vc.released_version >= 1,
                         lambda: fired.append("second"))
    vc.mark_released(1)
    h1.join(5.0)
    h2.join(5.0)
    assert fired == ["first", "second"]


def test_irrelevant_change_runs_nothing(rig):
    executor, vc = rig
    handle = executor.submit("x", lambda: vc.access_ready(3), lambda: "ran")
    vc.mark_released(1)                   # enables pv=2, not pv=3
    time.sleep(0.05)
    assert not handle.done()


def test_action_failure_is_isolated(rig):
    executor, vc = rig

    def boom():
        raise ValueError("boom")

    bad = executor.submit("x", lambda: vc.access_ready(2), boom)
    good = executor.submit("x", lambda: vc.access_ready(2), lambda: "ok")
    vc.mark_released(1)
    with pytest.raises(ValueError):
        bad.join(5.0)
    assert good.join(5.0) == "ok"         # failure never killed the executor


def test_join_before_fire_blocks_then_returns(rig):
    executor, vc = rig
    handle = executor.submit("x", lambda: vc.access_ready(2), lambda: 42)
    results = []
    thread = threading.Thread(target=lambda: results.append(handle.join(10.0)))
    thread.start()
    time.sleep(0.05)
    assert not results
    vc.mark_released(1)
    thread.join(5.0)
    assert results == [42]


def test_double_join_same_outcome(rig):
    executor, vc = rig
    handle = executor.submit("x", lambda: True, lambda: {"v": 1})
    first = handle.join(5.0)
    assert handle.join(5.0) is first


def test_join_timeout(rig):
    executor, vc = rig
    handle = executor.submit("x", lambda: False, lambda: None)
    with pytest.raises(WatchdogTimeoutError):
        handle.join(0.05)


def test_cancel_parked(rig):
    executor, vc = rig
    ran = []
    handle = executor.submit("x", lambda: vc.access_ready(2), lambda: ran.append(1))
    assert executor.cancel_parked(handle)
    vc.mark_released(1)
    time.sleep(0.05)
    assert not ran
    assert handle.join(1.0) is None


def test_cancel_after_fire_reports_false(rig):
    executor, vc = rig
    handle = executor.submit("x", lambda: True, lambda: "ran")
    handle.join(5.0)
    assert not executor.cancel_parked(handle)


def test_no_lost_wakeups_under_scripted_sequences(rig):
    # Every task whose condition eventually holds forever must run, for any
    # counter advance pattern.
    executor, vc = rig
    handles = [executor.submit("x", lambda pv=pv: vc.access_ready(pv),
                               lambda pv=pv: vc.mark_released(pv))
               for pv in range(2, 8)]
    vc.mark_released(1)
    for handle in handles:
        handle.join(5.0)
    assert vc.released_version == 7
