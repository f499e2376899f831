import threading
import time

import pytest

from cfdtm.client import Session, Transaction
from cfdtm.errors import ForcedAbortError, LockProtocolError
from cfdtm.history import RELEASE
from cfdtm.objects import counter_cell
from cfdtm.transport import LocalCluster


@pytest.fixture
def cluster():
    c = LocalCluster(1, wait_timeout=20.0)
    yield c
    c.close()


def session(cluster, name):
    return Session(cluster.channel(), recorder=cluster.recorder, client_id=name)


def spawn(fn):
    t = threading.Thread(target=fn)
    t.start()
    return t


def events_of(cluster, prefix, kind, **match):
    out = []
    for e in cluster.recorder.snapshot():
        if e.kind != kind or not e.txn_id.startswith(prefix):
            continue
        if all(getattr(e, k) == v for k, v in match.items()):
            out.append(e)
    return out


# -- call-count-only versioning -------------------------------------------------------

def test_sva_single_access_releases_immediately(cluster):
    cluster.register(0, "x", counter_cell())
    s1, s2 = session(cluster, "a"), session(cluster, "b")
    t1 = Transaction(s1, algorithm="sva")
    x1 = t1.accesses(s1.locate("x"), max_reads=1, max_writes=0, max_updates=0)
    t2 = Transaction(s2, algorithm="sva")
    x2 = t2.accesses(s2.locate("x"), max_reads=1, max_writes=0, max_updates=0)
    t1.begin()
    t2.begin()
    assert x1.read() == 0                 # bound hit: release now
    got = []
    worker = spawn(lambda: got.append(x2.read()))
    worker.join(10.0)
    assert not worker.is_alive(), "successor's access should not wait for the commit"
    t1.commit()
    t2.commit()                           # terminations stay version-ordered
    assert got == [0]


def test_sva_pure_read_still_blocks_successor_until_release(cluster):
    # Operation-type agnostic: with the bound not exhausted a read keeps the
    # object, unlike the classified engine where a read-only declaration
    # releases at begin.
    cluster.register(0, "x", counter_cell())
    s1, s2 = session(cluster, "a"), session(cluster, "b")
    t1 = Transaction(s1, algorithm="sva")
    x1 = t1.accesses(s1.locate("x"), max_reads=2, max_writes=0, max_updates=0)
    t2 = Transaction(s2, algorithm="sva")
    x2 = t2.accesses(s2.locate("x"), max_reads=1, max_writes=0, max_updates=0)
    t1.begin()
    t2.begin()
    assert x1.read() == 0                 # one read left: still held
    got = []
    worker = spawn(lambda: got.append(x2.read()))
    worker.join(0.3)
    assert worker.is_alive(), "agnostic versioning must block a pure read"
    outcome = t1.commit()                 # releases at termination
    worker.join(10.0)
    assert not worker.is_alive()
    assert outcome.committed and got == [0]
    t2.commit()


def test_sva_reads_after_release_are_bound_violations(cluster):
    cluster.register(0, "x", counter_cell())
    s = session(cluster, "a")
    t = Transaction(s, algorithm="sva")
    x = t.accesses(s.locate("x"), max_reads=1, max_writes=0, max_updates=0)
    t.begin()
    x.read()
    with pytest.raises(ForcedAbortError):
        x.read()


def test_sva_unbounded_releases_at_commit(cluster):
    cluster.register(0, "x", counter_cell())
    s = session(cluster, "a")
    t = Transaction(s, algorithm="sva")
    x = t.accesses(s.locate("x"))
    t.begin()
    x.increment()
    x.increment()
    assert not events_of(cluster, "a", RELEASE)
    t.commit()
    assert [e.pv for e in events_of(cluster, "a", RELEASE, object_id="x")] == [1]


def test_sva_abort_restores_and_cascades(cluster):
    cluster.register(0, "x", counter_cell())
    s1, s2 = session(cluster, "a"), session(cluster, "b")
    t1 = Transaction(s1, algorithm="sva")
    x1 = t1.accesses(s1.locate("x"), max_reads=0, max_writes=0, max_updates=1)
    t2 = Transaction(s2, algorithm="sva")
    x2 = t2.accesses(s2.locate("x"), max_reads=0, max_writes=0, max_updates=1)
    t1.begin()
    t2.begin()
    assert x1.increment() == 1
    assert x2.increment() == 2
    t1.abort()
    assert t2.commit().forced
    assert s1.peek_state(s1.locate("x")) == {"value": 0}


# -- lock baselines ----------------------------------------------------------------------

@pytest.mark.parametrize("algorithm", ["mutex-s2pl", "mutex-2pl", "rw-s2pl", "rw-2pl"])
def test_disjoint_transactions_run_in_parallel(cluster, algorithm):
    cluster.register(0, "x", counter_cell())
    cluster.register(0, "y", counter_cell())
    s1, s2 = session(cluster, "a"), session(cluster, "b")
    t1 = Transaction(s1, algorithm=algorithm)
    x = t1.updates(s1.locate("x"))
    t2 = Transaction(s2, algorithm=algorithm)
    y = t2.updates(s2.locate("y"))
    t1.begin()
    t2.begin()                            # would deadlock if not disjoint
    other_done = threading.Event()

    def flow2():
        y.increment()
        t2.commit()
        other_done.set()

    worker = spawn(flow2)
    assert other_done.wait(10.0), "disjoint transaction was blocked"
    x.increment()
    t1.commit()
    worker.join(5.0)


def test_rw_readers_share(cluster):
    cluster.register(0, "x", counter_cell())
    s1, s2 = session(cluster, "a"), session(cluster, "b")
    t1 = Transaction(s1, algorithm="rw-s2pl")
    x1 = t1.reads(s1.locate("x"))
    t2 = Transaction(s2, algorithm="rw-s2pl")
    x2 = t2.reads(s2.locate("x"))
    t1.begin()
    t2.begin()                            # shared lock: no blocking
    assert x1.read() == 0
    assert x2.read() == 0
    t1.commit()
    t2.commit()


def test_mutex_blocks_second_reader(cluster):
    cluster.register(0, "x", counter_cell())
    s1, s2 = session(cluster, "a"), session(cluster, "b")
    t1 = Transaction(s1, algorithm="mutex-s2pl")
    t1.reads(s1.locate("x"))
    t2 = Transaction(s2, algorithm="mutex-s2pl")
    t2.reads(s2.locate("x"))
    t1.begin()
    started = threading.Event()
    worker = spawn(lambda: (t2.begin(), started.set()))
    assert not started.wait(0.3), "mutex variant must not share"
    t1.commit()
    assert started.wait(10.0)
    t2.commit()
    worker.join(5.0)


def test_2pl_early_unlock_lets_successor_in_before_commit(cluster):
    cluster.register(0, "x", counter_cell())
    s1, s2 = session(cluster, "a"), session(cluster, "b")
    t1 = Transaction(s1, algorithm="mutex-2pl")
    x1 = t1.accesses(s1.locate("x"), max_reads=0, max_writes=0, max_updates=1)
    t2 = Transaction(s2, algorithm="mutex-2pl")
    x2 = t2.updates(s2.locate("x"), max_updates=1)
    t1.begin()
    assert x1.increment() == 1            # declared last access: auto unlock
    got = []

    def flow2():
        t2.begin()
        got.append(x2.increment())
        got.append(t2.commit().committed)

    worker = spawn(flow2)
    worker.join(10.0)
    assert not worker.is_alive(), "successor should start before the commit"
    t1.commit()
    assert got == [2, True]


def test_s2pl_never_unlocks_early(cluster):
    cluster.register(0, "x", counter_cell())
    s = session(cluster, "a")
    t = Transaction(s, algorithm="mutex-s2pl")
    x = t.updates(s.locate("x"), max_updates=1)
    t.begin()
    x.increment()
    from cfdtm.errors import TransactionStateError
    with pytest.raises(TransactionStateError):
        t.unlock_early(s.locate("x"))
    t.commit()


def test_double_early_unlock_rejected(cluster):
    cluster.register(0, "x", counter_cell())
    s = session(cluster, "a")
    t = Transaction(s, algorithm="mutex-2pl")
    t.updates(s.locate("x"))
    t.begin()
    t.unlock_early(s.locate("x"))
    with pytest.raises(LockProtocolError):
        t.unlock_early(s.locate("x"))
    t.commit()


def test_s2pl_abort_restores(cluster):
    cluster.register(0, "x", counter_cell())
    s = session(cluster, "a")
    t = Transaction(s, algorithm="mutex-s2pl")
    x = t.updates(s.locate("x"))
    t.begin()
    x.increment()
    t.abort()
    assert s.peek_state(s.locate("x")) == {"value": 0}


# -- global lock -----------------------------------------------------------------------------

def test_glock_serializes_bodies(cluster):
    cluster.register(0, "x", counter_cell())
    channel = cluster.channel()
    concurrency = []
    active = [0]
    lock = threading.Lock()

    def one_txn(name):
        s = Session(channel, recorder=cluster.recorder, client_id=name)
        t = Transaction(s, algorithm="glock")
        x = t.updates(s.locate("x"))
        t.begin()
        with lock:
            active[0] += 1
            concurrency.append(active[0])
        x.increment()
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        t.commit()

    threads = [spawn(lambda n=f"g{i}": one_txn(n)) for i in range(6)]
    for t in threads:
        t.join(20.0)
        assert not t.is_alive()
    assert max(concurrency) == 1, "bodies overlapped under the global lock"
    s = Session(channel, recorder=cluster.recorder)
    assert s.peek_state(s.locate("x")) == {"value": 6}


def test_glock_abort_restores_nothing(cluster):
    # Nothing was ever visible early, and the baseline deliberately has no
    # undo: an abort keeps the modifications.
    cluster.register(0, "x", counter_cell())
    s = session(cluster, "a")
    t = Transaction(s, algorithm="glock")
    x = t.updates(s.locate("x"))
    t.begin()
    x.increment()
    t.abort()
    assert s.peek_state(s.locate("x")) == {"value": 1}
    # And the lock is free again.
    t2 = Transaction(s, algorithm="glock")
    x2 = t2.updates(s.locate("x"))
    t2.begin()
    x2.increment()
    assert t2.commit().committed
