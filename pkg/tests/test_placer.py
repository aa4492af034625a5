import random

import pytest

from lightfaas.controlplane.placer import NoFeasibleWorker, WorkerState, WorkerStatus, place, release, score
from lightfaas.model import ComponentKind, ComponentRecord


def worker(i, cpu=1000, mem=1000, used_cpu=0, used_mem=0, status=WorkerStatus.HEALTHY):
    rec = ComponentRecord(ComponentKind.WORKER_NODE, f"w{i}", "127.0.0.1", 9000 + i, cpu, mem, index=i)
    return WorkerState(rec, 0.0, used_cpu, used_mem, status)


def test_prefers_most_free_capacity():
    ws = [worker(0, used_cpu=500), worker(1, used_cpu=100), worker(2, used_mem=900)]
    assert place(100, 100, ws).index == 1
    assert ws[1].cpu_committed == 200 and ws[1].mem_committed == 100


def test_score_is_mean_free_fraction_after():
    w = worker(0, cpu=1000, mem=2000, used_cpu=200, used_mem=1000)
    assert score(w, 300, 500) == pytest.approx(0.5 * 0.5 + 0.5 * 0.25)


def test_tie_goes_to_lowest_index():
    ws = [worker(3), worker(1), worker(2)]
    assert place(10, 10, ws).index == 1


def test_skips_unhealthy_and_full():
    ws = [worker(0, status=WorkerStatus.SUSPECT), worker(1, status=WorkerStatus.DEAD), worker(2, used_cpu=950), worker(3, used_cpu=900)]
    assert place(100, 10, ws).index == 3
    with pytest.raises(NoFeasibleWorker):
        place(200, 10, ws)


def test_dry_run_does_not_commit():
    ws = [worker(0)]
    place(10, 10, ws, commit=False)
    assert ws[0].cpu_committed == 0


def test_release_floors_at_zero():
    w = worker(0, used_cpu=5, used_mem=5)
    release(w, 10, 10)
    assert (w.cpu_committed, w.mem_committed) == (0, 0)


def test_never_overcommits_random_states():
    rng = random.Random(7)
    for _ in range(10_000):
        ws = [worker(i, rng.randint(1, 4000), rng.randint(1, 8192), status=rng.choice(list(WorkerStatus)))
              for i in range(rng.randint(1, 6))]
        for w in ws:
            w.cpu_committed = rng.randint(0, w.record.cpu_capacity)
            w.mem_committed = rng.randint(0, w.record.mem_capacity)
        cpu, mem = rng.randint(0, 1000), rng.randint(0, 2048)
        feasible = [w for w in ws if w.status == WorkerStatus.HEALTHY and w.fits(cpu, mem)]
        try:
            chosen = place(cpu, mem, ws)
        except NoFeasibleWorker:
            assert not feasible
            continue
        assert chosen in feasible
        assert chosen.cpu_committed <= chosen.record.cpu_capacity
        assert chosen.mem_committed <= chosen.record.mem_capacity
        # no feasible worker would have scored strictly better
        chosen_score = score(chosen, -cpu, -mem)  # undo the commit for comparison
        assert all(score(w, cpu, mem) <= chosen_score + 1e-12 for w in feasible if w is not chosen)
