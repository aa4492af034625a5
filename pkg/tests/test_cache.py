import random
import threading

from lightfaas.dataplane.cache import FunctionCache
from lightfaas.model import EndpointSet, FunctionSpec, SandboxRecord, SchedulingConfig


def rec(i, worker=0):
    return SandboxRecord(i, "127.0.0.1", 30000 + i, worker)


def cache(target=1):
    return FunctionCache(FunctionSpec("f", "echo", sched=SchedulingConfig(concurrency_target=target)))


def test_picks_least_loaded():
    c = cache(target=3)
    c.apply(EndpointSet("f", 1, (rec(1), rec(2), rec(3))))
    for sid, n in ((1, 2), (2, 0), (3, 1)):
        c.endpoints[sid].inflight = n
    assert c.pick_endpoint().record.id == 2
    assert c.endpoints[2].inflight == 1


def test_none_when_all_at_target():
    c = cache(target=2)
    c.apply(EndpointSet("f", 1, (rec(1), rec(2))))
    for ep in c.endpoints.values():
        ep.inflight = 2
    assert c.pick_endpoint() is None and not c.has_free_slot()


def test_stale_version_ignored():
    c = cache()
    assert c.apply(EndpointSet("f", 7, (rec(1),)))
    assert not c.apply(EndpointSet("f", 5, (rec(2),)))
    assert not c.apply(EndpointSet("f", 7, (rec(2),)))
    assert c.version == 7 and list(c.endpoints) == [1]


def test_removed_endpoint_drains_then_disappears():
    c = cache()
    c.apply(EndpointSet("f", 1, (rec(1), rec(2))))
    busy = c.pick_endpoint()
    other = 2 if busy.record.id == 1 else 1
    c.apply(EndpointSet("f", 2, (rec(other),)))
    assert busy.draining and busy.record.id in c.endpoints
    assert [e.record.id for e in c.routable()] == [other]
    assert c.pick_endpoint().record.id == other
    c.release(busy)
    assert busy.record.id not in c.endpoints


def test_forget_removes_idle_endpoint():
    c = cache()
    c.apply(EndpointSet("f", 1, (rec(1),)))
    c.forget(c.endpoints[1])
    assert not c.endpoints


def test_sequential_oracle():
    """10k random ops against a plain dict model."""
    rng = random.Random(3)
    target = 3
    c = cache(target)
    model: dict[int, list] = {}  # id -> [inflight, draining]
    version = 0
    held = []
    for _ in range(10_000):
        op = rng.random()
        if op < 0.45:
            ep = c.pick_endpoint()
            free = [(v[0], sid) for sid, v in model.items() if not v[1] and v[0] < target]
            if not free:
                assert ep is None
            else:
                assert ep is not None and model[ep.record.id][0] == min(free)[0]
                model[ep.record.id][0] += 1
                held.append(ep)
        elif op < 0.85 and held:
            ep = held.pop(rng.randrange(len(held)))
            c.release(ep)
            m = model[ep.record.id]
            m[0] -= 1
            if m[1] and m[0] == 0:
                del model[ep.record.id]
        else:
            version += rng.choice([1, 1, 1, -1])
            ids = rng.sample(range(1, 9), rng.randint(0, 5))
            applied = c.apply(EndpointSet("f", version, tuple(rec(i) for i in ids)))
            if applied:
                for i in ids:
                    if i in model:
                        model[i][1] = False
                    else:
                        model[i] = [0, False]
                for sid in list(model):
                    if sid not in ids:
                        if model[sid][0] == 0:
                            del model[sid]
                        else:
                            model[sid][1] = True
                # endpoints replaced by a fresh object keep old holders on the old object
                held = [h for h in held if c.endpoints.get(h.record.id) is h or h.record.id not in model or True]
        assert {sid: [e.inflight, e.draining] for sid, e in c.endpoints.items()} == model


def test_threaded_reservations_never_exceed_target():
    target = 2
    c = cache(target)
    c.apply(EndpointSet("f", 1, tuple(rec(i) for i in range(4))))
    stop = threading.Event()
    errors = []

    def hammer(seed):
        rng = random.Random(seed)
        while not stop.is_set():
            ep = c.pick_endpoint()
            if ep is not None:
                if ep.inflight > target:
                    errors.append(ep.inflight)
                if rng.random() < 0.5:
                    threading.Event().wait(0)
                c.release(ep)

    threads = [threading.Thread(target=hammer, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    threading.Event().wait(1.0)
    stop.set()
    for t in threads:
        t.join()
    assert not errors
    assert all(e.max_inflight <= target for e in c.endpoints.values())
    assert all(e.inflight == 0 for e in c.endpoints.values())
    assert sum(e.served for e in c.endpoints.values()) > 0
