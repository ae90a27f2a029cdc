"""Cooperative scheduler for generator-based simulated processes.

Processes are generators. What they yield tells the scheduler what to do:

* a number -- sleep for that much simulated time (every fabric op does this,
  so every fabric op is an interleaving point);
* ``Join(gens)`` -- run the generators as child processes and resume with the
  list of their results once all finished (exceptions are returned in place);
* an ``Event`` -- park until the event is triggered.

Two scheduling policies exist. The default orders runnable processes by
simulated time with a sequence-number tie-break, which makes a run a pure
function of its inputs. When a ``chooser`` is supplied, time ordering is
ignored and the chooser picks which runnable process steps next; this is
what schedule enumeration uses.
"""

from heapq import heappop, heappush
import random

__all__ = ["Event", "Join", "Process", "Scheduler", "run_sync", "DeadlockError"]


class DeadlockError(RuntimeError):
    pass


class Join:
    __slots__ = ("gens",)

    def __init__(self, gens):
        self.gens = list(gens)


class Event:
    __slots__ = ("sim", "triggered", "value", "_waiters")

    def __init__(self, sim):
        self.sim = sim
        self.triggered = False
        self.value = None
        self._waiters = []

    def succeed(self, value=None):
        if self.triggered:
            return
        self.triggered = True
        self.value = value
        for proc in self._waiters:
            self.sim._schedule(proc, 0.0, value)
        self._waiters = []


class Process:
    __slots__ = ("gen", "name", "pid", "done", "result", "error",
                 "parent", "slot", "pending", "results")

    def __init__(self, gen, name, pid, parent=None, slot=-1):
        self.gen = gen
        self.name = name
        self.pid = pid
        self.done = False
        self.result = None
        self.error = None
        self.parent = parent
        self.slot = slot
        self.pending = 0
        self.results = None

    def __repr__(self):
        return "<Process %s#%d%s>" % (self.name, self.pid, " done" if self.done else "")


class Scheduler:
    """Run simulated processes; see module docstring for the protocol.

    ``jitter`` > 0 scales every sleep by a random factor in [1, 1 + jitter]
    drawn from ``rng``; with an unseeded rng this gives the free-running,
    non-reproducible mode.
    """

    def __init__(self, chooser=None, jitter=0.0, rng=None):
        self.now = 0.0
        self.steps = 0
        self.chooser = chooser
        self.jitter = jitter
        self.rng = rng if rng is not None else random.Random()
        self.on_step = None
        self.current = None
        self._queue = []
        self._seq = 0
        self._pid = 0
        self._live = 0

    # -- process management -------------------------------------------------
    def spawn(self, gen, name="proc", delay=0.0):
        self._pid += 1
        proc = Process(gen, name, self._pid)
        self._live += 1
        self._schedule(proc, delay, None)
        return proc

    def event(self):
        return Event(self)

    @property
    def idle(self):
        return not self._queue

    def _schedule(self, proc, delay, value, exc=None):
        self._seq += 1
        heappush(self._queue, (self.now + delay, self._seq, proc, value, exc))

    def run(self, until=None, max_steps=None):
        """Step processes until none are runnable (or a bound is hit)."""
        queue = self._queue
        limit = None if max_steps is None else self.steps + max_steps
        while queue:
            if self.chooser is not None:
                entry = self._choose()
            else:
                if until is not None and queue[0][0] > until:
                    self.now = until
                    return
                entry = heappop(queue)
            t, _, proc, value, exc = entry
            if t > self.now:
                self.now = t
            self.steps += 1
            self._resume(proc, value, exc)
            if self.on_step is not None:
                self.on_step(self)
            if limit is not None and self.steps >= limit:
                return
        if until is not None and until > self.now:
            self.now = until

    def _choose(self):
        queue = self._queue
        queue.sort(key=lambda e: e[1])
        i = self.chooser(len(queue)) if len(queue) > 1 else 0
        entry = queue.pop(i)
        return entry

    @property
    def current_name(self):
        return self.current.name if self.current is not None else None

    def _resume(self, proc, value, exc):
        self.current = proc
        try:
            if exc is not None:
                cmd = proc.gen.throw(exc)
            else:
                cmd = proc.gen.send(value)
        except StopIteration as stop:
            self._finish(proc, stop.value, None)
            return
        except Exception as err:  # noqa: BLE001 -- routed to the joiner
            self._finish(proc, None, err)
            return
        self._dispatch(proc, cmd)

    def _dispatch(self, proc, cmd):
        cls = type(cmd)
        if cls is float or cls is int:
            delay = float(cmd)
            if self.jitter and delay > 0.0:
                delay *= 1.0 + self.jitter * self.rng.random()
            self._schedule(proc, delay, None)
        elif cmd is None:
            self._schedule(proc, 0.0, None)
        elif cls is Join:
            gens = cmd.gens
            if not gens:
                self._schedule(proc, 0.0, [])
                return
            proc.pending = len(gens)
            proc.results = [None] * len(gens)
            for slot, gen in enumerate(gens):
                self._pid += 1
                child = Process(gen, proc.name, self._pid, parent=proc, slot=slot)
                self._schedule(child, 0.0, None)
        elif cls is Event:
            if cmd.triggered:
                self._schedule(proc, 0.0, cmd.value)
            else:
                cmd._waiters.append(proc)
        else:
            self._schedule(proc, 0.0, None,
                           TypeError("process yielded unsupported %r" % (cmd,)))

    def _finish(self, proc, result, error):
        proc.done = True
        proc.result = result
        proc.error = error
        parent = proc.parent
        if parent is None:
            self._live -= 1
            if error is not None:
                raise error
            return
        parent.results[proc.slot] = error if error is not None else result
        parent.pending -= 1
        if parent.pending == 0:
            results, parent.results = parent.results, None
            self._schedule(parent, 0.0, results)


def run_sync(gen):
    """Drive a process generator to completion without a scheduler.

    Sleeps are skipped and joined children run one after another. Handy for
    single-actor tests and setup code.
    """
    value = None
    exc = None
    while True:
        try:
            cmd = gen.throw(exc) if exc is not None else gen.send(value)
        except StopIteration as stop:
            return stop.value
        value, exc = None, None
        if type(cmd) is Join:
            results = []
            for child in cmd.gens:
                try:
                    results.append(run_sync(child))
                except Exception as err:  # noqa: BLE001
                    results.append(err)
            value = results
        elif type(cmd) is Event:
            if not cmd.triggered:
                exc = DeadlockError("run_sync cannot wait on an untriggered event")
            else:
                value = cmd.value
