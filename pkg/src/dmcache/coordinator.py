"""In-process membership and failure authority.

Holds the live-CN list every engine consults, the owner-tracking mode, and
runs fences: caching is switched off everywhere, operations that started
under the old epoch drain, caches are wiped, then caching comes back on.
The coordinator acts on node memory directly (an administrative path) and is
never itself failed.
"""

from .owner_tracking import SLOT_BYTES, TrackingPolicy


class Coordinator:
    def __init__(self, fabric, policy=None, poll=None):
        self.fabric = fabric
        self.sim = fabric.sim
        self.policy = policy or TrackingPolicy()
        self.poll = poll if poll is not None else fabric.config.base_rtt
        self.engines = {}
        self.manager = None
        self.mn_layouts = {}
        self._live = []
        self.dead = set()
        self.epoch = 0
        self.mode = self.policy.resolve(0)
        self.fencing = False
        self.fences = []        # (start, end, reason)
        self._pending = []
        self._fence_proc = None
        self.on_mn_recover = []

    # -- membership -------------------------------------------------------------
    def register(self, engine):
        self.engines[engine.cn] = engine
        if engine.cn not in self._live:
            self._live.append(engine.cn)
            self._live.sort()
        if not self.epoch:
            # initial membership; later changes switch mode inside a fence
            self.mode = self.policy.resolve(len(self._live))

    def register_mn(self, mn, layout):
        self.mn_layouts[mn] = layout

    def live_cns(self):
        return self._live

    def is_live(self, cn):
        return cn in self._live

    def scale(self, add=None, remove=None):
        """Add or remove a CN behind a fence; returns the new epoch."""
        if add is not None:
            self.register(add)
            return self._start_fence("add %d" % add.cn)
        if remove is not None and remove in self._live:
            self._live = [c for c in self._live if c != remove]
            return self._start_fence("remove %d" % remove)
        return self.epoch

    def report_timeout(self, src, dst):
        """Declare ``dst`` failed after a timeout seen by ``src``; idempotent."""
        if dst in self.dead or self.fabric.alive(dst):
            # already handled, or a stale timeout from before a recovery
            return
        kind = self.fabric.node(dst).kind.value
        self.dead.add(dst)
        if kind == "cn":
            self.scale(remove=dst)
        elif kind == "mn":
            for eng in self._live_engines():
                eng.wipe(reset_owner=True, mn=dst)
            if self.manager is not None:
                self.manager.drop_mn(dst)
            self._start_fence("mn %d down" % dst, mn_event=True)

    def recover_mn(self, mn):
        """Bring a memory node back empty, restore its contents, then fence."""
        self.fabric.recover(mn)
        self.dead.discard(mn)
        for cb in self.on_mn_recover:
            cb(mn)
        return self._start_fence("mn %d recovered" % mn, mn_event=True)

    # -- fences --------------------------------------------------------------------
    def _live_engines(self):
        return [self.engines[c] for c in self._live if c in self.engines]

    def _start_fence(self, reason, mn_event=False):
        self.epoch += 1
        for eng in self.engines.values():
            eng.enabled = False
        self.fencing = True
        self._pending.append((self.epoch, reason, mn_event))
        if self._fence_proc is None or self._fence_proc.done:
            self._fence_proc = self.sim.spawn(self._fence_loop(), name="fence")
        return self.epoch

    def _fence_loop(self):
        start = self.sim.now
        while self._pending:
            epoch = max(p[0] for p in self._pending)
            reasons = [p[1] for p in self._pending]
            mn_event = any(p[2] for p in self._pending)
            self._pending = []
            while any(e.inflight_before(epoch) for e in self._live_engines()):
                yield self.poll
            new_mode = self.policy.resolve(len(self._live))
            changed = new_mode is not self.mode
            for eng in self._live_engines():
                eng.wipe(reset_owner=changed or mn_event)
            if self.manager is not None:
                self.manager.reset_owners(self._live)
            if changed:
                self._clear_owner_sets()
            self.mode = new_mode
            if self._pending:
                continue
            for eng in self._live_engines():
                eng.enabled = True
            self.fencing = False
            self.fences.append((start, self.sim.now, "; ".join(reasons)))

    def _clear_owner_sets(self):
        for mn, layout in self.mn_layouts.items():
            if not self.fabric.alive(mn):
                continue
            d = layout.directory
            mem = self.fabric.memory(mn)
            mem[d.base:d.base + d.slots * SLOT_BYTES] = bytes(d.slots * SLOT_BYTES)

    def in_fence(self, t):
        return self.fencing or any(a <= t <= b for a, b, _ in self.fences)
