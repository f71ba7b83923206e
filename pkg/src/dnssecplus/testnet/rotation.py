"""Long-term key rollovers under continuous resolution load.

Time is simulated: every tick advances the clock, runs nameserver and key
server maintenance, then performs one resolution, so 10 ticks per simulated
second give 10 resolutions per second.
"""

from __future__ import annotations

import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Callable

import dns.rdatatype

from ..keyserver import RotationState
from ..resolver import ResolutionOutcome
from ..wire import Mode
from .hierarchy import Testnet

log = logging.getLogger(__name__)


@dataclass
class Failure:
    time: float
    resolver: str
    name: str
    mode: Mode
    reason: str


@dataclass
class LivenessReport:
    attempts: int = 0
    failures: list[Failure] = field(default_factory=list)
    phases: list[tuple[float, str]] = field(default_factory=list)
    completed_at: float | None = None

    @property
    def ok(self) -> bool:
        return self.completed_at is not None and not self.failures


class BackgroundLoad:
    """Round-robin resolutions over a zone's names, from a long-lived resolver
    (keeps its zone-key cache) and from fresh ones, in both modes."""

    def __init__(self, net: Testnet, zone: str = "example.com.", seed: int = 7):
        self.net = net
        z = net.zone(zone)
        self.names = sorted(
            (name.to_text(), dns.rdatatype.to_text(rdtype))
            for (name, rdtype) in z.data.records
            if rdtype in (dns.rdatatype.A, dns.rdatatype.AAAA, dns.rdatatype.TXT)
        )
        self.warm = net.resolver(rng=random.Random(seed))
        self.rng = random.Random(seed)
        self._cycle = itertools.count()

    def step(self) -> tuple[str, str, Mode, ResolutionOutcome]:
        i = next(self._cycle)
        name, rdtype = self.names[i % len(self.names)]
        mode = Mode.PRIVATE if (i // 2) % 2 else Mode.PLAIN
        if i % 2:
            resolver, label = self.net.resolver(rng=random.Random(self.rng.random())), "cold"
        else:
            # answers are dropped so every resolution reaches a nameserver
            self.warm.cache.clear(answers_only=True)
            resolver, label = self.warm, "warm"
        return label, name, mode, resolver.resolve(name, rdtype, mode)


def run_rotation(
    net: Testnet,
    start: Callable[[], RotationState],
    *,
    rate: float = 10.0,
    skip_waits=False,
    lead: float = 10.0,
    tail: float = 30.0,
    after_start: Callable[[], None] | None = None,
    max_time: float = 900.0,
    load: BackgroundLoad | None = None,
) -> LivenessReport:
    """Resolve for ``lead`` seconds, start a rollover and keep resolving until
    it is done plus ``tail`` seconds. Failures during the lead-in count too."""
    load = load or BackgroundLoad(net)
    report = LivenessReport()
    dt = 1.0 / rate

    def tick(kind: str) -> None:
        net.clock.advance(dt)
        net.maintain(skip_waits=skip_waits)
        label, name, mode, out = load.step()
        report.attempts += 1
        if not out.ok:
            report.failures.append(Failure(net.clock.now() - t0, label, name, mode, out.describe_failure()))
            log.info("resolution failed (%s): %s %s %s", kind, name, mode.name, out.describe_failure())

    t0 = net.clock.now() + lead
    for _ in range(round(lead * rate)):
        tick("lead-in")
    t0 = net.clock.now()
    state = start()
    net.maintain(skip_waits=skip_waits)
    if after_start is not None:
        after_start()
    last_phase = None
    while net.clock.now() - t0 < max_time:
        if state.phase is not last_phase:
            last_phase = state.phase
            report.phases.append((net.clock.now() - t0, state.phase.name))
        if state.done and report.completed_at is None:
            report.completed_at = net.clock.now() - t0
        if report.completed_at is not None and net.clock.now() - t0 >= report.completed_at + tail:
            break
        tick(f"{state.kind} rotation")
    return report
