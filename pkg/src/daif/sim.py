"""Event-driven simulator of a parallel-machine workstation.

A finite upstream buffer of capacity ``K`` feeds ``c`` identical machines.
Arrivals, processing, startups, failures and repairs are exponential clocks;
the plant is advanced one state change at a time and every state change is a
decision point for the controller.

Times are in seconds, power in kW, energy in kW*s (kJ).
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import functools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np

DAY = 86_400.0
HOUR = 3_600.0


class ConfigError(ValueError):
    """Invalid simulator configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ActionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Mode(enum.IntEnum):
    # order fixes the one-hot layout of machine blocks
    BUSY = 0
    IDLE = 1
    STANDBY = 2
    STARTUP = 3
    FAILED = 4


N_MODES = len(Mode)


class EventKind(enum.Enum):
    ARRIVAL = "arrival"
    COMPLETION = "completion"
    STARTUP_DONE = "startup_done"
    FAILURE = "failure"
    REPAIR = "repair"


@dataclass(frozen=True)
class SimConfig:
    """Workstation parameters. Defaults reproduce the industrial case study."""

    c: int = 6
    K: int = 10
    lambda_arrival: float = 0.050
    mu_process: float = 0.012
    delta_startup: float = 0.033
    psi_fail: float = 0.001
    xi_repair: float = 0.033
    w_busy: float = 15.0
    w_startup: float = 10.0
    w_idle: float = 9.30
    w_standby: float = 0.0
    w_failed: float = 0.0
    t_s: float = 8 * HOUR
    c_r: float = 10.0
    seed: int = 0
    # throughput of the ALL-ON policy; calibrated on demand when unset
    t_max: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if int(self.c) != self.c or self.c < 1:
            raise ConfigError("c", "machine count must be an integer >= 1")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K", "buffer capacity must be an integer >= 1")
        for name in ("lambda_arrival", "mu_process", "delta_startup", "psi_fail", "xi_repair"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(name, f"rate must be > 0, got {value!r}")
        if not self.t_s > 0:
            raise ConfigError("t_s", "window length must be > 0")
        if self.w_standby < 0:
            raise ConfigError("w_standby", "power draw must be >= 0")
        if self.w_failed < 0:
            raise ConfigError("w_failed", "power draw must be >= 0")
        if not (self.w_busy > self.w_startup > self.w_idle > self.w_standby):
            raise ConfigError("w_busy", "power draws must satisfy w_busy > w_startup > w_idle > w_standby")
        if self.t_max is not None and not self.t_max > 0:
            raise ConfigError("t_max", "calibrated throughput must be > 0")

    @property
    def e_max(self) -> float:
        return self.c * self.w_busy

    @property
    def obs_dim(self) -> int:
        return (self.K + 1) + N_MODES * self.c + 3

    def power(self, mode: Mode) -> float:
        return (self.w_busy, self.w_idle, self.w_standby, self.w_startup, self.w_failed)[mode]

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def rates_key(self) -> tuple:
        # everything that influences the ALL-ON throughput
        d = dataclasses.asdict(self)
        d.pop("seed")
        d.pop("t_max")
        d.pop("c_r")
        return tuple(sorted(d.items()))

    @property
    def availability(self) -> float:
        return self.xi_repair / (self.psi_fail + self.xi_repair)

    @property
    def capacity(self) -> float:
        """Long-run processing capacity with every machine on (parts/s)."""
        # failures only happen while busy, so each part costs 1/mu plus expected repair downtime
        per_part = 1.0 / self.mu_process + (self.psi_fail / self.mu_process) / self.xi_repair
        return self.c / per_part


@dataclass(slots=True)
class Machine:
    mode: Mode = Mode.IDLE
    awake: bool = True
    next_time: float = math.inf
    next_kind: EventKind | None = None
    has_part: bool = False


@dataclass(frozen=True)
class Action:
    target_awake: int

    def check(self, c: int) -> None:
        if int(self.target_awake) != self.target_awake or not 1 <= self.target_awake <= c:
            raise ActionError(f"target_awake must be in [1, {c}], got {self.target_awake!r}")


class Kpis(NamedTuple):
    throughput: float  # parts/s over the window
    power: float  # mean kW over the window


class Preference(NamedTuple):
    production: float
    energy: float
    composite: float
    linear: float  # phi-weighted linear form, diagnostics only


class KpiWindow:
    """Trailing window of (time, parts, energy) samples.

    Energy is piecewise linear between samples (power is constant between
    events), so interpolation recovers C(t - t_s) exactly; the part counter is
    a step function and takes the last sample at or before the window start.
    """

    def __init__(self, t_s: float):
        self.t_s = t_s
        self.samples: deque[tuple[float, int, float]] = deque()

    def append(self, t: float, parts: int, energy: float) -> None:
        self.samples.append((t, parts, energy))
        start = t - self.t_s
        s = self.samples
        while len(s) >= 2 and s[1][0] <= start:
            s.popleft()

    def kpis(self, clock: float, parts: int, energy: float, power_now: float) -> Kpis:
        if clock <= 0.0:
            # empty window: no production yet, mean power degenerates to the current draw
            return Kpis(0.0, power_now)
        if clock < self.t_s:
            return Kpis(parts / clock, energy / clock)
        start = clock - self.t_s
        t0, n0, c0 = self.samples[0]
        if len(self.samples) >= 2 and self.samples[1][0] > start > t0:
            t1, _, c1 = self.samples[1]
            c_start = c0 + (c1 - c0) * (start - t0) / (t1 - t0)
        else:
            c_start = c0
        return Kpis((parts - n0) / self.t_s, (energy - c_start) / self.t_s)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def preference_score(
    throughput: float, power: float, config: SimConfig, t_max: float | None = None, phi: float = 0.95
) -> Preference:
    """Map window KPIs to (R_production, R_energy, R).

    ``R = R_production * sigmoid(c_r * R_energy)``; the linear
    ``phi * R_production + (1 - phi) * R_energy`` form is returned alongside
    for logging.
    """
    t_max = config.t_max if t_max is None else t_max
    if t_max is None or not t_max > 0:
        raise StateError("T_max is not initialised; calibrate the ALL-ON throughput first")
    e_max = config.e_max
    if not e_max > 0:
        raise StateError("E_max must be positive")
    r_prod = min(max(throughput / t_max, 0.0), 1.0)
    r_energy = min(max(1.0 - power / e_max, 0.0), 1.0)
    composite = r_prod * sigmoid(config.c_r * r_energy)
    return Preference(r_prod, r_energy, composite, phi * r_prod + (1.0 - phi) * r_energy)


class Workstation:
    """Mutable simulator state plus its transition rules.

    Each instance owns its random streams (one for arrivals, one per
    machine), so two instances never share state.
    """

    def __init__(self, config: SimConfig, seed: int | None = None, trace: bool = False):
        config.validate()
        self.config = config
        self.seed = config.seed if seed is None else seed
        ss = np.random.SeedSequence(self.seed)
        children = ss.spawn(config.c + 1)
        self._rng_arrival = np.random.Generator(np.random.PCG64(children[0]))
        self._rng_machines = [np.random.Generator(np.random.PCG64(ch)) for ch in children[1:]]
        self._power_by_mode = tuple(config.power(m) for m in Mode)

        self.clock = 0.0
        self.buffer = 0
        self.machines = [Machine() for _ in range(config.c)]
        self.parts_produced = 0
        self.energy = 0.0
        self.arrivals = 0
        self.blocked = 0
        self.events = 0
        self.n_startups = 0
        self.n_standby = 0
        self.next_arrival = self._exp(self._rng_arrival, config.lambda_arrival)
        self.window = KpiWindow(config.t_s)
        self.window.append(0.0, 0, 0.0)
        self._t_max = config.t_max
        self.trace: list[tuple] | None = [] if trace else None

    # -- sampling ---------------------------------------------------------

    @staticmethod
    def _exp(rng: np.random.Generator, rate: float) -> float:
        return float(rng.exponential(1.0 / rate))

    # -- derived quantities -----------------------------------------------

    @property
    def energy_kwh(self) -> float:
        return self.energy / HOUR

    @property
    def power(self) -> float:
        p = self._power_by_mode
        return sum(p[m.mode] for m in self.machines)

    @property
    def t_max(self) -> float:
        if self._t_max is None:
            self._t_max = calibrate_t_max(self.config)
        return self._t_max

    def mode_counts(self) -> list[int]:
        counts = [0] * N_MODES
        for m in self.machines:
            counts[m.mode] += 1
        return counts

    @property
    def awake_count(self) -> int:
        return sum(m.awake for m in self.machines)

    def next_event_time(self) -> float:
        return min(self.next_arrival, min(m.next_time for m in self.machines))

    # -- machine transitions ----------------------------------------------

    def _start_busy(self, i: int, m: Machine) -> None:
        cfg = self.config
        rng = self._rng_machines[i]
        done = self._exp(rng, cfg.mu_process)
        fail = self._exp(rng, cfg.psi_fail)
        m.mode = Mode.BUSY
        m.has_part = True
        if fail < done:
            m.next_time, m.next_kind = self.clock + fail, EventKind.FAILURE
        else:
            m.next_time, m.next_kind = self.clock + done, EventKind.COMPLETION

    def _start_startup(self, i: int, m: Machine) -> None:
        m.mode = Mode.STARTUP
        m.next_time = self.clock + self._exp(self._rng_machines[i], self.config.delta_startup)
        m.next_kind = EventKind.STARTUP_DONE
        self.n_startups += 1

    def _to_standby(self, m: Machine) -> None:
        m.mode = Mode.STANDBY
        m.next_time, m.next_kind = math.inf, None
        self.n_standby += 1

    def _become_idle(self, m: Machine) -> None:
        m.mode = Mode.IDLE
        m.has_part = False
        m.next_time, m.next_kind = math.inf, None

    def _dispatch(self) -> None:
        # forced transitions: an idle machine either seizes a part or, if commanded down, sleeps
        for i, m in enumerate(self.machines):
            if m.mode is not Mode.IDLE:
                continue
            if not m.awake:
                self._to_standby(m)
            elif self.buffer > 0:
                self.buffer -= 1
                self._start_busy(i, m)

    # -- public API ---------------------------------------------------------

    def _integrate(self, t: float) -> None:
        dt = t - self.clock
        if dt < 0:
            raise StateError(f"time moved backwards ({self.clock} -> {t})")
        self.energy += self.power * dt
        self.clock = t

    def step(self) -> EventKind:
        """Advance to the earliest pending event and apply it."""
        t = self.next_arrival
        idx = -1
        for i, m in enumerate(self.machines):
            if m.next_time < t:
                t, idx = m.next_time, i
        self._integrate(t)

        if idx < 0:
            kind = EventKind.ARRIVAL
            self.arrivals += 1
            if self.buffer < self.config.K:
                self.buffer += 1
            else:
                self.blocked += 1
            self.next_arrival = t + self._exp(self._rng_arrival, self.config.lambda_arrival)
        else:
            m = self.machines[idx]
            kind = m.next_kind
            if kind is EventKind.COMPLETION:
                self.parts_produced += 1
                self._become_idle(m)
            elif kind is EventKind.STARTUP_DONE:
                self._become_idle(m)
            elif kind is EventKind.FAILURE:
                # the part stays on the machine and is resumed after repair
                m.mode = Mode.FAILED
                m.next_time = t + self._exp(self._rng_machines[idx], self.config.xi_repair)
                m.next_kind = EventKind.REPAIR
            elif kind is EventKind.REPAIR:
                self._start_busy(idx, m)
            else:  # pragma: no cover
                raise StateError(f"machine {idx} has no pending event")

        self._dispatch()
        self.events += 1
        self.window.append(self.clock, self.parts_produced, self.energy)
        if self.trace is not None:
            self.trace.append(self.trace_row(kind))
        return kind

    def advance_to(self, t: float) -> None:
        """Let time pass without an event (``t`` must not exceed the next event)."""
        if t > self.next_event_time():
            raise StateError("advance_to would skip a pending event")
        self._integrate(t)
        self.window.append(self.clock, self.parts_produced, self.energy)

    def apply_action(self, action: Action | int) -> None:
        """Move the number of commanded-awake machines toward ``target_awake``.

        Idle machines are put to standby immediately; busy, starting or failed
        machines only lose their awake flag and go to standby the next time
        they become idle. Waking prefers machines that never actually slept.
        """
        if not isinstance(action, Action):
            action = Action(int(action))
        action.check(self.config.c)
        target = action.target_awake
        machines = self.machines
        awake = sum(m.awake for m in machines)

        if awake > target:
            surplus = awake - target
            for mode in (Mode.IDLE, Mode.FAILED, Mode.STARTUP, Mode.BUSY):
                for i in range(len(machines) - 1, -1, -1):
                    if surplus == 0:
                        break
                    m = machines[i]
                    if m.awake and m.mode is mode:
                        m.awake = False
                        surplus -= 1
                        if mode is Mode.IDLE:
                            self._to_standby(m)
        elif awake < target:
            deficit = target - awake
            for i, m in enumerate(machines):
                if deficit and not m.awake and m.mode is not Mode.STANDBY:
                    m.awake = True
                    deficit -= 1
            for i, m in enumerate(machines):
                if deficit and m.mode is Mode.STANDBY:
                    m.awake = True
                    deficit -= 1
                    self._start_startup(i, m)

    def window_kpis(self) -> Kpis:
        return self.window.kpis(self.clock, self.parts_produced, self.energy, self.power)

    def preference(self) -> Preference:
        k = self.window_kpis()
        return preference_score(k.throughput, k.power, self.config, self.t_max)

    def observe(self) -> np.ndarray:
        """Composite observation ``[buffer one-hot | machine one-hots | (R_p, R_e, R)]``."""
        cfg = self.config
        o = np.zeros(cfg.obs_dim)
        o[self.buffer] = 1.0
        base = cfg.K + 1
        for i, m in enumerate(self.machines):
            o[base + N_MODES * i + m.mode] = 1.0
        pref = self.preference()
        o[-3:] = pref.production, pref.energy, pref.composite
        return o

    def trace_row(self, kind: EventKind) -> tuple:
        modes = "".join("BISUF"[m.mode] for m in self.machines)
        return (self.clock, kind.value, self.buffer, modes, self.parts_produced, self.energy)

    # -- drivers ------------------------------------------------------------

    def run(self, duration: float, policy: Callable[["Workstation"], int] | None = None) -> int:
        """Simulate ``duration`` seconds, querying ``policy`` after every event.

        Returns the number of events processed. ``policy=None`` leaves the
        current commands untouched.
        """
        t_end = self.clock + duration
        n = 0
        if policy is not None:
            self.apply_action(policy(self))
        while self.next_event_time() <= t_end:
            self.step()
            n += 1
            if policy is not None:
                self.apply_action(policy(self))
        self.advance_to(t_end)
        return n


def init_env(config: SimConfig, seed: int | None = None, trace: bool = False) -> Workstation:
    return Workstation(config, seed=seed, trace=trace)


@functools.lru_cache(maxsize=32)
def _calibrate(rates_key: tuple, days: float, seed: int) -> float:
    cfg = SimConfig(**dict(rates_key))
    ws = Workstation(cfg, seed=seed)
    ws.run(days * DAY)
    return ws.parts_produced / ws.clock


def calibrate_t_max(config: SimConfig, days: float = 30.0, seed: int = 0) -> float:
    """ALL-ON throughput over a long replication (every machine stays commanded on)."""
    return _calibrate(config.rates_key(), days, seed)


def all_on(ws: Workstation) -> int:
    return ws.config.c


TRACE_COLUMNS = ("clock", "event", "buffer", "modes", "parts_produced", "energy_kws")
KPI_COLUMNS = ("clock", "throughput", "power", "r_production", "r_energy", "r_composite")


def write_trace(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        w.writerows(rows)


class KpiSampler:
    """Collects window KPIs on a fixed time grid while a run progresses.

    A grid point is recorded at the first decision at or after it, so each
    row reflects the state of the trailing window at that decision.
    """

    def __init__(self, period: float, start: float = 0.0):
        self.period = period
        self.next_t = start
        self.rows: list[tuple] = []

    def __call__(self, ws: Workstation) -> None:
        while ws.clock >= self.next_t:
            k = ws.window_kpis()
            p = preference_score(k.throughput, k.power, ws.config, ws.t_max)
            self.rows.append((self.next_t, k.throughput, k.power, p.production, p.energy, p.composite))
            self.next_t += self.period

    def composite(self) -> np.ndarray:
        return np.array([r[-1] for r in self.rows])
