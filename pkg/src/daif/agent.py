"""Training and evaluation protocol for the deep active-inference agent.

One training iteration = gather one H-decision experience with the current
actor, update the generative model on a replay batch, then update the actor
by descending the expected free energy on a batch of observations.
"""
from __future__ import annotations

import logging
import zlib
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .free_energy import EfeBreakdown, LossReport, efe_estimate, model_losses
from .model import Actor, Architecture, GenerativeModel, policy_repr
from .nn import Adam, NumericalError
from .sim import DAY, ConfigError, KpiSampler, SimConfig, Workstation

log = logging.getLogger(__name__)


def stream_seed(root: int, name: str) -> int:
    """Stable 32-bit seed for the named random stream under ``root``."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def stream(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name))


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


@dataclass
class TrainConfig:
    N: int = 100
    epochs: int = 10
    H: int = 300
    B1: int = 32
    B2: int = 32
    S1: int = 4
    S2: int = 4
    beta: float = 1.0
    lr_transition: float = 1e-3
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    lr_actor: float = 3e-4
    capacity: int = 10_000
    dropout: float = 0.1
    clip_norm: float = 10.0
    encoder_recon_grad: bool = True
    seed: int = 0
    warmup_days: float = 1.0
    random_days: float = 1.0
    val_envs: int = 3
    val_days: float = 1.0
    final_envs: int = 10
    final_days: float = 30.0
    final_warmup_days: float = 10.0
    finetune_steps: int = 1
    kpi_period: float = 300.0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("N", "epochs", "H", "B1", "B2", "S1", "S2", "capacity", "val_envs", "final_envs", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("lr_transition", "lr_encoder", "lr_decoder"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        # a zero actor rate freezes the policy, useful for ablations
        if not self.lr_actor >= 0:
            raise ConfigError("lr_actor", "must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must be in [0, 1)")
        if self.finetune_steps < 0:
            raise ConfigError("finetune_steps", "must be >= 0")
        for name in ("warmup_days", "random_days", "val_days", "final_days", "final_warmup_days", "kpi_period"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")


@dataclass
class Experience:
    o_start: np.ndarray
    pi_hat: np.ndarray
    o_end: np.ndarray
    start_clock: float
    end_clock: float
    decisions: int


class ReplayMemory:
    """Bounded FIFO of experiences; every sampled batch contains the newest one."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: deque[Experience] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.items)

    def append(self, exp: Experience) -> None:
        self.items.append(exp)

    @property
    def latest(self) -> Experience:
        return self.items[-1]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self.items:
            raise ValueError("replay memory is empty")
        last = len(self.items) - 1
        rest = rng.integers(0, len(self.items), size=n - 1)
        return np.concatenate([[last], rest]).astype(int)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.sample_indices(n, rng)
        items = [self.items[i] for i in idx]
        return (
            np.stack([e.o_start for e in items]),
            np.stack([e.pi_hat for e in items]),
            np.stack([e.o_end for e in items]),
        )

    def sample_observations(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """The current observation plus ``n - 1`` past horizon-start observations."""
        idx = self.sample_indices(n, rng)
        obs = [self.items[idx[0]].o_end] + [self.items[i].o_start for i in idx[1:]]
        return np.stack(obs)


@dataclass
class Agent:
    model: GenerativeModel
    actor: Actor
    optimizers: dict[str, Adam]

    @classmethod
    def create(cls, arch: Architecture, cfg: TrainConfig) -> "Agent":
        model = GenerativeModel(arch, stream(cfg.seed, "init-model"))
        actor = Actor(arch, stream(cfg.seed, "init-actor"))
        lrs = {
            "encoder": cfg.lr_encoder,
            "transition": cfg.lr_transition,
            "decoder": cfg.lr_decoder,
            "actor": cfg.lr_actor,
        }
        return cls(model, actor, {k: Adam(lr=v, clip_norm=cfg.clip_norm) for k, v in lrs.items()})

    @property
    def arch(self) -> Architecture:
        return self.model.arch


def checksum(params: dict[str, np.ndarray]) -> str:
    h = zlib.crc32(b"")
    for k in sorted(params):
        h = zlib.crc32(np.ascontiguousarray(params[k]).tobytes(), zlib.crc32(k.encode(), h))
    return f"{h:08x}"


# -- policies -------------------------------------------------------------------


class AllOn:
    kind = "all_on"

    def __call__(self, ws: Workstation) -> int:
        return ws.config.c


class RandomPolicy:
    kind = "random"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def __call__(self, ws: Workstation) -> int:
        return int(self.rng.integers(1, ws.config.c + 1))


def baseline_policy(kind: str, rng: np.random.Generator | None = None):
    if kind == "all_on":
        return AllOn()
    if kind == "random":
        return RandomPolicy(rng if rng is not None else np.random.default_rng(0))
    raise ValueError(f"unknown baseline policy {kind!r}")


def plan_finetune(
    actor: Actor,
    o: np.ndarray,
    model: GenerativeModel,
    cfg: TrainConfig,
    rng: np.random.Generator,
    steps: int = 1,
    optimizer: Adam | None = None,
) -> Actor:
    """EFE gradient steps on a working copy of ``actor`` using ``o`` as the whole batch."""
    work = actor.copy()
    if steps <= 0:
        return work
    opt = optimizer if optimizer is not None else Adam(lr=cfg.lr_actor, clip_norm=cfg.clip_norm)
    for _ in range(steps):
        _, grads = efe_estimate(np.atleast_2d(o), model, work, cfg.S1, cfg.S2, rng)
        opt.step(work.params, grads)
    return work


class AgentController:
    """Acts with a sampled actor and fine-tunes it on the current observation every ``H`` decisions.

    The fine-tuned copy persists for the rest of the run; the trained actor
    it started from is never modified.
    """

    kind = "agent"

    def __init__(self, agent: Agent, cfg: TrainConfig, rng: np.random.Generator, finetune: bool = True):
        self.model = agent.model
        self.actor = agent.actor.copy()
        self.cfg = cfg
        self.rng = rng
        self.finetune = finetune and cfg.finetune_steps > 0
        self.opt = Adam(lr=cfg.lr_actor, clip_norm=cfg.clip_norm)
        self.decisions = 0
        self.action_counts = np.zeros(agent.arch.n_actions, dtype=int)

    def __call__(self, ws: Workstation) -> int:
        o = ws.observe()
        if self.finetune and self.decisions % self.cfg.H == 0:
            self.actor = plan_finetune(self.actor, o, self.model, self.cfg, self.rng, self.cfg.finetune_steps, self.opt)
        self.decisions += 1
        a = self.actor.sample_action(o, self.rng)
        self.action_counts[a - 1] += 1
        return a


def drive(ws: Workstation, duration: float, policy, sampler: KpiSampler | None = None) -> tuple[int, float]:
    """Run ``policy`` for ``duration`` seconds; returns (parts, energy) produced in the phase."""
    p0, e0 = ws.parts_produced, ws.energy
    if sampler is None:
        ws.run(duration, policy)
    else:

        def act(w):
            sampler(w)
            return policy(w)

        ws.run(duration, act)
        sampler(ws)
    return ws.parts_produced - p0, ws.energy - e0


# -- algorithm ----------------------------------------------------------------------


def interact(ws: Workstation, actor: Actor, H: int, rng: np.random.Generator) -> Experience:
    """Gather one experience spanning exactly ``H`` decision events."""
    o_start = ws.observe()
    pi_hat = policy_repr(actor, o_start).value[0]
    t0 = ws.clock
    o = o_start
    decisions = 0
    for _ in range(H):
        ws.apply_action(actor.sample_action(o, rng))
        decisions += 1
        ws.step()
        o = ws.observe()
    assert decisions == H
    return Experience(o_start, pi_hat, o, t0, ws.clock, decisions)


def model_update(agent: Agent, memory: ReplayMemory, cfg: TrainConfig, rng: np.random.Generator) -> LossReport:
    o_s, pi, o_e = memory.sample(cfg.B1, rng)
    report, grads = model_losses(
        o_s, pi, o_e, agent.model, rng, beta=cfg.beta, encoder_recon_grad=cfg.encoder_recon_grad
    )
    for name, net in agent.model.nets.items():
        agent.optimizers[name].step(net.params, {k: grads[k] for k in net.params})
    return report


def actor_update(agent: Agent, memory: ReplayMemory, cfg: TrainConfig, rng: np.random.Generator) -> EfeBreakdown:
    obs = memory.sample_observations(cfg.B2, rng)
    efe, grads = efe_estimate(obs, agent.model, agent.actor, cfg.S1, cfg.S2, rng)
    agent.optimizers["actor"].step(agent.actor.params, grads)
    return efe


LOG_COLUMNS = (
    "epoch", "iteration", "L_s", "L_o", "BCE_b", "BCE_m", "MSE_r", "KL_prior",
    "G_total", "G_extrinsic", "G_state", "G_param",
)


@dataclass
class EpochReport:
    epoch: int
    n_envs: int
    pref_mean: float
    pref_std: float
    random_pref_mean: float
    random_pref_std: float
    energy_saving: float
    energy_saving_std: float
    production_loss: float
    production_loss_std: float
    L_o: float = float("nan")
    L_s: float = float("nan")
    G_total: float = float("nan")
    env_rows: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("env_rows")
        return d


def new_training_env(sim: SimConfig, cfg: TrainConfig, epoch: int) -> Workstation:
    ws = Workstation(sim, seed=stream_seed(cfg.seed, f"train-env-{epoch}"))
    drive(ws, cfg.warmup_days * DAY, AllOn())
    drive(ws, cfg.random_days * DAY, RandomPolicy(stream(cfg.seed, f"train-random-{epoch}")))
    return ws


def train_epoch(
    ws: Workstation,
    agent: Agent,
    memory: ReplayMemory,
    cfg: TrainConfig,
    epoch: int,
    rngs: dict[str, np.random.Generator],
    log_rows: list | None = None,
) -> list[tuple]:
    """``cfg.N`` iterations of interaction, model learning and policy optimisation."""
    rows = []
    for it in range(cfg.N):
        try:
            exp = interact(ws, agent.actor, cfg.H, rngs["action"])
            memory.append(exp)
            rep = model_update(agent, memory, cfg, rngs["model"])
            efe = actor_update(agent, memory, cfg, rngs["efe"])
        except (NumericalError, FloatingPointError) as e:
            raise TrainingError(epoch * cfg.N + it, e) from e
        row = (
            epoch, it, rep.L_s, rep.L_o, rep.BCE_b, rep.BCE_m, rep.MSE_r, rep.KL_prior,
            efe.total, efe.extrinsic, efe.state_epistemic, efe.param_epistemic,
        )
        rows.append(row)
        if log_rows is not None:
            log_rows.append(row)
    return rows


def _validate_env(args) -> dict:
    agent, sim, cfg, i, phase_days, random_days, warmup_days, rng_name = args
    seed = stream_seed(cfg.seed, f"{rng_name}-env-{i}")
    rng = stream(cfg.seed, f"{rng_name}-act-{i}")
    period = cfg.kpi_period

    def phases(policy):
        ws = Workstation(sim, seed=seed)
        drive(ws, warmup_days * DAY, AllOn())
        rand = KpiSampler(period, ws.clock)
        if random_days > 0:
            drive(ws, random_days * DAY, RandomPolicy(stream(cfg.seed, f"{rng_name}-random-{i}")), rand)
        main = KpiSampler(period, ws.clock)
        parts, energy = drive(ws, phase_days * DAY, policy, main)
        return rand.composite(), main.composite(), parts, energy

    ctrl = controller_for(agent, cfg, rng)
    rand_r, agent_r, parts, energy = phases(ctrl)
    _, base_r, parts_b, energy_b = phases(AllOn())
    return {
        "env": i,
        "seed": seed,
        "pref": float(agent_r.mean()),
        "random_pref": float(rand_r.mean()) if rand_r.size else float("nan"),
        "allon_pref": float(base_r.mean()),
        "parts": parts,
        "energy_kwh": energy / 3600.0,
        "allon_parts": parts_b,
        "allon_energy_kwh": energy_b / 3600.0,
        "energy_saving": 100.0 * (1.0 - energy / energy_b),
        "production_loss": 100.0 * (1.0 - parts / parts_b),
        "actions": ";".join(str(x) for x in getattr(ctrl, "action_counts", [])),
    }


def controller_for(agent, cfg: TrainConfig, rng: np.random.Generator):
    if isinstance(agent, str):
        return baseline_policy(agent, rng)
    return AgentController(agent, cfg, rng)


def _map(fn, jobs: Sequence, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _summarise(epoch: int, rows: list[dict]) -> EpochReport:
    def ms(key):
        v = np.array([r[key] for r in rows], dtype=float)
        return float(v.mean()), float(v.std())

    pm, ps = ms("pref")
    rm, rs = ms("random_pref")
    em, es = ms("energy_saving")
    lm, ls = ms("production_loss")
    return EpochReport(epoch, len(rows), pm, ps, rm, rs, em, es, lm, ls, env_rows=rows)


def run_validation(agent, sim: SimConfig, cfg: TrainConfig, epoch: int = 0) -> EpochReport:
    """Score the agent on ``cfg.val_envs`` fixed environments (warm-up, random phase, agent phase)."""
    jobs = [
        (agent, sim, cfg, i, cfg.val_days, cfg.random_days, cfg.warmup_days, "val")
        for i in range(cfg.val_envs)
    ]
    return _summarise(epoch, _map(_validate_env, jobs, cfg.workers))


def run_final_eval(
    agent,
    sim: SimConfig,
    cfg: TrainConfig,
    n_envs: int | None = None,
    days: float | None = None,
    warmup_days: float | None = None,
) -> EpochReport:
    """Long controlled runs against seed-paired ALL-ON replications."""
    n_envs = cfg.final_envs if n_envs is None else n_envs
    days = cfg.final_days if days is None else days
    warmup_days = cfg.final_warmup_days if warmup_days is None else warmup_days
    jobs = [(agent, sim, cfg, i, days, 0.0, warmup_days, "final") for i in range(n_envs)]
    return _summarise(-1, _map(_validate_env, jobs, cfg.workers))


@dataclass
class TrainResult:
    agent: Agent
    best_agent: Agent
    best_epoch: int
    reports: list[EpochReport]
    log_rows: list[tuple]


def snapshot(agent: Agent) -> Agent:
    return Agent(agent.model.copy(), agent.actor.copy(), {k: v.copy() for k, v in agent.optimizers.items()})


def train(
    sim: SimConfig,
    cfg: TrainConfig,
    arch: Architecture,
    on_epoch: Callable[[EpochReport, Agent], None] | None = None,
) -> TrainResult:
    """Full protocol: per epoch a fresh warmed-up environment, N iterations, then validation."""
    agent = Agent.create(arch, cfg)
    memory = ReplayMemory(cfg.capacity)
    rngs = {name: stream(cfg.seed, name) for name in ("action", "model", "efe")}
    reports: list[EpochReport] = []
    log_rows: list[tuple] = []
    best, best_epoch, best_score = snapshot(agent), -1, -np.inf
    for epoch in range(cfg.epochs):
        ws = new_training_env(sim, cfg, epoch)
        rows = train_epoch(ws, agent, memory, cfg, epoch, rngs, log_rows)
        rep = run_validation(agent, sim, cfg, epoch)
        arr = np.array([r[2:] for r in rows])
        rep.L_s, rep.L_o, rep.G_total = float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 6].mean())
        reports.append(rep)
        log.info(
            "epoch %d: pref %.4f (random %.4f) saving %.2f%% loss %.2f%% L_o %.4f G %.4f",
            epoch, rep.pref_mean, rep.random_pref_mean, rep.energy_saving, rep.production_loss, rep.L_o, rep.G_total,
        )
        if rep.pref_mean > best_score:
            best, best_epoch, best_score = snapshot(agent), epoch, rep.pref_mean
        if on_epoch is not None:
            on_epoch(rep, agent)
    return TrainResult(agent, best, best_epoch, reports, log_rows)
