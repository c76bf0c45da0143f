"""Acceptance gate: one test per primary criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (about five minutes on
one core; the horizon sweep trains three desk-scale agents).
"""
import csv
import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest

from daif import cli, nn
from daif import free_energy as fe
from daif.agent import Agent, ReplayMemory, TrainConfig, actor_update, checksum, interact, model_update, new_training_env, plan_finetune
from daif.model import Actor, Architecture, GenerativeModel
from daif.nn import GaussianDiag, Mlp, Tape
from daif.sim import DAY, SimConfig, init_env

from helpers import random_obs

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SIM = SimConfig()
HORIZONS = (100, 300, 1000)


def verdict(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _rows(path: Path) -> list[dict]:
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    """Desk-scale training at each horizon through the command line."""
    root = tmp_path_factory.mktemp("sweep")
    out = {}
    for h in HORIZONS:
        d = root / f"H{h}"
        t0 = time.perf_counter()
        code = cli.main(["train", "--config", str(CONFIGS / "desk.cfg"), "--out", str(d), "--horizon", str(h)])
        out[h] = (d, code, time.perf_counter() - t0)
    return root, out


def test_simulator_fidelity(capsys):
    t0 = time.perf_counter()
    ws = init_env(SIM, seed=7)
    ws.run(30 * DAY)
    runtime = time.perf_counter() - t0
    thr = ws.parts_produced / ws.clock
    rng = np.random.default_rng(1)
    worst = 0.0
    for name in ("lambda_arrival", "mu_process", "delta_startup", "psi_fail", "xi_repair"):
        rate = getattr(SIM, name)
        x = np.array([ws._exp(rng, rate) for _ in range(100_000)])
        worst = max(worst, abs(x.mean() - 1 / rate) / ((1 / rate) / math.sqrt(x.size)))
    ok = 0.049 <= thr <= 0.050 and runtime <= 60.0 and worst < 3.0
    verdict(capsys, "simulator fidelity", ok,
            f"ALL-ON throughput {thr:.5f} parts/s in {runtime:.1f} s; worst sojourn-mean deviation {worst:.2f} SE")


def test_numerical_core(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    kinds = ["tanh", "sigmoid", "relu", "linear", "scaled_sigmoid"]
    worst = 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 6)) for _ in range(depth + 1)]
        net = Mlp("n", sizes, [kinds[int(rng.integers(5))] for _ in range(depth)]).init(rng)
        for k in net.params:
            net.params[k] = rng.normal(0, 0.7, size=net.params[k].shape)
        x, y = rng.normal(size=(3, sizes[0])), rng.normal(size=(3, sizes[-1]))

        def loss(tape=None):
            return nn.mean(nn.square(nn.sub(net.forward(x, tape)[0], y)))

        tape = Tape()
        g = nn.backward(tape, loss(tape))
        for k, arr in net.params.items():
            num = nn.numeric_gradient(lambda: float(loss().value), arr, h=1e-5)
            worst = max(worst, float(np.max(np.abs(g[k] - num) / np.maximum(1e-3, np.abs(g[k]) + np.abs(num)))))

    n = 1_000_000
    z = []
    mq, vq, mp, vp = rng.normal(size=3), rng.uniform(0.3, 1.5, 3), rng.normal(size=3), rng.uniform(0.3, 1.5, 3)
    q, p = GaussianDiag(mq[None], vq[None]), GaussianDiag(mp[None], vp[None])
    s = mq + np.sqrt(vq) * rng.standard_normal((n, 3))
    lq = -0.5 * (np.log(2 * np.pi * vq) + (s - mq) ** 2 / vq).sum(1)
    lp = -0.5 * (np.log(2 * np.pi * vp) + (s - mp) ** 2 / vp).sum(1)
    for closed, samples in ((nn.kl_gaussians(q, p).value[0], lq - lp), (nn.entropy_gaussian(q).value[0], -lq)):
        z.append(abs(samples.mean() - closed) / (samples.std() / math.sqrt(n)))
    pb = rng.uniform(0.05, 0.95, 5)
    xb = rng.random((n, 5)) < pb
    nl = -np.where(xb, np.log(pb), np.log(1 - pb)).sum(1)
    z.append(abs(nl.mean() - nn.entropy_bernoulli(pb[None]).value[0]) / (nl.std() / math.sqrt(n)))
    runtime = time.perf_counter() - t0
    ok = worst < 1e-4 and max(z) < 3.0 and runtime <= 120.0
    verdict(capsys, "numerical core", ok,
            f"max gradient rel. error {worst:.2e}; KL/entropy/Bernoulli deviations {', '.join(f'{v:.2f}' for v in z)} SE; {runtime:.1f} s")


def test_objective_correctness(capsys):
    weights = (fe.W_BUFFER, fe.W_MACHINES, fe.W_PREFS) == (2 / 7, 1 / 7, 4 / 7)
    arch = Architecture()
    model, actor = GenerativeModel(arch, np.random.default_rng(0)), Actor(arch, np.random.default_rng(1))
    add_err = 0.0
    for seed in range(10):
        b, _ = fe.efe_estimate(random_obs(arch.layout, 8, np.random.default_rng(seed)), model, actor, 4, 4, np.random.default_rng(seed))
        add_err = max(add_err, abs(b.total - (b.extrinsic + b.state_epistemic + b.param_epistemic)))

    plain = Architecture(dropout=0.0)
    m0, a0 = GenerativeModel(plain, np.random.default_rng(2)), Actor(plain, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    means = np.array([
        fe.efe_estimate(random_obs(plain.layout, 10, np.random.default_rng(100 + i)), m0, a0, 1, 10, rng)[0].param_epistemic
        for i in range(100)
    ])
    z_param = abs(means.mean()) / (means.std(ddof=1) / math.sqrt(means.size))

    vrng = np.random.default_rng(5)
    shift = all(
        np.allclose(fe.policy_softmax(g), fe.policy_softmax(g + vrng.normal(0, 50)), atol=1e-12)
        for g in (vrng.normal(0, 5, size=int(vrng.integers(2, 10))) for _ in range(100))
    )

    cfg = TrainConfig(H=5, B1=4, B2=4, S1=2, S2=2, warmup_days=0.01, random_days=0.01)
    agent = Agent.create(arch, cfg)
    ws = new_training_env(SIM, cfg, 0)
    mem = ReplayMemory(10)
    for _ in range(3):
        mem.append(interact(ws, agent.actor, 5, rng))
    a_sum = checksum(agent.actor.params)
    model_update(agent, mem, cfg, rng)
    routed_model = checksum(agent.actor.params) == a_sum
    m_sums = [checksum(n.params) for n in agent.model.nets.values()]
    actor_update(agent, mem, cfg, rng)
    routed_actor = m_sums == [checksum(n.params) for n in agent.model.nets.values()]

    ok = weights and add_err <= 1e-10 and z_param < 3 and shift and routed_model and routed_actor
    verdict(capsys, "objective correctness", ok,
            f"weights exact {weights}; additivity error {add_err:.1e}; dropout-off parameter term {z_param:.2f} SE from 0; "
            f"softmax shift-invariant {shift}; model step leaves actor {routed_model}; actor step leaves model {routed_actor}")


def test_learning_signal(capsys):
    cfg = TrainConfig(H=300)
    arch = Architecture(horizon=300)
    agent = Agent.create(arch, cfg)
    ws = new_training_env(SIM, cfg, 0)
    rng = np.random.default_rng(0)
    mem = ReplayMemory(1000)
    for _ in range(512):
        mem.append(interact(ws, agent.actor, cfg.H, rng))
    losses = [model_update(agent, mem, cfg, rng).L_o for _ in range(500)]
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    drop = 1.0 - last / first

    obs = mem.sample_observations(cfg.B2, rng)
    _, grads = fe.efe_estimate(obs, agent.model, agent.actor, cfg.S1, cfg.S2, rng)
    gnorm = nn.global_norm(grads)

    o = mem.latest.o_end[None]
    tuned = plan_finetune(agent.actor, o, agent.model, cfg, rng, steps=1)
    tv = 0.5 * float(np.abs(tuned.probs(o) - agent.actor.probs(o)).sum())
    ok = drop >= 0.30 and gnorm > 0 and tv > 0
    verdict(capsys, "learning signal", ok,
            f"L_o {first:.3f} -> {last:.3f} ({100 * drop:.0f}% drop over 500 updates); "
            f"EFE actor-gradient norm {gnorm:.3e}; one fine-tune step moves the policy by TV {tv:.2e}")


def test_desk_scale_control(capsys, sweep):
    _, runs = sweep
    d, code, elapsed = runs[300]
    assert code == 0
    val = _rows(d / "validation.csv")
    best = max(val, key=lambda r: float(r["pref_mean"]))
    final = _rows(d / "final_eval.csv")
    saving = float(np.mean([float(r["energy_saving"]) for r in final]))
    loss = float(np.mean([float(r["production_loss"]) for r in final]))
    pref, rand = float(best["pref_mean"]), float(best["random_pref_mean"])
    ok = saving >= 5.0 and loss <= 10.0 and pref > rand and elapsed <= 2 * 3600 and len(final) == 3
    verdict(capsys, "desk-scale control", ok,
            f"{len(final)} x 3-day paired evaluation: saving {saving:.2f}%, production loss {loss:.2f}%; "
            f"best validation preference {pref:.4f} vs random phase {rand:.4f} (epoch {best['epoch']}); {elapsed:.0f} s")


def test_horizon_sweep(capsys, sweep):
    root, runs = sweep
    codes = {h: runs[h][1] for h in HORIZONS}
    chart = root / "h_sweep.svg"
    plot_code = cli.main(["plot", *[str(runs[h][0]) for h in HORIZONS], "--out", str(root)])
    finite = all(
        all(math.isfinite(float(v)) for r in _rows(runs[h][0] / "train_log.csv") for v in r.values())
        for h in HORIZONS
    )
    ok = all(c == 0 for c in codes.values()) and plot_code == 0 and chart.is_file() and finite
    times = ", ".join(f"H={h}: {runs[h][2]:.0f} s" for h in HORIZONS)
    verdict(capsys, "horizon sweep", ok, f"exit codes {codes}; finite training logs {finite}; chart {chart.name} written; {times}")


def test_determinism(capsys, tmp_path):
    tiny = CONFIGS / "tiny.cfg"
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["train", "--config", str(tiny), "--out", str(d)]) == 0
        assert cli.main(["evaluate", "--checkpoint", str(d / "best.ckpt"), "--days", "0.2", "--replications", "2"]) == 0
    names = ("train_log.csv", "validation.csv", "validation_envs.csv", "final_eval.csv", "evaluation.csv")
    same = [filecmp.cmp(a / n, b / n, shallow=False) for n in names]
    verdict(capsys, "determinism", all(same), f"{sum(same)}/{len(names)} CSV outputs byte-identical across reruns")
