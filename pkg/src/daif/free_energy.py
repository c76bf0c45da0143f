"""Variational free energy for model learning and the sampled expected free
energy used to train the actor.

Gradient routing follows the alternating scheme: the transition-consistency
KL ``L_s`` trains encoder and transition, the reconstruction objective ``L_o``
trains the decoder, and ``G`` trains the actor only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .model import Actor, GenerativeModel, Layout, imagined_observation, policy_repr, psi
from .nn import EPS_P, GaussianDiag, Tape, Tensor

# reconstruction weights for buffer, machine and preference channels
W_BUFFER = 2.0 / 7.0
W_MACHINES = 1.0 / 7.0
W_PREFS = 4.0 / 7.0
EPS_MAE = 1e-6


@dataclass
class LossReport:
    L_s: float
    L_o: float
    BCE_b: float
    BCE_m: float
    MSE_r: float
    KL_prior: float


@dataclass
class EfeBreakdown:
    extrinsic: float
    state_epistemic: float
    param_epistemic: float
    total: float
    S1: int
    S2: int


def reconstruction_loss(pred, target: np.ndarray, layout: Layout) -> tuple[Tensor, Tensor, Tensor]:
    """Batch-mean (BCE_b, BCE_m, MSE_r).

    ``MSE_r`` is ``-log(1 - MAE_r + eps)`` with ``MAE_r`` the mean absolute
    error over the three preference channels of one sample.
    """
    pred = nn.as_tensor(pred)
    target = np.atleast_2d(target)
    if pred.shape != target.shape or pred.shape[1] != layout.dim:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} do not match layout ({layout.dim})")
    bce_b = nn.mean(nn.binary_cross_entropy(pred[:, layout.buffer], target[:, layout.buffer]))
    bce_m = nn.mean(nn.binary_cross_entropy(pred[:, layout.machines], target[:, layout.machines]))
    mae = nn.row_mean(nn.absolute(nn.sub(pred[:, layout.prefs], target[:, layout.prefs])))
    mse_r = nn.mean(-nn.log(nn.sub(1.0 + EPS_MAE, mae)))
    return bce_b, bce_m, mse_r


def model_losses(
    o_start: np.ndarray,
    pi_hat: np.ndarray,
    o_end: np.ndarray,
    model: GenerativeModel,
    rng: np.random.Generator,
    beta: float = 1.0,
    dropout_on: bool = True,
    encoder_recon_grad: bool = False,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """VFE losses on a batch of experiences and the routed parameter gradients.

    ``encoder_recon_grad`` lets ``L_o`` also reach the encoder through the
    posterior sample; by default the posterior is a constant for the decoder.
    """
    o_start, pi_hat, o_end = (np.atleast_2d(a) for a in (o_start, pi_hat, o_end))
    if o_start.shape[0] == 0:
        raise ValueError("empty batch")
    layout = model.layout
    tape = Tape()
    q_t = model.encode(o_start, tape)
    s_t = nn.reparam_sample(q_t, rng)
    prior = model.transit(s_t, pi_hat, tape, dropout_on, rng)
    post = model.encode(o_end, tape)
    l_s = nn.mean(nn.kl_gaussians(post, prior))

    q = post if encoder_recon_grad else post.detach()
    s_end = nn.reparam_sample(q, rng)
    pred = model.decode(s_end, tape, dropout_on, rng)
    bce_b, bce_m, mse_r = reconstruction_loss(pred, o_end, layout)
    kl_prior = nn.mean(nn.kl_standard_normal(q))
    recon = nn.add(nn.add(nn.mul(bce_b, W_BUFFER), nn.mul(bce_m, W_MACHINES)), nn.mul(mse_r, W_PREFS))
    l_o = nn.add(recon, nn.mul(kl_prior, beta))

    grads = nn.backward(tape, nn.add(l_s, l_o))
    report = LossReport(
        float(l_s.value), float(l_o.value), float(bce_b.value), float(bce_m.value), float(mse_r.value),
        float(kl_prior.value),
    )
    return report, grads


def efe_estimate(
    observations: np.ndarray,
    model: GenerativeModel,
    actor: Actor,
    S1: int,
    S2: int,
    rng: np.random.Generator,
) -> tuple[EfeBreakdown, dict[str, np.ndarray]]:
    """Sampled expected free energy of the current actor over a batch of observations.

    Returns the averaged terms and the gradient of the total with respect to
    the actor's parameters; model parameters are held fixed.
    """
    if S1 < 1 or S2 < 1:
        raise ValueError(f"S1 and S2 must be >= 1, got {S1}, {S2}")
    obs = np.atleast_2d(observations)
    layout = model.layout
    tape = Tape()

    s_tau = nn.reparam_sample(model.encode(obs), rng)  # constant: model is fixed
    pi_hat = policy_repr(actor, obs, tape)
    base = model.transit(s_tau, pi_hat)  # dropout off

    # outer loop, S1 draws per observation
    base1 = base.repeat(S1)
    s_next = nn.reparam_sample(base1, rng)
    pred = model.decode(s_next)
    extrinsic = -nn.log(psi(pred, layout))[:, 0]
    post = model.encode(imagined_observation(pred, layout))
    state_ep = nn.sub(nn.entropy_gaussian(post), nn.entropy_gaussian(base1))

    # inner loop, S2 draws per outer draw
    k = S1 * S2
    s_rep = nn.repeat_rows(s_tau, k)
    pi_rep = nn.repeat_rows(pi_hat, k)
    dropped = model.transit(s_rep, pi_rep, dropout_on=True, rng=rng)
    h_theta = nn.entropy_bernoulli(model.decode(nn.reparam_sample(dropped, rng), dropout_on=True, rng=rng))
    h_base = nn.entropy_bernoulli(model.decode(nn.reparam_sample(base.repeat(k), rng)))
    param_ep = nn.sub(h_theta, h_base)

    ext_m, st_m, par_m = nn.mean(extrinsic), nn.mean(state_ep), nn.mean(param_ep)
    g_total = nn.add(nn.add(ext_m, st_m), par_m)
    grads = nn.backward(tape, g_total)
    e, s, p = float(ext_m.value), float(st_m.value), float(par_m.value)
    return EfeBreakdown(e, s, p, e + s + p, S1, S2), {k_: grads[k_] for k_ in actor.params}


def policy_softmax(G_values) -> np.ndarray:
    """``softmax(-G)``; shift-invariant in ``G``."""
    g = -np.asarray(G_values, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("G values must be finite")
    z = np.exp(g - g.max())
    return z / z.sum()
