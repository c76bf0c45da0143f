"""Encoder, H-step transition, decoder and actor networks.

The transition does not roll out step by step: given a latent sample at
``t`` and an embedding of the actor it predicts the latent state ``H``
decisions ahead in one application. The actor embedding ``pi_hat`` is the
concatenation of the actor's input, its first hidden activation and its
output probabilities, so the transition is differentiable in the actor's
parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import EPS_P, GaussianDiag, Mlp, Tape, Tensor
from .sim import N_MODES


class ObservationError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    """Channel layout ``[buffer one-hot (K+1) | c blocks of 5 | R_p, R_e, R]``."""

    K: int
    c: int

    @property
    def dim(self) -> int:
        return self.K + 1 + N_MODES * self.c + 3

    @property
    def buffer(self) -> slice:
        return slice(0, self.K + 1)

    @property
    def machines(self) -> slice:
        return slice(self.K + 1, self.K + 1 + N_MODES * self.c)

    @property
    def prefs(self) -> slice:
        return slice(self.dim - 3, self.dim)

    @property
    def composite_index(self) -> int:
        return self.dim - 1

    @property
    def groups(self) -> list[slice]:
        base = self.K + 1
        return [self.buffer] + [slice(base + N_MODES * i, base + N_MODES * (i + 1)) for i in range(self.c)]

    def check(self, o: np.ndarray) -> None:
        o = np.atleast_2d(o)
        if o.shape[1] != self.dim:
            raise ObservationError(f"observation has {o.shape[1]} channels, expected {self.dim}")
        for g in self.groups:
            block = o[:, g]
            if not (np.all((block == 0.0) | (block == 1.0)) and np.all(block.sum(axis=1) == 1.0)):
                raise ObservationError(f"malformed one-hot group at channels {g.start}:{g.stop}")
        r = o[:, self.prefs]
        if np.any(r < 0.0) or np.any(r > 1.0):
            raise ObservationError("preference channels must lie in [0, 1]")


@dataclass
class Architecture:
    K: int = 10
    c: int = 6
    d_s: int = 16
    encoder_hidden: tuple[int, ...] = (64, 64)
    transition_hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (64, 64)
    actor_hidden: int = 32
    lambda_s: float = 1.5
    var_floor: float = 1e-4
    dropout: float = 0.1
    horizon: int = 300

    @property
    def layout(self) -> Layout:
        return Layout(self.K, self.c)

    @property
    def obs_dim(self) -> int:
        return self.layout.dim

    @property
    def n_actions(self) -> int:
        return self.c

    @property
    def pi_dim(self) -> int:
        return self.obs_dim + self.actor_hidden + self.n_actions


class Actor:
    """Policy network ``o -> softmax over target_awake in {1..c}``."""

    def __init__(self, arch: Architecture, rng: np.random.Generator | None = None, net: Mlp | None = None):
        self.arch = arch
        if net is None:
            net = Mlp("actor", [arch.obs_dim, arch.actor_hidden, arch.n_actions], ["relu", "softmax"])
            net.init(rng if rng is not None else np.random.default_rng(0))
        self.net = net

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.net.params

    def forward(self, o, tape: Tape | None = None) -> tuple[Tensor, Tensor]:
        """Action probabilities and first hidden activation."""
        probs, hidden = self.net.forward(o, tape)
        return probs, hidden[0]

    def probs(self, o: np.ndarray) -> np.ndarray:
        return self.net.predict(o)

    def sample_action(self, o: np.ndarray, rng: np.random.Generator) -> int:
        """Sampled ``target_awake`` (1-based)."""
        p = self.probs(o)[0]
        return int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right")) + 1

    def copy(self) -> "Actor":
        return Actor(self.arch, net=self.net.copy())


def actor_forward(actor: Actor, o: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs, h1 = actor.forward(np.atleast_2d(o))
    return probs.value, h1.value


def policy_repr(actor: Actor, o, tape: Tape | None = None) -> Tensor:
    """``pi_hat = [o | h1(o) | a(o)]``; differentiable in the actor's parameters when ``tape`` is given."""
    o = nn.as_tensor(np.atleast_2d(o.value if isinstance(o, Tensor) else o))
    probs, h1 = actor.forward(o, tape)
    return nn.concat([o, h1, probs])


class GenerativeModel:
    """Encoder Q(s|o), transition P(s_{t+H}|s_t, pi_hat) and decoder P(o|s)."""

    def __init__(self, arch: Architecture, rng: np.random.Generator | None = None):
        self.arch = arch
        rng = rng if rng is not None else np.random.default_rng(0)
        d, D, p = arch.d_s, arch.obs_dim, arch.dropout
        enc = [D, *arch.encoder_hidden, 2 * d]
        self.encoder = Mlp("encoder", enc, ["tanh"] * len(arch.encoder_hidden) + ["linear"], lambda_s=arch.lambda_s)
        tr = [d + arch.pi_dim, *arch.transition_hidden, 2 * d]
        nh = len(arch.transition_hidden)
        self.transition = Mlp("transition", tr, ["tanh"] * nh + ["linear"], [p] * nh + [0.0], lambda_s=arch.lambda_s)
        dec = [d, *arch.decoder_hidden, D]
        nh = len(arch.decoder_hidden)
        self.decoder = Mlp("decoder", dec, ["tanh"] * nh + ["sigmoid"], [p] * nh + [0.0])
        for net in self.nets.values():
            net.init(rng)

    @property
    def nets(self) -> dict[str, Mlp]:
        return {"encoder": self.encoder, "transition": self.transition, "decoder": self.decoder}

    @property
    def layout(self) -> Layout:
        return self.arch.layout

    def _gaussian_head(self, out: Tensor) -> GaussianDiag:
        d = self.arch.d_s
        floor, lam = self.arch.var_floor, self.arch.lambda_s
        mean = nn.tanh(out[:, :d])
        var = nn.add(nn.mul(nn.sigmoid(out[:, d:]), lam - floor), floor)
        return GaussianDiag(mean, var)

    def encode(self, o, tape: Tape | None = None, check: bool = False) -> GaussianDiag:
        if check:
            self.layout.check(o.value if isinstance(o, Tensor) else o)
        if not isinstance(o, Tensor):
            o = np.atleast_2d(o)
        out, _ = self.encoder.forward(o, tape)
        return self._gaussian_head(out)

    def transit(
        self, s, pi_hat, tape: Tape | None = None, dropout_on: bool = False, rng: np.random.Generator | None = None
    ) -> GaussianDiag:
        x = nn.concat([nn.as_tensor(s), nn.as_tensor(pi_hat)])
        out, _ = self.transition.forward(x, tape, dropout_on, rng)
        return self._gaussian_head(out)

    def decode(self, s, tape: Tape | None = None, dropout_on: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Per-channel Bernoulli parameters clamped to ``[eps, 1 - eps]``."""
        if not isinstance(s, Tensor):
            s = np.atleast_2d(s)
        out, _ = self.decoder.forward(s, tape, dropout_on, rng)
        return nn.clamp_probs(out)

    def copy(self) -> "GenerativeModel":
        new = object.__new__(GenerativeModel)
        new.arch = self.arch
        new.encoder, new.transition, new.decoder = self.encoder.copy(), self.transition.copy(), self.decoder.copy()
        return new


def sample_prediction(pred, layout: Layout) -> np.ndarray:
    """Imagined observation: argmax per one-hot group (lowest index wins ties), preferences passed through."""
    p = np.atleast_2d(pred.value if isinstance(pred, Tensor) else pred)
    out = np.zeros_like(p)
    rows = np.arange(p.shape[0])
    for g in layout.groups:
        idx = np.argmax(p[:, g], axis=1)
        out[rows, g.start + idx] = 1.0
    out[:, layout.prefs] = p[:, layout.prefs]
    return out


def imagined_observation(pred: Tensor, layout: Layout) -> Tensor:
    """Differentiable version of :func:`sample_prediction` (gradient flows through the preference channels)."""
    onehots = sample_prediction(pred, layout)[:, : layout.prefs.start]
    return nn.concat([onehots, pred[:, layout.prefs]])


def psi(pred, layout: Layout) -> Tensor:
    """Preference mapping: the predicted composite-preference channel, clamped to ``[eps, 1]``."""
    pred = nn.as_tensor(np.atleast_2d(pred) if not isinstance(pred, Tensor) else pred)
    i = layout.composite_index
    return nn.clip(pred[:, i : i + 1], EPS_P, 1.0)
