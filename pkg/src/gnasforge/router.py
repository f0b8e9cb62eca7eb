"""Macro-architecture routing: Gumbel-sigmoid gated shortcut connections.

Shortcut (i, j) with i <= j routes the input of block i into the output of
block j through a bias-free linear map. Gate priors live in an upper
triangular matrix of unconstrained log-priors; the lower triangle is
permanently inactive (no backward connections). Diagonal entries are
residual skips over a single block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, glorot

log = logging.getLogger(__name__)

TAU_MIN = 1e-3


@dataclass
class TempSchedule:
    """Temperature annealing constants shared by the router and the controller noise."""
    kind: str = "exp"          # "exp" | "cosine_exp"
    alpha: float = 1.0
    e_start: int = 80
    e_max: int = 400
    e_cos: int = 100
    e_exp: int = 300
    omega: float = None        # defaults to a 1 -> 0 sweep over the cosine window
    tau_min: float = TAU_MIN

    def __post_init__(self):
        if self.kind not in ("exp", "cosine_exp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.omega is None:
            self.omega = np.pi / (2.0 * max(self.e_exp - self.e_cos, 1))


def temp_anneal(e, schedule):
    """tau(e): flat at 1, then (optionally cosine, then) exponential decay.

    The cosine variant is discontinuous at e_exp by its published definition;
    values are clamped to [tau_min, 1].
    """
    s = schedule
    if s.kind == "exp":
        tau = 1.0 if e < s.e_start else np.exp(-(s.alpha / s.e_max) * (e - s.e_start))
    else:
        if e < s.e_cos:
            tau = 1.0
        elif e < s.e_exp:
            tau = np.cos(s.omega * (e - s.e_cos))
        else:
            tau = np.exp(-(s.alpha / s.e_max) * (e - s.e_exp))
    return float(np.clip(tau, s.tau_min, 1.0))


def sample_gumbel(rng, size=None):
    """g = -log(-log(u)), u ~ Uniform(0, 1)."""
    u = rng.random(size)
    return -np.log(-np.log(u))


GATE_EPS = 1e-12


def gumbel_sigmoid(theta, tau, g):
    """sigmoid((theta + g) / tau) on a Tensor, with the noise g as a constant.

    The gate value is nudged into the open interval (0, 1): at low tau the
    sigmoid saturates to exactly 0 or 1 in floats even though the true value
    never reaches either bound; the local gradient there is already ~0.
    """
    if tau < TAU_MIN:
        log.warning("gumbel_sigmoid: tau=%g below floor %g, clamping", tau, TAU_MIN)
        tau = TAU_MIN
    s = T.sigmoid(T.scale(theta + Tensor(g), 1.0 / tau))
    np.clip(s.data, GATE_EPS, 1.0 - GATE_EPS, out=s.data)
    return s


class Router:
    """Owns theta (a_macro) and the shortcut linear maps g_ij (w-parameters)."""

    def __init__(self, store, input_dims, output_dims, rng):
        self.store = store
        self.num_blocks = len(input_dims)
        self.input_dims = list(input_dims)
        self.output_dims = list(output_dims)
        self.theta = store.add("router/theta",
                               np.zeros((self.num_blocks, self.num_blocks)),
                               group="a_macro")
        for i in range(self.num_blocks):
            for j in range(i, self.num_blocks):
                store.add(f"router/shortcut/{i}_{j}/W",
                          glorot(rng, output_dims[j], input_dims[i]))

    def shortcut(self, i, j):
        return self.store[f"router/shortcut/{i}_{j}/W"]

    def pairs(self):
        return [(i, j) for i in range(self.num_blocks) for j in range(i, self.num_blocks)]

    def gate_expectations(self):
        """Noise-free expected gates sigmoid(theta) on the active triangle."""
        s = 1.0 / (1.0 + np.exp(-self.theta.data))
        return {(i, j): float(s[i, j]) for (i, j) in self.pairs()}

    def derive_binary_routing(self):
        """Keep (i, j) iff sigmoid(theta_ij) > 0.5, i.e. theta_ij > 0 (strict)."""
        return [(i, j) for (i, j) in self.pairs() if self.theta.data[i, j] > 0.0]

    def sample_noise(self, rng):
        return sample_gumbel(rng, (self.num_blocks, self.num_blocks))

    def route_step(self, j, inputs, output, tau, mode="sampled", noise=None):
        """Routed output O_j = O'_j + sum_{i<=j} gate_ij * g_ij(I_i) for one block."""
        if mode not in ("sampled", "deterministic", "binary"):
            raise ValueError(f"unknown routing mode {mode!r}")
        binary = set(self.derive_binary_routing()) if mode == "binary" else None
        acc = output
        for i in range(j + 1):
            w = self.shortcut(i, j)
            if output.data.shape[1] != w.data.shape[0]:
                raise T.ShapeError(
                    f"route: shortcut ({i},{j}) maps to width {w.data.shape[0]}, "
                    f"output has width {output.data.shape[1]}")
            if mode == "binary":
                if (i, j) not in binary:
                    continue
                contrib = T.matmul(inputs[i], _t(w))
            else:
                th = T.pick(self.theta, i * self.num_blocks + j)
                g = noise[i, j] if mode == "sampled" else 0.0
                gate = gumbel_sigmoid(th, tau, g)
                contrib = T.mul(T.matmul(inputs[i], _t(w)), gate)
            acc = acc + contrib
        return acc

    def route(self, inputs, outputs, tau, rng=None, mode="sampled", noise=None):
        """O_j = O'_j + sum_{i<=j} gate_ij * g_ij(I_i) for every block.

        mode: "sampled" (fresh or supplied Gumbel noise), "deterministic"
        (gate = sigmoid(theta/tau), no noise), or "binary" (gates from
        derive_binary_routing).
        """
        if mode == "sampled" and noise is None:
            noise = self.sample_noise(rng)
        return [self.route_step(j, inputs, o, tau, mode=mode, noise=noise)
                for j, o in enumerate(outputs)]


def _t(w):
    out = Tensor(w.data.T, _parents=(w,))

    def bw(g):
        if w.requires_grad:
            if w.grad is None:
                w.grad = np.zeros_like(w.data)
            w.grad += g.T

    out._backward = bw
    return out
