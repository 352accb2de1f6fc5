"""Output-edge potentials: convex functions of the prediction discrepancy.

Each kind defines f(d) applied componentwise to d = prediction - target, with
gradient taken componentwise. Cross-entropy is the one member that is not a
function of the difference; it pairs with softmax (or sigmoid for binary
targets) and its force simplifies to phi(z) - y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigError

KINDS = ("squared", "l1", "pnorm", "huber", "cross_entropy")


@dataclass(frozen=True)
class LossSpec:
    kind: str
    p: float | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind == "pnorm":
            if self.p is None or self.p <= 1:
                raise ConfigError("pnorm requires p > 1")
        if self.kind == "huber":
            if self.tau is None or self.tau <= 0:
                raise ConfigError("huber requires tau > 0")

    @classmethod
    def squared(cls):
        return cls("squared")

    @classmethod
    def l1(cls):
        return cls("l1")

    @classmethod
    def pnorm(cls, p: float):
        return cls("pnorm", p=float(p))

    @classmethod
    def huber(cls, tau: float):
        return cls("huber", tau=float(tau))

    @classmethod
    def cross_entropy(cls):
        return cls("cross_entropy")

    @classmethod
    def parse(cls, text) -> "LossSpec":
        """"squared" | "l1" | "pnorm:3" | "huber:0.5" | "cross_entropy"."""
        if isinstance(text, LossSpec):
            return text
        name, _, arg = str(text).partition(":")
        if name == "pnorm":
            return cls.pnorm(float(arg)) if arg else cls("pnorm")
        if name == "huber":
            return cls.huber(float(arg)) if arg else cls("huber")
        return cls(name)

    def __str__(self):
        if self.kind == "pnorm":
            return f"pnorm:{self.p:g}"
        if self.kind == "huber":
            return f"huber:{self.tau:g}"
        return self.kind


def loss_gradient(d, loss) -> np.ndarray:
    """Componentwise (sub)gradient of the edge potential at discrepancy d.

    squared: d; l1: sign(d) with sign(0) = 0; pnorm: |d|^(p-2) d;
    huber: clip(d, -tau, tau). Cross-entropy is handled at the output edge
    (it is not a function of d alone) and is rejected here.
    """
    loss = LossSpec.parse(loss)
    d = np.asarray(d, dtype=np.float64)
    if loss.kind == "squared":
        return d.copy()
    if loss.kind == "l1":
        return np.sign(d)
    if loss.kind == "pnorm":
        return np.abs(d) ** (loss.p - 2.0) * d
    if loss.kind == "huber":
        return np.clip(d, -loss.tau, loss.tau)
    raise ConfigError("cross_entropy has no difference-form gradient; use the output-edge force")


def loss_value(d, loss) -> float:
    """Sum over components of the edge potential (squared: 1/2 d^2 etc.)."""
    loss = LossSpec.parse(loss)
    d = np.asarray(d, dtype=np.float64)
    if loss.kind == "squared":
        return float(0.5 * (d * d).sum())
    if loss.kind == "l1":
        return float(np.abs(d).sum())
    if loss.kind == "pnorm":
        return float((np.abs(d) ** loss.p).sum() / loss.p)
    if loss.kind == "huber":
        a = np.abs(d)
        return float(np.where(a <= loss.tau, 0.5 * d * d, loss.tau * (a - 0.5 * loss.tau)).sum())
    raise ConfigError("cross_entropy value needs predictions and targets, not a difference")
