"""LayerExpert routing: score vision tokens, keep the top-k of each frame."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx

GATES = ("identity", "sigmoid")
SCALE_MODES = ("gated", "unit")
KEEP_STRATEGIES = ("learnable", "random", "uniform")


class RoutingError(ValueError):
    pass


@dataclass
class RouterParams:
    w_theta: nx.Tensor
    gate_activation: str = "identity"
    scale_mode: str = "gated"

    def __post_init__(self):
        if self.gate_activation not in GATES:
            raise RoutingError(f"unknown gate activation {self.gate_activation!r}")
        if self.scale_mode not in SCALE_MODES:
            raise RoutingError(f"unknown scale mode {self.scale_mode!r}")


@dataclass
class RouterDecision:
    frame: int
    scores: np.ndarray
    threshold: float
    kept: np.ndarray  # frame-local indices, ascending
    keep_ratio: float
    layer: int = -1

    def to_record(self) -> dict:
        return {
            "layer": self.layer,
            "frame": self.frame,
            "keep_ratio": self.keep_ratio,
            "threshold": self.threshold if math.isfinite(self.threshold) else None,
            "kept": [int(i) for i in self.kept],
            "scores": [float(s) for s in self.scores],
        }


def keep_count(r: float, V: int) -> int:
    """Tokens kept per frame: ceil(r * V), with r=0 meaning none.

    The product is rounded to 12 significant digits first so that values like
    0.2 * 10 do not round up to 3 through float error.
    """
    if not 0 <= r <= 1:
        raise RoutingError(f"keep ratio {r} outside [0, 1]")
    return min(V, math.ceil(round(r * V, 12)))


def score_tokens(hidden: nx.Tensor, w_theta: nx.Tensor) -> nx.Tensor:
    """Raw linear importance scores ``hidden @ w_theta``, one per row."""
    if hidden.shape[-1] != w_theta.shape[0] or w_theta.data.ndim != 1:
        raise RoutingError(f"hidden width {hidden.shape} does not match router weights {w_theta.shape}")
    return nx.matmul(hidden, w_theta)


def select_topk(mu: np.ndarray, r: float, frame: int = -1, layer: int = -1) -> RouterDecision:
    """Keep the ceil(r*V) best scores of one frame; ties go to the lower index."""
    mu = np.asarray(mu, dtype=np.float64)
    V = mu.shape[0]
    k = keep_count(r, V)
    order = np.argsort(-mu, kind="stable")
    kept = np.sort(order[:k])
    threshold = float(mu[order[k]]) if k < V else -math.inf
    return RouterDecision(frame=frame, scores=mu.copy(), threshold=threshold, kept=kept,
                          keep_ratio=float(r), layer=layer)


def select_topk_per_frame(mu_per_frame: Sequence[np.ndarray], r: float,
                          frames: Sequence[int] | None = None, layer: int = -1) -> list[RouterDecision]:
    frames = list(range(len(mu_per_frame))) if frames is None else list(frames)
    return [select_topk(mu, r, frame=f, layer=layer) for mu, f in zip(mu_per_frame, frames)]


def override_scores(strategy: str, V: int, r: float, *, seed: int = 0, layer: int = 0,
                    frame: int = 0) -> np.ndarray:
    """Synthetic scores that make top-k pick a fixed pattern.

    ``uniform`` favours evenly spaced slots; ``random`` a seeded shuffle keyed
    on (seed, layer, frame ordinal) so training and streaming agree.
    """
    if strategy == "uniform":
        k = keep_count(r, V)
        scores = np.zeros(V)
        if k:
            scores[np.floor(np.arange(k) * V / k).astype(int)] = 1.0
        return scores
    if strategy == "random":
        rng = np.random.default_rng([seed, layer, frame])
        return rng.permutation(V).astype(np.float64)
    raise RoutingError(f"no score override for strategy {strategy!r}")


def gate(mu: nx.Tensor, activation: str) -> nx.Tensor:
    if activation == "identity":
        return mu
    if activation == "sigmoid":
        return nx.sigmoid(mu)
    raise RoutingError(f"unknown gate activation {activation!r}")


def combine_block_output(x: nx.Tensor, f_out: nx.Tensor | None, mu: nx.Tensor | None, kept: bool,
                         params: RouterParams) -> nx.Tensor:
    """Next-layer value of a single vision token.

    Kept: ``gate(mu) * f_out + x`` (or ``f_out + x`` in unit mode). Dropped: ``x``.
    """
    if not kept:
        if f_out is not None:
            raise RoutingError("block output given for a dropped token")
        return x
    if f_out is None:
        raise RoutingError("kept token is missing its block output")
    if params.scale_mode == "unit":
        return nx.add(x, f_out)
    return nx.add(x, nx.scale_rows(f_out, gate(mu, params.gate_activation)))


def write_decisions(path, decisions: Iterable[RouterDecision], step: int | None = None) -> None:
    """Append decisions as JSON lines."""
    with open(path, "a", encoding="utf-8") as fh:
        for d in decisions:
            rec = d.to_record()
            if step is not None:
                rec = {"step": step, **rec}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
