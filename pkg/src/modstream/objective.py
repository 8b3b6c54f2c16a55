"""Streaming training objective and temporal-disruption augmentation."""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .sequence import (EOS_ID, InterleavedSequence, StreamSample, TextSpan, TokenRole,
                       canonical_order)

NORMALIZATIONS = ("per_term", "sequence")


@dataclass
class LossBreakdown:
    lm_loss: float
    eos_loss: float
    total: float
    lm_count: int
    eos_count: int
    value: nx.Tensor  # differentiable total

    def backward(self) -> None:
        self.value.backward()


def lm_positions(seq: InterleavedSequence) -> np.ndarray:
    """Positions j whose next token is a supervised response token."""
    nxt = np.append(seq.lm_indicator[1:], 0)
    return np.flatnonzero(nxt == 1)


def streaming_loss(logits: nx.Tensor, seq: InterleavedSequence, sigma: float = 1.0,
                   normalization: str = "per_term") -> LossBreakdown:
    """LM cross-entropy on response tokens plus ``sigma`` times the frame-end EOS loss.

    ``per_term`` averages each term over its own contributing positions;
    ``sequence`` divides both sums by the sequence length instead.
    """
    N = len(seq)
    if logits.shape[0] != N:
        raise ValueError(f"logits have {logits.shape[0]} rows for a {N}-token sequence")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    lm_pos = lm_positions(seq)
    eos_pos = np.flatnonzero(seq.stream_indicator == 1)

    def term(pos: np.ndarray, targets: np.ndarray):
        if pos.size == 0:
            return None
        w = np.zeros(N)
        w[pos] = 1.0 / (pos.size if normalization == "per_term" else N)
        t = np.full(N, -1, dtype=np.int64)
        t[pos] = targets
        return nx.cross_entropy(logits, t, w)

    lm = term(lm_pos, seq.targets[lm_pos])
    eos = term(eos_pos, np.full(eos_pos.size, EOS_ID))
    zero = nx.constant(np.zeros((), dtype=logits.dtype))
    lm_t = lm if lm is not None else zero
    eos_t = eos if eos is not None else zero
    value = nx.add(lm_t, nx.scale(eos_t, sigma))
    return LossBreakdown(lm_loss=float(lm_t.data), eos_loss=float(eos_t.data), total=float(value.data),
                         lm_count=int(lm_pos.size), eos_count=int(eos_pos.size), value=value)


@dataclass
class AugmentationConfig:
    shift_window: int = 0
    replace_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shift_window < 0:
            raise ValueError("shift_window must be non-negative")
        if not 0 <= self.replace_prob <= 1:
            raise ValueError("replace_prob must lie in [0, 1]")


@dataclass(frozen=True)
class DisruptedSpan:
    span: int  # ordinal among the augmented sample's spans
    anchor: int  # frame id the span now follows


def augment_stream(sample: StreamSample, cfg: AugmentationConfig,
                   rng: random.Random | None = None) -> tuple[StreamSample, list[DisruptedSpan]]:
    """Shift and/or swap response spans at random; report which spans were touched.

    Each response span is disrupted with probability ``replace_prob``; a
    disrupted span is shifted by a uniform offset in ``[-shift_window,
    shift_window]`` frames, swapped with another response span, or both. A
    swap exchanges token contents and keeps both anchors.
    """
    rng = rng if rng is not None else random.Random(cfg.seed)
    frame_ids = sorted(f.frame_id for f in sample.frames)
    spans = list(sample.spans)
    response = [i for i, s in enumerate(spans) if s.kind == "response"]
    touched: set[int] = set()
    if not response or cfg.replace_prob == 0:
        return StreamSample(events=list(sample.events), duration=sample.duration), []

    pos_of = {fid: i for i, fid in enumerate(frame_ids)}
    for i in response:
        if rng.random() >= cfg.replace_prob:
            continue
        partners = [j for j in response if j != i]
        if partners and cfg.shift_window > 0:
            mode = rng.choice(("shift", "swap", "both"))
        elif partners:
            mode = "swap"
        else:
            mode = "shift"
        if mode in ("swap", "both"):
            j = rng.choice(partners)
            a, b = spans[i], spans[j]
            spans[i] = TextSpan(b.tokens, a.kind, a.anchored_after_frame)
            spans[j] = TextSpan(a.tokens, b.kind, b.anchored_after_frame)
            touched.update((i, j))
        if mode in ("shift", "both"):
            off = rng.randint(-cfg.shift_window, cfg.shift_window)
            k = min(max(pos_of[spans[i].anchored_after_frame] + off, 0), len(frame_ids) - 1)
            s = spans[i]
            spans[i] = TextSpan(s.tokens, s.kind, frame_ids[k])
            touched.add(i)

    events = canonical_order(sample.frames, spans)
    out = StreamSample(events=events, duration=sample.duration)
    # span ordinals follow the new event order
    order = [e for e in events if isinstance(e, TextSpan)]
    new_index = {id(s): n for n, s in enumerate(order)}
    markers = sorted((DisruptedSpan(new_index[id(spans[i])], spans[i].anchored_after_frame)
                      for i in touched), key=lambda m: m.span)
    return out, markers


def mask_disrupted(seq: InterleavedSequence, markers: list[DisruptedSpan],
                   adjacent: int = 1) -> InterleavedSequence:
    """Drop LM supervision on disrupted spans and EOS supervision next to them.

    ``adjacent`` frames on each side of the anchor lose their EOS label: the
    anchor frame itself counts as the first frame before the span.
    """
    out = seq.copy()
    if not markers:
        return out
    frame_ids = sorted(set(int(f) for f in seq.frame_of[seq.frame_of >= 0]))
    pos_of = {fid: i for i, fid in enumerate(frame_ids)}
    frame_last = np.flatnonzero(seq.roles == TokenRole.FRAME_LAST)
    last_of = {int(seq.frame_of[j]): j for j in frame_last}
    for m in markers:
        out.lm_indicator[seq.span_of == m.span] = 0
        i = pos_of[m.anchor]
        for k in range(i - adjacent + 1, i + adjacent + 1):
            if 0 <= k < len(frame_ids):
                out.stream_indicator[last_of[frame_ids[k]]] = 0
    return out
