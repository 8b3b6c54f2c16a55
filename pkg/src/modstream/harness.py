"""Synthetic streaming task, training loop, evaluation and baseline suite."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .costmodel import CostConfig, cache_report, decoder_flops
from .model import MoDDecoder, ModelConfig
from .objective import AugmentationConfig, augment_stream, lm_positions, mask_disrupted, streaming_loss
from .router import RouterDecision
from .sequence import EOR_ID, Frame, StreamSample, TextSpan, canonical_order, interleave

FRAME_TOKEN = 2  # every frame ends with this (the CLS-position slot)
N_SPECIAL = 3  # EOS, EOR, FRAME


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticTaskConfig:
    patch_vocab: int = 64
    text_vocab: int = 64
    V: int = 10
    signal_positions: int = 2
    event_prob: float = 0.1
    response_len: int = 3
    duration: int = 64
    n_events: int = 8
    onset_marker: bool = True  # onset frames use a distinct symbol per event
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.signal_positions < self.V:
            raise ValueError("signal_positions must be below V")
        if self.signal_positions > self.V - 1:
            raise ValueError("signal slots must fit in the patch slots")
        if not 0 <= self.event_prob <= 1:
            raise ValueError("event_prob must lie in [0, 1]")
        if self.n_events < 2 or self.n_symbols >= self.patch_vocab:
            raise ValueError("need n_events >= 2 and room for noise symbols in patch_vocab")
        if min(self.V, self.duration, self.response_len, self.text_vocab) < 1:
            raise ValueError("sizes must be positive")

    @property
    def n_symbols(self) -> int:
        """Patch symbols reserved for events; the rest of the patch vocabulary is noise."""
        return 2 * self.n_events if self.onset_marker else self.n_events

    def symbol(self, event: int, onset: bool) -> int:
        if onset and self.onset_marker:
            return self.patch_base + self.n_events + event
        return self.patch_base + event

    @property
    def patch_base(self) -> int:
        return N_SPECIAL

    @property
    def text_base(self) -> int:
        return N_SPECIAL + self.patch_vocab

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + self.patch_vocab + self.text_vocab

    @property
    def chance_precision(self) -> float:
        return self.signal_positions / self.V

    def narration(self, event: int) -> tuple[int, ...]:
        body = [self.text_base + (event * self.response_len + i) % self.text_vocab
                for i in range(self.response_len)]
        return tuple(body) + (EOR_ID,)


@dataclass
class GroundTruth:
    events: list[tuple[int, int]]  # (onset frame, event id)
    signal_slots: list[tuple[int, ...]]  # per frame; empty while no event is active
    narrations: dict[int, tuple[int, ...]] = field(default_factory=dict)  # frame -> tokens incl. EOR


def generate_stream(cfg: SyntheticTaskConfig, seed=None) -> tuple[StreamSample, GroundTruth]:
    """A stream whose latent event shows up in a few patch slots of every frame.

    Event onsets get a narration anchored right after the onset frame.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n_noise = cfg.patch_vocab - cfg.n_symbols
    frames: list[Frame] = []
    spans: list[TextSpan] = []
    truth = GroundTruth(events=[], signal_slots=[])
    current = -1
    for t in range(cfg.duration):
        onset = rng.random() < cfg.event_prob
        if onset:
            choices = [e for e in range(cfg.n_events) if e != current]
            current = int(choices[rng.integers(len(choices))])
        tokens = cfg.patch_base + cfg.n_symbols + rng.integers(n_noise, size=cfg.V - 1)
        slots = np.sort(rng.choice(cfg.V - 1, size=cfg.signal_positions, replace=False))
        if current >= 0:
            tokens[slots] = cfg.symbol(current, onset)
            truth.signal_slots.append(tuple(int(s) for s in slots))
        else:
            truth.signal_slots.append(())
        frames.append(Frame(t, tuple(int(x) for x in tokens) + (FRAME_TOKEN,)))
        if onset:
            narr = cfg.narration(current)
            spans.append(TextSpan(narr, "response", t))
            truth.events.append((t, current))
            truth.narrations[t] = narr
    return StreamSample(events=canonical_order(frames, spans), duration=cfg.duration), truth


def stream_data(cfg: SyntheticTaskConfig, seed: int = 0, offset: int = 0) -> Iterator[StreamSample]:
    """Endless fresh samples; sample ``k`` is seeded by ``(seed, offset + k)``."""
    k = offset
    while True:
        yield generate_stream(cfg, seed=[seed, k])[0]
        k += 1


def eval_set(cfg: SyntheticTaskConfig, n: int, seed: int = 0) -> tuple[list[StreamSample], list[GroundTruth]]:
    pairs = [generate_stream(cfg, seed=[seed, 1_000_000 + i]) for i in range(n)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def sample_hash(samples: Iterable[StreamSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps(s.to_record(), separators=(",", ":")).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# training


@dataclass
class OptimizerConfig:
    lr: float = 2e-3
    decay: float = 0.99
    eps: float = 1e-8


class RMSProp:
    """Adaptive per-entry step size without momentum."""

    def __init__(self, params: Sequence[nx.Parameter], cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.sq = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        c = self.cfg
        for p, s in zip(self.params, self.sq):
            g = p.grad
            s *= c.decay
            s += (1 - c.decay) * g * g
            with np.errstate(over="ignore", invalid="ignore"):
                upd = (c.lr * g / (np.sqrt(s) + c.eps)).astype(p.dtype)
            if not np.all(np.isfinite(upd)):
                raise nx.NonFiniteError(f"non-finite update for {p.name}")
            p.data -= upd


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, msg: str = "non-finite loss"):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass
class LogRow:
    step: int
    lm_loss: float
    eos_loss: float
    total: float
    lr: float


LOG_HEADER = ("step", "lm_loss", "eos_loss", "total", "lr")


def log_csv(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r.step, repr(r.lm_loss), repr(r.eos_loss), repr(r.total), repr(r.lr)])
    return buf.getvalue()


StepHook = Callable[[int, dict, object], None]


def train(model: MoDDecoder, data: Iterator[StreamSample], steps: int,
          opt: OptimizerConfig | None = None, *, sigma: float = 1.0,
          augmentation: AugmentationConfig | None = None, normalization: str = "per_term",
          on_step: StepHook | None = None) -> list[LogRow]:
    """Plain training loop; one sample per step.

    ``on_step(step, decisions, seq)`` sees each step's routing decisions.
    """
    opt = opt or OptimizerConfig()
    optim = RMSProp(model.parameters(), opt)
    aug_rng = random.Random(augmentation.seed) if augmentation else None
    V, vocab = model.config.V, model.config.vocab
    rows: list[LogRow] = []
    for step in range(steps):
        sample = next(data)
        markers = []
        if augmentation is not None and augmentation.replace_prob > 0:
            sample, markers = augment_stream(sample, augmentation, aug_rng)
        seq = interleave(sample, V, vocab_size=vocab)
        if markers:
            seq = mask_disrupted(seq, markers)
        model.zero_grad()
        try:
            logits, decisions = model.forward_full(seq)
            loss = streaming_loss(logits, seq, sigma, normalization)
            loss.backward()
        except nx.NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        if not math.isfinite(loss.total):
            raise TrainingDiverged(step)
        try:
            optim.step()
        except nx.NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        rows.append(LogRow(step, loss.lm_loss, loss.eos_loss, loss.total, opt.lr))
        if on_step is not None:
            on_step(step, decisions, seq)
    return rows


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    lm_ppl: float | None = None
    lm_correctness: float | None = None
    time_diff: float | None = None
    fluency: float | None = None
    router_precision: float | None = None
    chance_precision: float | None = None


def _logits(model, seq) -> np.ndarray:
    with nx.no_grad():
        out = model.forward_full(seq)
    logits = out[0] if isinstance(out, tuple) else out
    return logits.data if isinstance(logits, nx.Tensor) else np.asarray(logits)


def eval_teacher_forced(model, samples: Iterable[StreamSample]) -> tuple[float | None, float | None]:
    """Perplexity and argmax accuracy on supervised response positions."""
    nll = 0.0
    hits = 0
    count = 0
    V = model.config.V
    for sample in samples:
        seq = interleave(sample, V)
        pos = lm_positions(seq)
        if pos.size == 0:
            continue
        z = _logits(model, seq)[pos].astype(np.float64)
        t = seq.targets[pos]
        m = z.max(axis=1)
        lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
        nll += float(np.sum(lse - z[np.arange(pos.size), t]))
        hits += int(np.sum(np.argmax(z, axis=1) == t))
        count += pos.size
    if count == 0:
        return None, None
    return math.exp(nll / count), hits / count


def router_precision(decisions: Iterable[RouterDecision], truth: GroundTruth) -> tuple[int, int]:
    """``(kept signal slots, kept tokens)`` over frames that carry a planted signal."""
    hit = tot = 0
    for d in decisions:
        if 0 <= d.frame < len(truth.signal_slots) and truth.signal_slots[d.frame]:
            slots = set(truth.signal_slots[d.frame])
            hit += sum(int(k) in slots for k in d.kept)
            tot += len(d.kept)
    return hit, tot


class ModelAgent:
    """Drives a model frame by frame through its KV cache."""

    def __init__(self, model: MoDDecoder, max_len: int):
        self.model = model
        self.max_len = max_len
        self.cache = model.new_cache()

    def reset(self) -> None:
        self.cache = self.model.new_cache()

    def has_room(self, n: int) -> bool:
        return self.cache.next_position + n <= self.model.config.max_positions

    def observe_frame(self, frame: Frame) -> list[int]:
        self.model.forward_stream_step(frame.tokens, self.cache, is_frame=True)
        return self.model.generate_response(self.cache, self.max_len).tokens

    def observe_text(self, tokens) -> None:
        self.model.forward_stream_step(tokens, self.cache, is_frame=False)

    @property
    def decisions(self) -> list[RouterDecision]:
        return self.cache.decisions


class PlaybackAgent:
    """Replays ground-truth narrations at their frames."""

    def __init__(self, truths: Sequence[GroundTruth]):
        self._truths = list(truths)
        self._i = -1
        self.decisions: list[RouterDecision] = []

    def reset(self) -> None:
        self._i += 1

    def has_room(self, n: int) -> bool:
        return True

    def observe_frame(self, frame: Frame) -> list[int]:
        narr = self._truths[self._i].narrations.get(frame.frame_id)
        return list(narr[:-1]) if narr else []

    def observe_text(self, tokens) -> None:
        pass


class SilentAgent(PlaybackAgent):
    def __init__(self):
        super().__init__([])

    def observe_frame(self, frame: Frame) -> list[int]:
        return []


def match_responses(truth: GroundTruth, responses: list[tuple[int, list[int]]],
                    window: int) -> tuple[list[float], int, int]:
    """Pair each event with the earliest unused response within ``window`` frames.

    Returns per-event frame differences (``window`` when unmatched), exactly
    reproduced narration tokens, and the number of narration tokens.
    """
    used = [False] * len(responses)
    diffs: list[float] = []
    good = total = 0
    for frame, _ in truth.events:
        gt = truth.narrations[frame][:-1]
        total += len(gt)
        best = None
        for i, (rf, _) in enumerate(responses):
            if not used[i] and abs(rf - frame) <= window:
                best = i
                break
        if best is None:
            diffs.append(float(window))
            continue
        used[best] = True
        rf, toks = responses[best]
        diffs.append(float(abs(rf - frame)))
        good += sum(1 for a, b in zip(toks, gt) if a == b)
    return diffs, good, total


def eval_streaming(agent, samples: Sequence[StreamSample], truths: Sequence[GroundTruth],
                   window: int = 5, max_len: int | None = None,
                   task: SyntheticTaskConfig | None = None,
                   record: list | None = None) -> MetricsReport:
    """Free-running evaluation: timing error, fluency and router precision.

    Routing decisions of every sample are appended to ``record`` if given.
    """
    if isinstance(agent, MoDDecoder):
        if max_len is None:
            max_len = (task.response_len + 1) if task else 8
        agent = ModelAgent(agent, max_len)
    diffs: list[float] = []
    good = total = 0
    hit = kept = 0
    for sample, truth in zip(samples, truths):
        agent.reset()
        responses: list[tuple[int, list[int]]] = []
        for ev in canonical_order(sample.frames, sample.spans):
            if isinstance(ev, Frame):
                if not agent.has_room(len(ev.tokens)):
                    break
                toks = agent.observe_frame(ev)
                if toks:
                    responses.append((ev.frame_id, toks))
            elif ev.kind == "prompt" and agent.has_room(len(ev.tokens)):
                agent.observe_text(ev.tokens)
        d, g, t = match_responses(truth, responses, window)
        diffs += d
        good += g
        total += t
        if record is not None:
            record.extend(agent.decisions)
        h, k = router_precision(agent.decisions, truth)
        hit += h
        kept += k
    return MetricsReport(
        time_diff=float(np.mean(diffs)) if diffs else None,
        fluency=good / total if total else None,
        router_precision=hit / kept if kept else None,
        chance_precision=task.chance_precision if task else None,
    )


def evaluate(model: MoDDecoder, samples, truths, task: SyntheticTaskConfig, window: int = 5) -> MetricsReport:
    ppl, acc = eval_teacher_forced(model, samples)
    rep = eval_streaming(model, samples, truths, window=window, task=task)
    rep.lm_ppl, rep.lm_correctness = ppl, acc
    return rep


# ---------------------------------------------------------------------------
# baseline suite

METRIC_COLUMNS = ("config", "lm_ppl", "lm_correctness", "time_diff", "fluency", "router_precision",
                  "flops_ratio", "cache_multiplier")


def default_baselines(base: ModelConfig) -> dict[str, ModelConfig]:
    return {
        "full": base.replace(insertion="full"),
        "mod_interleaved": base.replace(insertion="interleaved", r=0.2, keep_strategy="learnable"),
        "early_exit": base.replace(insertion="early_exit"),
        "layer_skip": base.replace(insertion="layer_skip"),
        "random": base.replace(insertion="interleaved", r=0.2, keep_strategy="random"),
        "uniform": base.replace(insertion="interleaved", r=0.2, keep_strategy="uniform"),
    }


def analytic_costs(config: ModelConfig, task: SyntheticTaskConfig, n_t: int) -> tuple[float, float]:
    """(FLOPs ratio, asymptotic cache multiplier) for one desk-scale stream."""
    cost = CostConfig.from_model(config, n_t=n_t, n_v=task.duration * task.V)
    flops = decoder_flops(cost).ratio_vs_full
    per_frame = cache_report(cost, task.duration, task.V, budget=float(2**62))
    return flops, per_frame.asymptotic_multiplier


class _Recording:
    def __init__(self, it: Iterator[StreamSample]):
        self.it = it
        self.seen: list[StreamSample] = []

    def __iter__(self):
        return self

    def __next__(self) -> StreamSample:
        s = next(self.it)
        self.seen.append(s)
        return s


def run_baseline_suite(task: SyntheticTaskConfig, configs: dict[str, ModelConfig], steps: int,
                       opt: OptimizerConfig | None = None, *, seed: int = 0, n_eval: int = 8,
                       sigma: float = 1.0, window: int = 5,
                       augmentation: AugmentationConfig | None = None) -> list[dict]:
    """Train and evaluate each configuration on identical data; one row per config."""
    samples, truths = eval_set(task, n_eval, seed)
    n_t = round(np.mean([sum(len(s.tokens) for s in smp.spans) for smp in samples])) if samples else 0
    rows = []
    for name, cfg in configs.items():
        row: dict = {"config": name}
        try:
            model = MoDDecoder(cfg)
            data = _Recording(stream_data(task, seed))
            train(model, data, steps, opt, sigma=sigma, augmentation=augmentation)
            rep = evaluate(model, samples, truths, task, window)
            flops, cache = analytic_costs(cfg, task, n_t)
            row.update(lm_ppl=rep.lm_ppl, lm_correctness=rep.lm_correctness, time_diff=rep.time_diff,
                       fluency=rep.fluency, router_precision=rep.router_precision, flops_ratio=flops,
                       cache_multiplier=cache, data_hash=sample_hash(data.seen + samples), error="")
        except Exception as exc:  # one failing config must not sink the suite
            row.update({c: None for c in METRIC_COLUMNS[1:]}, data_hash="", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def rows_csv(rows: Sequence[dict], columns: Sequence[str] = METRIC_COLUMNS + ("data_hash", "error")) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in columns])
    return buf.getvalue()
