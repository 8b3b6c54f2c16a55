"""Analytic FLOPs and KV-cache model for routed decoders.

Per-layer cost with ``n = n_t + r * n_v`` processed tokens::

    4 n d^2 + 2 n^2 d + 2 n d m

(QKV/output projections, attention scores and mixing, FFN). Router, projector
and adapter costs are ignored.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from .model import LayerKind, LayerSchedule, ModelConfig, build_layer_schedule
from .router import keep_count


class CostError(ValueError):
    pass


@dataclass
class CostConfig:
    L: int
    d: int
    m: int
    heads: int
    n_t: int
    n_v: int
    schedule: LayerSchedule
    r: float
    bytes_per_entry: int  # one token's K and V at one layer

    def __post_init__(self):
        if min(self.L, self.d, self.m, self.heads) < 1 or self.n_t < 0 or self.n_v < 0:
            raise CostError("dimensions must be positive")
        if not 0 < self.r <= 1:
            raise CostError("keep ratio must lie in (0, 1]")
        if len(self.schedule) != self.L:
            raise CostError(f"schedule has {len(self.schedule)} layers, expected {self.L}")
        if self.bytes_per_entry < 1:
            raise CostError("bytes_per_entry must be positive")

    @classmethod
    def from_model(cls, config: ModelConfig, n_t: int, n_v: int, dtype_bytes: int | None = None) -> CostConfig:
        if dtype_bytes is None:
            dtype_bytes = 4 if config.dtype == "float32" else 8
        return cls(L=config.L, d=config.d, m=config.m, heads=config.heads, n_t=n_t, n_v=n_v,
                   schedule=build_layer_schedule(config), r=config.r,
                   bytes_per_entry=2 * config.d * dtype_bytes)

    def with_schedule(self, schedule: LayerSchedule) -> CostConfig:
        return CostConfig(self.L, self.d, self.m, self.heads, self.n_t, self.n_v, schedule, self.r,
                          self.bytes_per_entry)


def paper_scale(insertion: str = "interleaved", r: float = 0.2, frames: int = 600, V: int = 10,
                n_t: int = 100, dtype_bytes: int = 2) -> CostConfig:
    """Llama-3-8B-sized decoder over ``frames`` frames of ``V`` tokens."""
    mc = ModelConfig(L=32, d=4096, heads=32, m=14336, vocab=128256, V=V, insertion=insertion, r=r,
                     max_positions=1)
    return CostConfig.from_model(mc, n_t=n_t, n_v=frames * V, dtype_bytes=dtype_bytes)


def all_vanilla(L: int) -> LayerSchedule:
    return LayerSchedule(tuple(LayerKind("vanilla") for _ in range(L)))


def layer_flops(n_t: float, n_v: float, r: float, d: float, m: float) -> float:
    n = n_t + r * n_v
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


@dataclass
class FlopsReport:
    per_layer: list[float]
    kinds: list[LayerKind]
    total: float
    full_total: float

    @property
    def ratio_vs_full(self) -> float:
        return self.total / self.full_total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "effective_r", "flops"])
        for i, (k, f) in enumerate(zip(self.kinds, self.per_layer)):
            w.writerow([i, k.kind, repr(k.effective_r), repr(f)])
        w.writerow(["total", "", repr(self.ratio_vs_full), repr(self.total)])
        return buf.getvalue()


def decoder_flops(cfg: CostConfig) -> FlopsReport:
    """Sum per-layer FLOPs over the schedule and compare with an all-vanilla decoder."""
    per_layer = [layer_flops(cfg.n_t, cfg.n_v, k.effective_r, cfg.d, cfg.m) for k in cfg.schedule]
    full = cfg.L * layer_flops(cfg.n_t, cfg.n_v, 1.0, cfg.d, cfg.m)
    return FlopsReport(per_layer=per_layer, kinds=list(cfg.schedule), total=sum(per_layer), full_total=full)


@dataclass
class CacheReport:
    entries_per_frame: list[float]  # per layer, language tokens amortised
    kinds: list[LayerKind]
    frames: int
    total_bytes: float
    budget: float
    max_frames: int
    max_frames_full: int
    bytes_per_frame: float
    bytes_per_frame_full: float

    @property
    def context_multiplier(self) -> float:
        return self.max_frames / self.max_frames_full

    @property
    def asymptotic_multiplier(self) -> float:
        """Budget-independent limit of :attr:`context_multiplier`."""
        return self.bytes_per_frame_full / self.bytes_per_frame

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "effective_r", "entries"])
        for i, (k, e) in enumerate(zip(self.kinds, self.entries_per_frame)):
            w.writerow([i, k.kind, repr(k.effective_r), repr(e)])
        w.writerow(["total", "", repr(self.context_multiplier), repr(self.total_bytes)])
        return buf.getvalue()


def _entries(kind: LayerKind, V: int, lang_per_frame: float) -> float:
    if kind.kind == "vanilla":
        vis = V
    elif kind.kind == "skip":
        vis = 0
    else:
        vis = keep_count(kind.r, V)
    return vis + lang_per_frame


def cache_report(cfg: CostConfig, T: int, V: int, budget: float) -> CacheReport:
    """Cache footprint after ``T`` frames and the longest stream that fits ``budget`` bytes."""
    if T < 0 or V < 1 or budget <= 0:
        raise CostError("T, V and budget must be positive")
    frames_in_cfg = cfg.n_v / V
    lang = cfg.n_t / frames_in_cfg if frames_in_cfg else 0.0
    entries = [_entries(k, V, lang) for k in cfg.schedule]
    full_entries = [_entries(LayerKind("vanilla"), V, lang) for _ in cfg.schedule]
    per_frame = sum(entries) * cfg.bytes_per_entry
    per_frame_full = sum(full_entries) * cfg.bytes_per_entry
    if budget < per_frame_full:
        raise CostError(f"budget {budget} bytes is below one frame's footprint ({per_frame_full} bytes)")
    return CacheReport(
        entries_per_frame=entries,
        kinds=list(cfg.schedule),
        frames=T,
        total_bytes=per_frame * T,
        budget=budget,
        max_frames=math.floor(budget / per_frame),
        max_frames_full=math.floor(budget / per_frame_full),
        bytes_per_frame=per_frame,
        bytes_per_frame_full=per_frame_full,
    )


def sweep_csv(column: str, values, reports, metric) -> str:
    """One CSV row per swept value: ``column,metric``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([column, metric])
    for v, rep in zip(values, reports):
        w.writerow([repr(v), repr(getattr(rep, metric))])
    return buf.getvalue()
