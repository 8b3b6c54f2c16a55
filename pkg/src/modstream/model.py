"""Decoder-only transformer with mixture-of-depths routing of vision tokens.

Each layer is one of three kinds:

* ``vanilla`` -- every token goes through attention + FFN;
* ``mod`` -- language tokens plus the top-k vision tokens of every frame are
  gathered into a compacted subsequence, processed, and scattered back; the
  kept vision tokens' block output is scaled by the router score;
* ``skip`` -- only language tokens are processed.

Positions come from a learned absolute embedding added once at the input, so
compaction never renumbers anything.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _flat
from . import numerics as nx
from .router import (GATES, KEEP_STRATEGIES, SCALE_MODES, RouterDecision, gate,
                     override_scores, score_tokens, select_topk)
from .sequence import EOR_ID, EOS_ID, InterleavedSequence, flatten_frames

INSERTIONS = ("all", "all_deep", "interleaved", "interleaved_deep", "full", "early_exit", "layer_skip")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    L: int = 4
    d: int = 64
    heads: int = 4
    m: int = 256
    vocab: int = 131
    V: int = 10
    insertion: str = "interleaved"
    r: float = 0.2
    max_positions: int = 1024
    early_exit: int = 2
    gate_activation: str = "identity"
    scale_mode: str = "gated"
    keep_strategy: str = "learnable"
    layer_ratios: tuple[float, ...] | None = None  # explicit per-layer MoD ratios; overrides insertion
    nonlinearity: str = "gelu"
    dtype: str = "float32"
    init_std: float = 0.02
    router_init_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.layer_ratios is not None:
            self.layer_ratios = tuple(float(r) for r in self.layer_ratios)
        self.validate()

    def validate(self) -> None:
        if min(self.L, self.d, self.heads, self.m, self.vocab, self.V, self.max_positions) < 1:
            raise ModelError("dimensions must be positive")
        if self.d % self.heads:
            raise ModelError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0 < self.r <= 1:
            raise ModelError(f"keep ratio r={self.r} outside (0, 1]")
        if self.insertion not in INSERTIONS:
            raise ModelError(f"unknown insertion {self.insertion!r}")
        if self.insertion == "early_exit" and not 0 <= self.early_exit < self.L:
            raise ModelError("early-exit layer must be below L")
        if self.gate_activation not in GATES or self.scale_mode not in SCALE_MODES:
            raise ModelError("bad router gate or scale mode")
        if self.keep_strategy not in KEEP_STRATEGIES:
            raise ModelError(f"unknown keep strategy {self.keep_strategy!r}")
        if self.layer_ratios is not None:
            if len(self.layer_ratios) != self.L or not all(0 <= r <= 1 for r in self.layer_ratios):
                raise ModelError("layer_ratios needs L entries in [0, 1]")
        if self.nonlinearity not in ("gelu", "relu"):
            raise ModelError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"unsupported dtype {self.dtype!r}")

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return _flat.dumps(self)

    @classmethod
    def loads(cls, text: str) -> ModelConfig:
        return _flat.build(cls, _flat.parse(text))


@dataclass(frozen=True)
class LayerKind:
    kind: str  # "vanilla" | "mod" | "skip"
    r: float = 1.0

    def __str__(self) -> str:
        return f"mod({self.r:g})" if self.kind == "mod" else self.kind

    @property
    def effective_r(self) -> float:
        return {"vanilla": 1.0, "skip": 0.0}.get(self.kind, self.r)


VANILLA = LayerKind("vanilla")
SKIP = LayerKind("skip")


@dataclass(frozen=True)
class LayerSchedule:
    kinds: tuple[LayerKind, ...]

    def __len__(self) -> int:
        return len(self.kinds)

    def __iter__(self):
        return iter(self.kinds)

    def __getitem__(self, i) -> LayerKind:
        return self.kinds[i]

    def __str__(self) -> str:
        return "[" + ", ".join(str(k) for k in self.kinds) + "]"


def build_layer_schedule(config: ModelConfig) -> LayerSchedule:
    """Which layers are vanilla, MoD(r) or vision-skipping."""
    L, r = config.L, config.r
    if config.layer_ratios is not None:
        return LayerSchedule(tuple(LayerKind("mod", x) for x in config.layer_ratios))
    ins = config.insertion
    if ins == "full":
        kinds = [VANILLA] * L
    elif ins == "layer_skip":
        kinds = [VANILLA if i % 2 == 0 else SKIP for i in range(L)]
    elif ins == "early_exit":
        kinds = [VANILLA if i < config.early_exit else SKIP for i in range(L)]
    else:
        every = ins.startswith("all")
        deep = ins.endswith("_deep")
        kinds = []
        for i in range(L):
            routed = every or i % 2 == 1
            if deep and i < 2:
                routed = False
            kinds.append(LayerKind("mod", r) if routed else VANILLA)
    return LayerSchedule(tuple(kinds))


@dataclass
class KVCacheState:
    """Per-layer keys/values of the tokens each layer actually processed."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: list[np.ndarray]
    counts: list[int]
    next_position: int = 0
    frames_consumed: int = 0
    last_logits: np.ndarray | None = None
    decisions: list[RouterDecision] = field(default_factory=list)

    @classmethod
    def empty(cls, config: ModelConfig) -> KVCacheState:
        dt = np.dtype(config.dtype)
        n, d = config.max_positions, config.d
        return cls(keys=[np.zeros((n, d), dt) for _ in range(config.L)],
                   values=[np.zeros((n, d), dt) for _ in range(config.L)],
                   positions=[np.zeros(n, np.int64) for _ in range(config.L)],
                   counts=[0] * config.L)

    def entries(self, layer: int) -> int:
        return self.counts[layer]

    def layer_keys(self, layer: int) -> np.ndarray:
        return self.keys[layer][: self.counts[layer]]

    def layer_values(self, layer: int) -> np.ndarray:
        return self.values[layer][: self.counts[layer]]

    def layer_positions(self, layer: int) -> np.ndarray:
        return self.positions[layer][: self.counts[layer]]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray, pos: np.ndarray) -> None:
        c = self.counts[layer]
        n = k.shape[0]
        if c and n and pos[0] <= self.positions[layer][c - 1]:
            raise ModelError("cache positions must increase")
        self.keys[layer][c:c + n] = k
        self.values[layer][c:c + n] = v
        self.positions[layer][c:c + n] = pos
        self.counts[layer] = c + n


@dataclass
class Response:
    tokens: list[int]
    truncated: bool = False

    @property
    def silent(self) -> bool:
        return not self.tokens


class MoDDecoder:
    def __init__(self, config: ModelConfig, seed: int | None = None):
        config.validate()
        self.config = config
        self.schedule = build_layer_schedule(config)
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, nx.Parameter] = {}
        self._init_params(config.seed if seed is None else seed)

    # -- parameters -------------------------------------------------------

    def _init_params(self, seed: int) -> None:
        c = self.config
        rng = np.random.default_rng(seed)

        def normal(name, *shape):
            self.params[name] = nx.Parameter(rng.normal(0.0, c.init_std, shape).astype(self.dtype), name)

        def const(name, value, n):
            self.params[name] = nx.Parameter(np.full(n, value, dtype=self.dtype), name)

        normal("tok_emb", c.vocab, c.d)
        normal("pos_emb", c.max_positions, c.d)
        for i in range(c.L):
            p = f"layer{i}."
            const(p + "ln1_g", 1.0, c.d)
            const(p + "ln1_b", 0.0, c.d)
            for w in ("wq", "wk", "wv", "wo"):
                normal(p + w, c.d, c.d)
            const(p + "ln2_g", 1.0, c.d)
            const(p + "ln2_b", 0.0, c.d)
            normal(p + "w1", c.d, c.m)
            const(p + "b1", 0.0, c.m)
            normal(p + "w2", c.m, c.d)
            const(p + "b2", 0.0, c.d)
            if c.router_init_std > 0:
                self.params[p + "w_theta"] = nx.Parameter(
                    rng.normal(0.0, c.router_init_std, c.d).astype(self.dtype), p + "w_theta")
            else:
                const(p + "w_theta", 0.0, c.d)
        const("lnf_g", 1.0, c.d)
        const("lnf_b", 0.0, c.d)
        normal("head", c.d, c.vocab)

    def parameters(self) -> list[nx.Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ModelError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != p.shape:
                raise ModelError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = arrays[name].astype(self.dtype).copy()
            p.zero_grad()

    def with_config(self, **changes) -> MoDDecoder:
        """A model sharing (copies of) these weights under a different config."""
        other = MoDDecoder(self.config.replace(**changes))
        other.load_state({k: p.data for k, p in self.params.items()})
        return other

    def save(self, path) -> None:
        os.makedirs(path, exist_ok=True)
        meta = {"nonlinearity": self.config.nonlinearity, "gate_activation": self.config.gate_activation,
                "dtype": self.config.dtype}
        nx.save_checkpoint(path, self.parameters(), meta)
        with open(os.path.join(path, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.config.dumps())

    @classmethod
    def load(cls, path) -> MoDDecoder:
        cfg_path = os.path.join(path, "config.txt")
        if not os.path.exists(cfg_path):
            raise FileNotFoundError(f"no checkpoint config at {path}")
        with open(cfg_path, encoding="utf-8") as fh:
            config = ModelConfig.loads(fh.read())
        arrays, _ = nx.load_checkpoint(path)
        model = cls(config)
        model.load_state(arrays)
        return model

    # -- building blocks --------------------------------------------------

    def _p(self, layer: int, name: str) -> nx.Parameter:
        return self.params[f"layer{layer}.{name}"]

    def _embed(self, ids, positions) -> nx.Tensor:
        return nx.add(nx.embedding(self.params["tok_emb"], ids),
                      nx.embedding(self.params["pos_emb"], positions))

    def _block(self, layer: int, xc: nx.Tensor, k_past: np.ndarray | None = None,
               v_past: np.ndarray | None = None) -> tuple[nx.Tensor, nx.Tensor, nx.Tensor]:
        """Attention + FFN residual delta ``f`` for the rows of ``xc``.

        Returns ``(f, k, v)`` where ``k``/``v`` are the new rows' projections.
        Rows attend causally to ``k_past``/``v_past`` and to earlier rows of ``xc``.
        """
        c = self.config
        n = xc.shape[0]
        a_in = nx.layer_norm(xc, self._p(layer, "ln1_g"), self._p(layer, "ln1_b"))
        q = nx.matmul(a_in, self._p(layer, "wq"))
        k = nx.matmul(a_in, self._p(layer, "wk"))
        v = nx.matmul(a_in, self._p(layer, "wv"))
        n_past = 0 if k_past is None else k_past.shape[0]
        if n_past:
            K = nx.constant(np.concatenate([k_past, k.data]))
            Vv = nx.constant(np.concatenate([v_past, v.data]))
        else:
            K, Vv = k, v
        mask = np.arange(n_past + n)[None, :] <= (n_past + np.arange(n))[:, None]
        dh = c.d // c.heads
        inv = 1.0 / math.sqrt(dh)
        heads = []
        for h in range(c.heads):
            lo, hi = h * dh, (h + 1) * dh
            s = nx.scale(nx.matmul(nx.slice_cols(q, lo, hi), nx.transpose(nx.slice_cols(K, lo, hi))), inv)
            heads.append(nx.matmul(nx.softmax_rows(s, mask), nx.slice_cols(Vv, lo, hi)))
        attn = nx.matmul(nx.concat_cols(heads) if len(heads) > 1 else heads[0], self._p(layer, "wo"))
        h1 = nx.add(xc, attn)
        a2 = nx.layer_norm(h1, self._p(layer, "ln2_g"), self._p(layer, "ln2_b"))
        act = nx.gelu if c.nonlinearity == "gelu" else nx.relu
        hid = act(nx.add(nx.matmul(a2, self._p(layer, "w1")), self._p(layer, "b1")))
        ffn = nx.add(nx.matmul(hid, self._p(layer, "w2")), self._p(layer, "b2"))
        return nx.add(attn, ffn), k, v

    def _route_frames(self, layer: int, x: nx.Tensor, frames: list[tuple[int, range, int]],
                      r: float):
        """Decide kept vision tokens for each frame of ``x``.

        ``frames`` holds ``(frame id, row range, frame ordinal)``. Returns the
        decisions, the kept row indices and, for learnable gating, the score
        tensor together with each kept row's offset into it.
        """
        c = self.config
        decisions: list[RouterDecision] = []
        kept_rows: list[np.ndarray] = []
        if not frames:
            return decisions, np.zeros(0, np.int64), None, None
        vis_rows = np.concatenate([np.arange(rg.start, rg.stop) for _, rg, _ in frames])
        mu = None
        if c.keep_strategy == "learnable":
            mu = score_tokens(nx.gather_rows(x, vis_rows), self._p(layer, "w_theta"))
        offset = 0
        kept_offsets = []
        for fid, rg, ordinal in frames:
            V = len(rg)
            if mu is not None:
                scores = mu.data[offset:offset + V]
            else:
                scores = override_scores(c.keep_strategy, V, r, seed=c.seed, layer=layer, frame=ordinal)
            dec = select_topk(scores, r, frame=ordinal, layer=layer)
            decisions.append(dec)
            kept_rows.append(rg.start + dec.kept)
            kept_offsets.append(offset + dec.kept)
            offset += V
        return decisions, np.concatenate(kept_rows), mu, np.concatenate(kept_offsets)

    def _layer(self, layer: int, x: nx.Tensor, text_rows: np.ndarray,
               frames: list[tuple[int, range, int]], k_past=None, v_past=None):
        """Run one layer over rows of ``x``; returns (new x, decisions, processed rows, k, v)."""
        kind = self.schedule[layer]
        n = x.shape[0]
        decisions: list[RouterDecision] = []
        if kind.kind == "vanilla":
            f, k, v = self._block(layer, x, k_past, v_past)
            return nx.add(x, f), decisions, np.arange(n), k, v

        mu = kept_offsets = None
        kept_vis = np.zeros(0, np.int64)
        if kind.kind == "mod":
            decisions, kept_vis, mu, kept_offsets = self._route_frames(layer, x, frames, kind.r)
        rows = np.sort(np.concatenate([text_rows, kept_vis]).astype(np.int64))
        if rows.size == 0:
            return x, decisions, rows, None, None
        xc = nx.gather_rows(x, rows)
        f, k, v = self._block(layer, xc, k_past, v_past)
        c = self.config
        if kind.kind == "mod" and mu is not None and c.scale_mode == "gated" and kept_vis.size:
            slot = np.searchsorted(rows, kept_vis)
            base = np.ones(rows.size, dtype=self.dtype)
            base[slot] = 0
            g = gate(nx.gather_rows(mu, kept_offsets), c.gate_activation)
            f = nx.scale_rows(f, nx.add(nx.constant(base), nx.scatter_rows(g, slot, rows.size)))
        return nx.add(x, nx.scatter_rows(f, rows, n)), decisions, rows, k, v

    def _head(self, x: nx.Tensor) -> nx.Tensor:
        h = nx.layer_norm(x, self.params["lnf_g"], self.params["lnf_b"])
        return nx.matmul(h, self.params["head"])

    # -- full-sequence forward --------------------------------------------

    def forward_full(self, seq: InterleavedSequence) -> tuple[nx.Tensor, dict[int, list[RouterDecision]]]:
        """Logits for every position plus per-layer routing decisions."""
        N = len(seq)
        if N == 0:
            raise ModelError("empty sequence")
        if N > self.config.max_positions:
            raise ModelError(f"sequence of {N} tokens exceeds max_positions={self.config.max_positions}")
        frames = [(fid, rg, i) for i, (fid, rg) in enumerate(flatten_frames(seq))]
        text_rows = np.flatnonzero(~seq.is_vision)
        x = self._embed(seq.token_ids, seq.positions)
        decisions: dict[int, list[RouterDecision]] = {}
        for layer in range(self.config.L):
            x, dec, *_ = self._layer(layer, x, text_rows, frames)
            if self.schedule[layer].kind == "mod":
                decisions[layer] = dec
        return self._head(x), decisions

    # -- streaming --------------------------------------------------------

    def new_cache(self) -> KVCacheState:
        return KVCacheState.empty(self.config)

    def forward_stream_step(self, tokens, cache: KVCacheState, is_frame: bool):
        """Consume one frame (``V`` tokens) or text tokens; returns ``(logits, cache)``.

        Routing of a new frame depends on that frame's hidden states only.
        """
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        n = tokens.size
        if n == 0:
            raise ModelError("nothing to consume")
        if is_frame and n != c.V:
            raise ModelError(f"a frame has {c.V} tokens, got {n}")
        if len(cache.counts) != c.L:
            raise ModelError("cache was built for a different layer count")
        p0 = cache.next_position
        if p0 + n > c.max_positions:
            raise ModelError(f"stream exceeds max_positions={c.max_positions}")
        positions = np.arange(p0, p0 + n)
        if is_frame:
            frames = [(cache.frames_consumed, range(0, n), cache.frames_consumed)]
            text_rows = np.zeros(0, np.int64)
        else:
            frames = []
            text_rows = np.arange(n)
        step_decisions: list[RouterDecision] = []
        with nx.no_grad():
            x = self._embed(tokens, positions)
            for layer in range(c.L):
                x, dec, rows, k, v = self._layer(layer, x, text_rows, frames,
                                                 cache.layer_keys(layer), cache.layer_values(layer))
                step_decisions.extend(dec)
                if rows.size:
                    cache.append(layer, k.data, v.data, positions[rows])
            logits = self._head(x).data
        cache.next_position = p0 + n
        if is_frame:
            cache.frames_consumed += 1
        cache.last_logits = logits[-1]
        cache.decisions.extend(step_decisions)
        return logits, cache

    def generate_response(self, cache: KVCacheState, max_len: int) -> Response:
        """Greedy decoding after a frame; silent if EOS wins at the frame end."""
        if cache.last_logits is None:
            raise ModelError("generate_response needs a consumed frame")
        nxt = int(np.argmax(cache.last_logits))
        if nxt == EOS_ID:
            return Response([])
        out: list[int] = []
        truncated = False
        while nxt not in (EOS_ID, EOR_ID):
            if len(out) >= max_len or cache.next_position + 1 >= self.config.max_positions:
                truncated = True
                break
            out.append(nxt)
            logits, _ = self.forward_stream_step([nxt], cache, is_frame=False)
            nxt = int(np.argmax(logits[-1]))
        if out and cache.next_position < self.config.max_positions:
            self.forward_stream_step([EOR_ID], cache, is_frame=False)
        return Response(out, truncated)

