"""One flat run configuration covering model, task, augmentation and optimizer.

The file format is ``key = value`` per line with ``#`` comments; keys are the
field names of :class:`RunConfig`, and a file may list any subset of them.
Tuples are comma-separated and ``none`` clears an optional value.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass

from . import _flat
from ._flat import ConfigError
from .harness import OptimizerConfig, SyntheticTaskConfig
from .model import ModelConfig
from .objective import AugmentationConfig

OUT_ENV = "MODSTREAM_OUT"


@dataclass(frozen=True)
class RunConfig:
    # model
    L: int = 4
    d: int = 64
    heads: int = 4
    m: int = 256
    V: int = 10
    insertion: str = "interleaved"
    r: float = 0.2
    max_positions: int = 1024
    early_exit: int = 2
    gate_activation: str = "identity"
    scale_mode: str = "gated"
    keep_strategy: str = "learnable"
    layer_ratios: tuple[float, ...] | None = None
    nonlinearity: str = "gelu"
    dtype: str = "float32"
    init_std: float = 0.02
    router_init_std: float = 0.0
    # task
    patch_vocab: int = 64
    text_vocab: int = 64
    signal_positions: int = 2
    event_prob: float = 0.1
    response_len: int = 3
    duration: int = 64
    n_events: int = 8
    onset_marker: bool = True
    # augmentation
    shift_window: int = 0
    replace_prob: float = 0.0
    # optimisation
    steps: int = 1000
    lr: float = 2e-3
    decay: float = 0.99
    opt_eps: float = 1e-8
    sigma: float = 1.0
    normalization: str = "per_term"
    routing_every: int = 0  # write routing records every k training steps; 0 = never
    # evaluation
    n_eval: int = 8
    window: int = 5
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        # surface bad combinations at load time rather than mid-run
        self.task_config()
        self.model_config()
        self.augmentation()
        if self.steps < 0 or self.n_eval < 0 or self.window < 0 or self.routing_every < 0:
            raise ConfigError("steps, n_eval, window and routing_every must be non-negative")

    def task_config(self) -> SyntheticTaskConfig:
        return SyntheticTaskConfig(patch_vocab=self.patch_vocab, text_vocab=self.text_vocab, V=self.V,
                                   signal_positions=self.signal_positions, event_prob=self.event_prob,
                                   response_len=self.response_len, duration=self.duration,
                                   n_events=self.n_events, onset_marker=self.onset_marker,
                                   seed=self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(L=self.L, d=self.d, heads=self.heads, m=self.m, vocab=self.task_config().vocab_size,
                           V=self.V, insertion=self.insertion, r=self.r, max_positions=self.max_positions,
                           early_exit=self.early_exit, gate_activation=self.gate_activation,
                           scale_mode=self.scale_mode, keep_strategy=self.keep_strategy,
                           layer_ratios=self.layer_ratios, nonlinearity=self.nonlinearity, dtype=self.dtype,
                           init_std=self.init_std, router_init_std=self.router_init_std, seed=self.seed)

    def augmentation(self) -> AugmentationConfig | None:
        if self.replace_prob == 0:
            return None
        return AugmentationConfig(shift_window=self.shift_window, replace_prob=self.replace_prob, seed=self.seed)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, decay=self.decay, eps=self.opt_eps)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return _flat.dumps(self)

    def digest(self) -> str:
        """Hash of everything except the seed and where outputs go."""
        text = "".join(line for line in self.dumps().splitlines(keepends=True)
                       if not line.startswith(("seed ", "out_dir ")))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    @classmethod
    def loads(cls, text: str) -> RunConfig:
        return cls.from_values(_flat.parse(text))

    @classmethod
    def from_values(cls, values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
        base = base or cls()
        merged = {k: _flat.format_value(v) for k, v in dataclasses.asdict(base).items()}
        merged.update(values)
        try:
            return _flat.build(cls, merged)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def resolve(path: str | None, overrides: dict[str, str], env: dict[str, str] | None = None) -> RunConfig:
    """File values, then the output-directory variable, then explicit overrides."""
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(_flat.parse(fh.read()))
    if env.get(OUT_ENV):
        values["out_dir"] = env[OUT_ENV]
    values.update(overrides)
    return RunConfig.from_values(values)


def run_dir(cfg: RunConfig, command: str, extra: str = "") -> str:
    """``<out_dir>/<command>-<hash>-s<seed>``; ``extra`` folds command options into the hash."""
    digest = cfg.digest()
    if extra:
        digest = hashlib.sha256((digest + extra).encode()).hexdigest()[:12]
    return os.path.join(cfg.out_dir, f"{command}-{digest}-s{cfg.seed}")
