"""``modstream`` command line: data, training, evaluation, cost reports, checks."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys

import numpy as np

from . import numerics as nx
from ._flat import ConfigError
from .config import OUT_ENV, RunConfig, resolve, run_dir
from .costmodel import CostConfig, cache_report, decoder_flops, paper_scale, sweep_csv
from .harness import (default_baselines, eval_set, eval_streaming, eval_teacher_forced, generate_stream, log_csv,
                      rows_csv, run_baseline_suite, stream_data, train)
from .model import ModelConfig, MoDDecoder
from .objective import streaming_loss
from .router import write_decisions
from .sequence import EOR_ID, Frame, StreamSample, TextSpan, canonical_order, interleave, write_samples

FIELDS = [f.name for f in dataclasses.fields(RunConfig)]


class CommandError(RuntimeError):
    pass


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _prepare(cfg: RunConfig, command: str, extra: str = "") -> str:
    out = run_dir(cfg, command, extra)
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "config.txt"), cfg.dumps())
    return out


def _metrics_csv(row: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(row))
    w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row.values()])
    return buf.getvalue()


def _load_model(path: str | None) -> MoDDecoder:
    if path is None:
        raise CommandError("--checkpoint is required")
    try:
        return MoDDecoder.load(path)
    except FileNotFoundError as exc:
        raise CommandError(f"missing checkpoint: {exc}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CommandError(f"not a comma-separated list of numbers: {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, args) -> str:
    out = _prepare(cfg, "gen-data", f"n={args.n}")
    task = cfg.task_config()
    pairs = [generate_stream(task, seed=[cfg.seed, i]) for i in range(args.n)]
    write_samples(os.path.join(out, "samples.jsonl"), [p[0] for p in pairs])
    lines = [json.dumps({"events": t.events, "signal_slots": t.signal_slots}, separators=(",", ":"))
             for _, t in pairs]
    _write(os.path.join(out, "truth.jsonl"), "".join(line + "\n" for line in lines))
    print(f"wrote {args.n} samples to {out}")
    return out


def cmd_train(cfg: RunConfig, args) -> str:
    steps = cfg.steps if args.steps is None else args.steps
    cfg = cfg.replace(steps=steps)
    out = _prepare(cfg, "train")
    model = MoDDecoder(cfg.model_config())
    routing_path = os.path.join(out, "routing.jsonl")
    if os.path.exists(routing_path):
        os.remove(routing_path)

    def hook(step, decisions, seq):
        if cfg.routing_every and step % cfg.routing_every == 0:
            write_decisions(routing_path, [d for layer in sorted(decisions) for d in decisions[layer]], step)

    rows = train(model, stream_data(cfg.task_config(), cfg.seed), steps, cfg.optimizer(), sigma=cfg.sigma,
                 augmentation=cfg.augmentation(), normalization=cfg.normalization, on_step=hook)
    _write(os.path.join(out, "train_log.csv"), log_csv(rows))
    model.save(os.path.join(out, "checkpoint"))
    last = f"final loss {rows[-1].total:.4f}" if rows else "no steps taken"
    print(f"trained {steps} steps, {last}; run directory {out}")
    return out


def cmd_eval_tf(cfg: RunConfig, args) -> str:
    model = _load_model(args.checkpoint)
    out = _prepare(cfg, "eval-tf", os.path.abspath(args.checkpoint))
    samples, _ = eval_set(cfg.task_config(), cfg.n_eval, cfg.seed)
    ppl, acc = eval_teacher_forced(model, samples)
    _write(os.path.join(out, "metrics.csv"), _metrics_csv({"lm_ppl": ppl, "lm_correctness": acc}))
    print(f"lm_ppl = {ppl}\nlm_correctness = {acc}")
    return out


def cmd_eval_stream(cfg: RunConfig, args) -> str:
    model = _load_model(args.checkpoint)
    out = _prepare(cfg, "eval-stream", os.path.abspath(args.checkpoint))
    task = cfg.task_config()
    samples, truths = eval_set(task, cfg.n_eval, cfg.seed)
    decisions: list = []
    rep = eval_streaming(model, samples, truths, window=cfg.window, task=task, record=decisions)
    path = os.path.join(out, "routing.jsonl")
    if os.path.exists(path):
        os.remove(path)
    write_decisions(path, decisions, step=-1)
    row = {"time_diff": rep.time_diff, "fluency": rep.fluency, "router_precision": rep.router_precision,
           "chance_precision": rep.chance_precision}
    _write(os.path.join(out, "metrics.csv"), _metrics_csv(row))
    print("\n".join(f"{k} = {v}" for k, v in row.items()))
    return out


def _cost_config(cfg: RunConfig, args, insertion: str, r: float) -> CostConfig:
    if args.paper_scale:
        return paper_scale(insertion, r, frames=args.frames or 600, V=cfg.V,
                           n_t=100 if args.n_t is None else args.n_t)
    mc = cfg.model_config().replace(insertion=insertion, r=r)
    frames = args.frames or cfg.duration
    n_t = args.n_t
    if n_t is None:
        n_t = round(cfg.event_prob * frames * (cfg.response_len + 1))
    return CostConfig.from_model(mc, n_t=n_t, n_v=frames * cfg.V)


def _cost_extra(args) -> str:
    return json.dumps({k: getattr(args, k, None) for k in ("paper_scale", "frames", "n_t", "sweep", "budget")},
                      sort_keys=True)


def cmd_flops(cfg: RunConfig, args) -> str:
    out = _prepare(cfg, "flops", _cost_extra(args))
    rep = decoder_flops(_cost_config(cfg, args, cfg.insertion, cfg.r))
    _write(os.path.join(out, "flops.csv"), rep.to_csv())
    print(f"flops_ratio = {rep.ratio_vs_full:.4f}")
    if args.sweep:
        rs = _floats(args.sweep)
        reps = [decoder_flops(_cost_config(cfg, args, cfg.insertion, r)) for r in rs]
        _write(os.path.join(out, "flops_sweep.csv"), sweep_csv("r", rs, reps, "ratio_vs_full"))
        for r, x in zip(rs, reps):
            print(f"r = {r}: flops_ratio = {x.ratio_vs_full:.4f}")
    return out


def cmd_cache(cfg: RunConfig, args) -> str:
    out = _prepare(cfg, "cache", _cost_extra(args))
    V = cfg.V

    def report(r):
        cost = _cost_config(cfg, args, cfg.insertion, r)
        frames = cost.n_v // V
        budget = args.budget if args.budget is not None else 1000 * frames * cost.L * V * cost.bytes_per_entry
        return cache_report(cost, frames, V, budget)

    rep = report(cfg.r)
    _write(os.path.join(out, "cache.csv"), rep.to_csv())
    print(f"context_multiplier = {rep.context_multiplier:.4f}\nasymptotic_multiplier = {rep.asymptotic_multiplier:.4f}")
    if args.sweep:
        rs = _floats(args.sweep)
        reps = [report(r) for r in rs]
        _write(os.path.join(out, "cache_sweep.csv"), sweep_csv("r", rs, reps, "context_multiplier"))
        for r, x in zip(rs, reps):
            print(f"r = {r}: context_multiplier = {x.context_multiplier:.4f}")
    return out


def gradcheck_report(cfg: RunConfig, seed: int) -> nx.GradCheckReport:
    """Finite-difference check of a tiny float64 decoder built from ``cfg``'s layer choices.

    Weights and routers are drawn at a scale where top-k selections are
    well separated, so the perturbations never flip a routing decision.
    """
    rng = np.random.default_rng(seed)
    mc = ModelConfig(L=2, d=8, heads=2, m=16, vocab=12, V=5, insertion=cfg.insertion, r=0.4, max_positions=32,
                     early_exit=1, gate_activation=cfg.gate_activation, scale_mode=cfg.scale_mode,
                     nonlinearity=cfg.nonlinearity, dtype="float64", init_std=0.3, router_init_std=1.0, seed=seed)
    model = MoDDecoder(mc)
    frames = [Frame(t, tuple(int(x) for x in rng.integers(3, 12, 5))) for t in range(3)]
    spans = [TextSpan((int(rng.integers(3, 12)), EOR_ID), "response", 1)]
    seq = interleave(StreamSample(canonical_order(frames, spans), 3), 5, vocab_size=12)

    def loss():
        return streaming_loss(model.forward_full(seq)[0], seq, sigma=cfg.sigma).value

    return nx.check_gradients(loss, model.parameters())


def cmd_gradcheck(cfg: RunConfig, args) -> str:
    seed = cfg.seed if args.seed is None else args.seed
    cfg = cfg.replace(seed=seed)
    out = _prepare(cfg, "gradcheck")
    rep = gradcheck_report(cfg, seed)
    lines = ["parameter,max_rel_error"] + [f"{k},{v!r}" for k, v in rep.per_parameter.items()]
    _write(os.path.join(out, "gradcheck.csv"), "\n".join(lines) + "\n")
    print(f"max_rel_error = {rep.max_error:.3e}")
    if not rep.passed(1e-4):
        worst = max(rep.per_parameter, key=rep.per_parameter.get)
        raise CommandError(f"gradient check failed: {worst} has relative error {rep.per_parameter[worst]:.3e}")
    return out


def cmd_compare(cfg: RunConfig, args) -> str:
    steps = cfg.steps if args.steps is None else args.steps
    cfg = cfg.replace(steps=steps)
    out = _prepare(cfg, "compare", args.configs or "")
    configs = default_baselines(cfg.model_config())
    if args.configs:
        names = [n.strip() for n in args.configs.split(",") if n.strip()]
        unknown = [n for n in names if n not in configs]
        if unknown:
            raise CommandError(f"unknown baseline(s): {', '.join(unknown)}; choose from {', '.join(configs)}")
        configs = {n: configs[n] for n in names}
    rows = run_baseline_suite(cfg.task_config(), configs, steps, cfg.optimizer(), seed=cfg.seed,
                              n_eval=cfg.n_eval, sigma=cfg.sigma, window=cfg.window,
                              augmentation=cfg.augmentation())
    table = rows_csv(rows)
    _write(os.path.join(out, "metrics.csv"), table)
    sys.stdout.write(table)
    return out


COMMANDS = {
    "gen-data": (cmd_gen_data, "write synthetic stream samples and their ground truth"),
    "train": (cmd_train, "train a decoder and save a checkpoint"),
    "eval-tf": (cmd_eval_tf, "teacher-forced perplexity and correctness"),
    "eval-stream": (cmd_eval_stream, "free-running streaming metrics and routing records"),
    "flops": (cmd_flops, "analytic FLOPs report"),
    "cache": (cmd_cache, "analytic KV-cache report"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient check of a tiny decoder"),
    "compare": (cmd_compare, "train and evaluate the baseline configurations"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modstream", description=__doc__,
                                     epilog=f"The {OUT_ENV} environment variable overrides out_dir.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        for field in FIELDS:
            if name == "train" and field == "steps" or name == "compare" and field == "steps":
                continue
            if name == "gradcheck" and field == "seed":
                continue
            flags = [f"--{field}"]
            if "_" in field:
                flags.append(f"--{field.replace('_', '-')}")
            if field == "insertion":
                flags.append("--schedule")
            p.add_argument(*flags, dest=f"cfg_{field}", default=None, metavar="VALUE", help=argparse.SUPPRESS)
        if name in ("train", "compare"):
            p.add_argument("--steps", type=int)
        if name in ("eval-tf", "eval-stream"):
            p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
        if name == "gen-data":
            p.add_argument("--n", type=int, default=8, help="number of samples")
        if name in ("flops", "cache"):
            p.add_argument("--paper-scale", action="store_true", help="8B-parameter decoder, 600 frames")
            p.add_argument("--frames", type=int, help="frames in the stream")
            p.add_argument("--n-t", type=int, help="language tokens in the stream")
            p.add_argument("--sweep", help="comma-separated keep ratios")
        if name == "cache":
            p.add_argument("--budget", type=float, help="cache budget in bytes")
        if name == "gradcheck":
            p.add_argument("--seed", type=int)
        if name == "compare":
            p.add_argument("--configs", help="comma-separated subset of baselines")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = COMMANDS[args.command][0]
    overrides = {}
    for item in args.set:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for field in FIELDS:
        v = getattr(args, f"cfg_{field}", None)
        if v is not None:
            overrides[field] = v
    try:
        cfg = resolve(args.config, overrides)
        func(cfg, args)
    except (ConfigError, CommandError, FileNotFoundError, ValueError, nx.NumericsError, FloatingPointError) as exc:
        print(f"modstream {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
