import csv
import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modstream.costmodel import (CostConfig, CostError, all_vanilla, cache_report, decoder_flops, layer_flops,
                                 paper_scale, sweep_csv)
from modstream.model import ModelConfig, build_layer_schedule


@pytest.mark.parametrize("r,n_v,expected", [(0.5, 8, 1056), (1.0, 8, 2080), (0.0, 8, 288), (1.0, 0, 288)])
def test_layer_flops_by_hand(r, n_v, expected):
    assert layer_flops(2, n_v, r, 4, 8) == expected


def toy(insertion, **kw):
    mc = ModelConfig(L=4, d=8, heads=2, m=16, vocab=8, V=10, insertion=insertion, r=kw.pop("r", 0.2),
                     max_positions=8, **kw)
    return CostConfig.from_model(mc, n_t=20, n_v=400)


def test_all_vanilla_ratio_is_one():
    rep = decoder_flops(toy("full"))
    assert rep.ratio_vs_full == 1.0
    assert rep.total == 4 * layer_flops(20, 400, 1.0, 8, 16)


def test_paper_scale_flops_ratio():
    rep = decoder_flops(paper_scale())
    d, m = 4096, 14336

    def f(n):
        return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m

    oracle = (16 * f(6100) + 16 * f(100 + 0.2 * 6000)) / (32 * f(6100))
    assert rep.ratio_vs_full == pytest.approx(oracle, rel=1e-12)
    assert 0.55 <= rep.ratio_vs_full <= 0.65


def test_layer_skip_is_about_half():
    cfg = paper_scale("layer_skip")
    rep = decoder_flops(cfg)
    remainder = layer_flops(100, 6000, 0.0, 4096, 14336) / layer_flops(100, 6000, 1.0, 4096, 14336) / 2
    assert rep.ratio_vs_full == pytest.approx(0.5 + remainder, rel=1e-12)
    assert 0.5 < rep.ratio_vs_full < 0.51


def test_early_exit_is_cheapest_among_baselines():
    ratios = {ins: decoder_flops(toy(ins)).ratio_vs_full
              for ins in ("full", "interleaved", "layer_skip", "early_exit")}
    assert ratios["early_exit"] == min(ratios.values())  # ties with layer_skip when L=4, E=2
    assert ratios["full"] == 1.0


@settings(max_examples=100, deadline=None)
@given(r1=st.floats(0.01, 1.0), r2=st.floats(0.01, 1.0), ins=st.sampled_from(["interleaved", "all", "all_deep"]))
def test_flops_monotone_in_keep_ratio(r1, r2, ins):
    lo, hi = sorted((r1, r2))
    assert decoder_flops(toy(ins, r=lo)).total <= decoder_flops(toy(ins, r=hi)).total


def test_ratio_falls_as_frames_grow():
    ratios = [decoder_flops(paper_scale(frames=f)).ratio_vs_full for f in (10, 100, 600, 2000)]
    assert ratios == sorted(ratios, reverse=True)


def test_explicit_ratios_reduce_to_layer_skip():
    a = decoder_flops(toy("layer_skip"))
    b = decoder_flops(toy("interleaved", layer_ratios=(1.0, 0.0, 1.0, 0.0)))
    assert a.total == b.total


def test_flops_csv():
    rows = list(csv.reader(io.StringIO(decoder_flops(toy("interleaved")).to_csv())))
    assert rows[0] == ["layer", "kind", "effective_r", "flops"]
    assert [r[1] for r in rows[1:5]] == ["vanilla", "mod", "vanilla", "mod"]
    assert rows[-1][0] == "total"


def test_cache_all_vanilla():
    rep = cache_report(toy("full"), T=50, V=10, budget=1e6)
    assert rep.context_multiplier == 1.0
    assert rep.entries_per_frame == [10.5] * 4


def test_cache_interleaved_closed_form():
    # negligible language tokens: per-frame cache shrinks to (1 + 0.2) / 2 of full
    cfg = paper_scale(n_t=0)
    rep = cache_report(cfg, T=600, V=10, budget=1e12)
    assert rep.asymptotic_multiplier == pytest.approx(2 / 1.2, rel=1e-12)
    assert rep.context_multiplier == pytest.approx(2 / 1.2, rel=1e-3)


def test_cache_paper_scale_multiplier():
    cfg = paper_scale()
    rep = cache_report(cfg, T=600, V=10, budget=80e9)
    lang = 100 / 600
    oracle = (10 + lang) / ((10 + lang + 2 + lang) / 2)
    assert rep.asymptotic_multiplier == pytest.approx(oracle, rel=1e-12)
    assert 1.6 <= rep.context_multiplier <= 1.8
    assert rep.total_bytes == pytest.approx(600 * rep.bytes_per_frame)
    assert rep.bytes_per_frame_full == pytest.approx(32 * (10 + lang) * 2 * 4096 * 2)


def test_cache_errors():
    with pytest.raises(CostError):
        cache_report(toy("full"), T=1, V=10, budget=10)
    with pytest.raises(CostError):
        cache_report(toy("full"), T=-1, V=10, budget=1e6)


def test_cost_config_validation():
    sched = build_layer_schedule(ModelConfig(L=2, max_positions=8))
    with pytest.raises(CostError):
        CostConfig(L=3, d=4, m=4, heads=1, n_t=1, n_v=1, schedule=sched, r=0.2, bytes_per_entry=8)
    with pytest.raises(CostError):
        CostConfig(L=2, d=4, m=4, heads=1, n_t=1, n_v=1, schedule=sched, r=0.0, bytes_per_entry=8)
    assert len(all_vanilla(3)) == 3


def test_sweep_csv():
    vals = [0.1, 0.2]
    reps = [decoder_flops(toy("interleaved", r=r)) for r in vals]
    text = sweep_csv("r", vals, reps, "ratio_vs_full")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["r", "ratio_vs_full"] and len(rows) == 3
    assert float(rows[1][1]) < float(rows[2][1])
