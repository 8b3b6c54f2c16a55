"""Analytic compute and memory of routed decoders at an 8B-parameter scale.

Prints CSV to stdout; pipe it into any plotting tool.
"""

from modstream.costmodel import cache_report, decoder_flops, paper_scale

# 600 frames of 10 tokens, 100 text tokens, every other layer routed at r = 0.2
cfg = paper_scale()
flops = decoder_flops(cfg)
cache = cache_report(cfg, T=600, V=10, budget=80e9)
print(f"# FLOPs vs full: {flops.ratio_vs_full:.4f}")
print(f"# frames that fit in 80 GB of cache: {cache.max_frames} vs {cache.max_frames_full} without routing")

# Keep ratio sweep
print("r,flops_ratio,context_multiplier")
for r in (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0):
    c = paper_scale(r=r)
    print(f"{r},{decoder_flops(c).ratio_vs_full:.4f},{cache_report(c, 600, 10, 80e9).context_multiplier:.4f}")

# Longer videos make the vision term dominate, so the saving grows
print("frames,flops_ratio")
for frames in (10, 50, 100, 300, 600, 1200, 2400):
    print(f"{frames},{decoder_flops(paper_scale(frames=frames)).ratio_vs_full:.4f}")

# Insertion strategies at r = 0.2
print("insertion,flops_ratio")
for ins in ("full", "all", "all_deep", "interleaved", "interleaved_deep", "layer_skip", "early_exit"):
    print(f"{ins},{decoder_flops(paper_scale(ins)).ratio_vs_full:.4f}")
