"""Walk one synthetic stream through a routed decoder and look at what it keeps."""

import numpy as np

from modstream.harness import SyntheticTaskConfig, generate_stream
from modstream.model import ModelConfig, MoDDecoder, build_layer_schedule
from modstream.router import keep_count
from modstream.sequence import Frame, canonical_order, interleave

# A short stream: 12 frames of 10 tokens, the last token of each frame is the frame marker.
task = SyntheticTaskConfig(duration=12, event_prob=0.3)
sample, truth = generate_stream(task, seed=4)
print("events (onset frame, id):", truth.events)
print("frame 0 tokens:", sample.frames[0].tokens)

seq = interleave(sample, task.V, vocab_size=task.vocab_size)
print("sequence length", len(seq), "of which vision", int(seq.is_vision.sum()))

# Every other layer routes; the others see every token.
config = ModelConfig(L=4, d=32, heads=4, m=64, vocab=task.vocab_size, V=task.V, r=0.2, max_positions=256)
print("schedule:", [str(k) for k in build_layer_schedule(config)])
print("tokens kept per frame at r=0.2:", keep_count(0.2, task.V))

# Routers start at zero, so every score ties and the lowest slots win.
# Give them random weights to see a less degenerate picture.
model = MoDDecoder(config, seed=0)
rng = np.random.default_rng(0)
for name, p in model.params.items():
    if name.endswith("w_theta"):
        p.data = rng.normal(0, 1, p.shape).astype(p.dtype)

logits, decisions = model.forward_full(seq)
for layer, ds in decisions.items():
    print(f"layer {layer}: kept slots of first three frames", [d.kept.tolist() for d in ds[:3]])

# Same stream, one step at a time. The cache only stores what each layer processed.
cache = model.new_cache()
for ev in canonical_order(sample.frames, sample.spans):
    if isinstance(ev, Frame):
        model.forward_stream_step(ev.tokens, cache, is_frame=True)
    else:
        for t in ev.tokens:
            model.forward_stream_step([t], cache, is_frame=False)
print("cache entries per layer:", [cache.entries(l) for l in range(config.L)])

text_tokens = int((~seq.is_vision).sum())
print("expected:", [len(seq), 12 * 2 + text_tokens, len(seq), 12 * 2 + text_tokens])
