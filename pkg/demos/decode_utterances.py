"""Train a small model for a couple of minutes and decode a few test clips.

    python3 demos/decode_utterances.py [steps]
"""

import sys

import numpy as np

from avcompress.avqformer import QFormerConfig
from avcompress.decoder import DecoderConfig, Vocabulary, beam_search, wer
from avcompress.features import LoadedUtterance, SynthesisConfig, SyntheticWorld, synthesize_utterance
from avcompress.numkernel import LrSchedule, no_grad
from avcompress.pipeline import AVSRModel, BatchOptions, ModelConfig, TrainConfig, make_batch, train_pipeline

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
syn = SynthesisConfig()
world = SyntheticWorld.from_config(syn)


def clips(split, n):
    return [LoadedUtterance(*synthesize_utterance(syn, world, split, i)) for i in range(n)]


train, test = clips("train", 1000), clips("test", 8)
vocab = Vocabulary(syn.symbols())
cfg = ModelConfig(f_q=4, qformer=QFormerConfig(2, 64, 4, 256, 64), decoder=DecoderConfig(2, 64, 4, 256))
model = AVSRModel(cfg, vocab, np.random.default_rng(0)).astype(np.float32)
schedule = LrSchedule(2e-3, 200, steps, 1e-4, 0.05)


def show(entry):
    if entry.step % 250 == 0:
        print(f"step {entry.step:5d}  loss {entry.loss:.3f}")


train_pipeline(model, train, TrainConfig(steps, 16, schedule, jitter_sigma=1.0), on_log=show)

for snr in (float("inf"), -5.0):
    batch = make_batch(model, test, np.random.default_rng(1), BatchOptions(snr_db=snr))
    with no_grad():
        mm = model.multimodal_tokens(batch).data
    print(f"\nSNR {snr:g} dB")
    for b, ref in enumerate(batch.references):
        hyp = vocab.decode(beam_search(model.decoder, vocab, mm[b, : batch.n_alloc[b]]).tokens)
        print(f"  {batch.n_alloc[b]:2d} queries  wer {wer(ref, hyp):.2f}  ref {' '.join(ref)}  hyp {' '.join(hyp)}")
