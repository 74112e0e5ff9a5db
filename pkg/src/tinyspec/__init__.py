"""tinyspec: desk-scale noise-injected SFT and lossless speculative decoding.

A byte-level decoder-only transformer small enough to train on a laptop CPU,
trained to stay on track when its visible context is partially corrupted,
plus a family of greedy decoding strategies (Jacobi blocks, retrieval drafts,
draft trees) that exploit that robustness to commit several tokens per
forward pass without changing the output.
"""

from .data import BOS, EOS, PAD, VOCAB_SIZE, Corpus, SftSample, gen_synthetic, tokenize, detokenize
from .model import ModelConfig, TransformerWeights, init_weights
from .noising import NoiseConfig, TrainConfig, train
from .decode import generate, STRATEGIES

__version__ = "0.1.0"
