"""Desk-scale CTC recognizer with optimal-transport cross-modal transfer.

Subpackage map:

    autodiff   reverse-mode engine over dense 2-D float64 arrays
    ot         cosine cost, Sinkhorn solver, projection, alignment loss
    ctc        CTC loss (graph-expressed), greedy decoding, CER
    encoders   student conformer, frozen teacher, adapter, heads, checkpoints
    synthdata  deterministic synthetic paired corpus + character tokenizer
    training   composite loss, Adam + warmup schedule, loop, averaging
    config     flat key=value run configuration
    cli        gen-data / train / eval / sinkhorn / ablate subcommands
"""

__version__ = "0.1.0"
