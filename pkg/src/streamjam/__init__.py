"""Streaming accompaniment over discrete token grids.

A complete desk-scale pipeline for studying chunked accompaniment
prediction: a synthetic multi-track corpus with known latent structure,
delay-pattern token grids, a from-scratch transformer trained over a
(t_f, k) design space of future visibility and chunk size, streamed
chunked decoding, a simulated real-time scheduler, and latent-state
evaluation metrics with chance floors.
"""

from .decoding import (
    MlmDecodeConfig,
    SampleConfig,
    mlm_generate,
    stream_generate,
    stream_generate_batch,
)
from .estimator import StreamingAccompanist
from .grids import FRAME_RATE, DelayedGrid, TokenGrid, apply_delay, read_grid, undo_delay, write_grid
from .metrics import EvalReport, beat_f1, bigram_jsd, chance_floors, coherence, run_eval
from .model import Model, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .sched import LatencyProfile, feasible, simulate, sweep_feasibility, underrun_rate_closed_form
from .streams import StreamSpec, align
from .synth import Corpus, SynthConfig, generate_song, load_corpus, mix_stems, write_corpus
from .training import TrainConfig, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "FRAME_RATE",
    "Corpus",
    "DelayedGrid",
    "EvalReport",
    "LatencyProfile",
    "MlmDecodeConfig",
    "Model",
    "ModelConfig",
    "SampleConfig",
    "StreamSpec",
    "StreamingAccompanist",
    "SynthConfig",
    "TokenGrid",
    "TrainConfig",
    "align",
    "apply_delay",
    "beat_f1",
    "bigram_jsd",
    "chance_floors",
    "coherence",
    "feasible",
    "generate_song",
    "init_params",
    "load_checkpoint",
    "load_corpus",
    "mix_stems",
    "lr_at",
    "mlm_generate",
    "read_grid",
    "run_eval",
    "save_checkpoint",
    "simulate",
    "stream_generate",
    "stream_generate_batch",
    "sweep_feasibility",
    "train",
    "underrun_rate_closed_form",
    "undo_delay",
    "write_corpus",
    "write_grid",
    "__version__",
]
