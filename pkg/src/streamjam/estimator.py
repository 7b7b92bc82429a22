"""Estimator-style facade over corpus -> train -> generate -> score.

StreamingAccompanist follows the scikit-learn conventions: flat constructor
hyperparameters stored verbatim (so get_params/set_params/clone work), fit
on a corpus, predict on input token grids. The subsystems it wraps stay
usable directly; this class just packages the common path.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .decoding import SampleConfig, stream_generate_batch
from .grids import TokenGrid
from .metrics import run_eval
from .model import Model, ModelConfig, init_params
from .streams import StreamSpec
from .synth import Corpus, INSTRUMENTS
from .training import TrainConfig, train


class StreamingAccompanist(BaseEstimator):
    """Streaming accompaniment model with a (t_f, k) operating point.

    t_f and k are in frames (50 per second): t_f > 0 waits for future
    input, t_f < 0 commits output ahead of the input, k is how many frames
    each decode call emits.
    """

    def __init__(
        self,
        t_f: int = 0,
        k: int = 1,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        n_kv_heads: int = 2,
        d_dac: int = 16,
        ffn_mult: int = 4,
        objective: str = "stream",
        total_steps: int = 600,
        warmup_steps: int = 200,
        peak_lr: float = 1e-4,
        floor_lr: float = 1e-5,
        batch_size: int = 16,
        window_frames: int = 320,
        input_dropout: float = 0.0,
        temperature: float = 1.0,
        top_k: int = 64,
        dtype: str = "float32",
        seed: int = 0,
    ):
        self.t_f = t_f
        self.k = k
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.n_kv_heads = n_kv_heads
        self.d_dac = d_dac
        self.ffn_mult = ffn_mult
        self.objective = objective
        self.total_steps = total_steps
        self.warmup_steps = warmup_steps
        self.peak_lr = peak_lr
        self.floor_lr = floor_lr
        self.batch_size = batch_size
        self.window_frames = window_frames
        self.input_dropout = input_dropout
        self.temperature = temperature
        self.top_k = top_k
        self.dtype = dtype
        self.seed = seed

    # -- validation helpers -------------------------------------------------

    def _check_corpus(self, X) -> Corpus:
        if not isinstance(X, Corpus):
            raise TypeError(f"expected a Corpus, got {type(X).__name__}")
        if not X.songs:
            raise ValueError("corpus has no songs")
        return X

    def _check_is_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this StreamingAccompanist is not fitted yet; call fit first"
            )

    def _check_inputs(self, X) -> tuple:
        """Accepts a grid, a (grid, instrument) pair, or a list of either."""
        single = isinstance(X, TokenGrid) or (
            isinstance(X, tuple) and len(X) == 2 and isinstance(X[0], TokenGrid)
        )
        items = [X] if single else list(X)
        grids, instruments = [], []
        for item in items:
            grid, inst = item if isinstance(item, tuple) else (item, 0)
            if not isinstance(grid, TokenGrid):
                raise TypeError(f"expected TokenGrid inputs, got {type(grid).__name__}")
            if not 0 <= int(inst) < len(INSTRUMENTS):
                raise ValueError(f"instrument {inst} outside [0, {len(INSTRUMENTS)})")
            grids.append(grid)
            instruments.append(int(inst))
        if not grids:
            raise ValueError("no input streams")
        return grids, instruments, single

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y=None):
        """Train on a corpus's train split; y is ignored (self-supervised)."""
        corpus = self._check_corpus(X)
        spec = StreamSpec(t_f=self.t_f, k=self.k)
        mcfg = ModelConfig(
            vocab=corpus.config.vocab,
            n_q=corpus.config.n_q,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            n_kv_heads=self.n_kv_heads,
            d_dac=self.d_dac,
            ffn_mult=self.ffn_mult,
            n_instruments=len(INSTRUMENTS),
            causal=self.objective == "stream",
            dtype=self.dtype,
        )
        tcfg = TrainConfig(
            total_steps=self.total_steps,
            warmup_steps=self.warmup_steps,
            peak_lr=self.peak_lr,
            floor_lr=self.floor_lr,
            batch_size=self.batch_size,
            window_frames=self.window_frames,
            input_dropout=self.input_dropout,
            objective=self.objective,
            seed=self.seed,
        )
        model = Model(mcfg, init_params(mcfg, seed=self.seed))
        result = train(model, corpus, spec, tcfg)
        self.model_ = model
        self.spec_ = spec
        self.train_result_ = result
        self.n_chords_ = corpus.config.n_chords
        return self

    def predict(self, X, num_frames=None):
        """Generate accompaniment grids for input mix grids."""
        self._check_is_fitted()
        grids, instruments, single = self._check_inputs(X)
        cfg = SampleConfig(
            temperature=self.temperature, top_k=self.top_k, seed=self.seed
        )
        res = stream_generate_batch(
            self.model_, grids, instruments, self.spec_, cfg, num_frames=num_frames
        )
        return res.grids[0] if single else res.grids

    def score(self, X, y=None, n_examples: int = 32, variant: str = "paired"):
        """Mean harmonic coherence on the corpus's test split."""
        self._check_is_fitted()
        corpus = self._check_corpus(X)
        report = run_eval(
            self.model_,
            corpus,
            self.spec_,
            variant,
            n_examples=n_examples,
            window_frames=self.window_frames,
            seed=self.seed,
        )
        return report.coherence
