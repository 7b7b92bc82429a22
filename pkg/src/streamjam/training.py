"""Adam training loop with linear warmup and cosine decay.

One model is trained per (t_f, k) setting.  Runs with k=1 take the
full-sequence next-row loss; k>1 runs draw a variable prefix per example
and score only the k rows of the sampled chunk.  The masked objective
trains the same backbone without a causal mask: coarser levels are
revealed, finer levels are fully hidden, and a random fraction of one
level is masked and scored in place.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Model, save_checkpoint
from .nn import global_norm
from .streams import (
    StreamSpec,
    align,
    collate,
    mask_code,
    pad_code,
    sample_prefix_example,
    sentinel_code,
)
from .synth import Corpus, sample_pairs

OBJECTIVES = ("stream", "masked")


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Toy-scale defaults; the corresponding full-scale values are
    warmup 10000 and batch 64 (96 for the masked objective).
    """

    total_steps: int = 600
    warmup_steps: int = 200
    peak_lr: float = 1e-4
    floor_lr: float = 1e-5
    batch_size: int = 16
    window_frames: int = 320
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    input_dropout: float = 0.0  # masked objective trains with 0.2
    objective: str = "stream"
    eval_every: int = 100
    eval_batches: int = 4
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise TrainError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not 0.0 < self.floor_lr <= self.peak_lr:
            raise TrainError("need 0 < floor_lr <= peak_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise TrainError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1 or self.window_frames < 1:
            raise TrainError("batch_size and window_frames must be positive")
        if not 0.0 <= self.input_dropout < 1.0:
            raise TrainError("input_dropout must be in [0, 1)")
        if self.objective == "stream" and self.input_dropout != 0.0:
            raise TrainError("input dropout applies to the masked objective only")
        if self.eval_every < 0 or self.eval_batches < 1 or self.checkpoint_every < 0:
            raise TrainError("bad eval/checkpoint cadence")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate after `step` optimizer steps, 0 <= step <= total."""
    if not 0 <= step <= cfg.total_steps:
        raise TrainError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps and cfg.warmup_steps > 0:
        # step == warmup gives peak * 1.0, exact
        return cfg.peak_lr * (step / cfg.warmup_steps)
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    # cos(pi) == -1.0 exactly, so step == total lands on the floor exactly
    return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def init_opt_state(model: Model) -> dict:
    m = {n: np.zeros(p.shape) for n, p in model.params.items() if n not in model.frozen}
    v = {n: np.zeros(p.shape) for n, p in model.params.items() if n not in model.frozen}
    return {"step": 0, "m": m, "v": v}


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so the global norm is <= max_norm."""
    norm = global_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(model: Model, grads: dict, lr: float, state: dict, cfg: TrainConfig) -> None:
    state["step"] += 1
    t = state["step"]
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(grads):
        if name in model.frozen:
            raise TrainError(f"gradient supplied for frozen parameter {name}")
        g = grads[name].astype(np.float64)
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p = model.params[name]
        p -= update.astype(p.dtype)


# ---------------------------------------------------------------------------
# batch construction
# ---------------------------------------------------------------------------

def stream_batch(corpus: Corpus, split: str, spec: StreamSpec, cfg: TrainConfig, seed: int) -> dict:
    root = np.random.SeedSequence(int(seed))
    sel_seed, prefix_seed = (int(x) for x in root.generate_state(2, dtype=np.uint64))
    pairs = sample_pairs(corpus, split, cfg.batch_size, cfg.window_frames, sel_seed)
    if spec.k == 1:
        seqs = [align(p.input_mix, p.target, p.target_instrument, spec) for _, p in pairs]
    else:
        children = np.random.SeedSequence(prefix_seed).spawn(len(pairs))
        seqs = [
            sample_prefix_example(p.input_mix, p.target, p.target_instrument, spec, ss)
            for (_, p), ss in zip(pairs, children)
        ]
    return collate(seqs)


def masked_batch(corpus: Corpus, split: str, cfg: TrainConfig, seed: int, dropout: float) -> dict:
    """Same-position denoising batch over the delayed layout, full input view.

    Per example: pick a level, reveal all coarser levels, hide all finer
    levels entirely, mask a Uniform(0,1) fraction of the picked level
    (at least one entry), and score only those masked entries.
    """
    root = np.random.SeedSequence(int(seed))
    sel_seed, mask_seed = (int(x) for x in root.generate_state(2, dtype=np.uint64))
    pairs = sample_pairs(corpus, split, cfg.batch_size, cfg.window_frames, sel_seed)
    spec = StreamSpec(0, 1)
    seqs = [align(p.input_mix, p.target, p.target_instrument, spec) for _, p in pairs]
    batch = collate(seqs)
    oc = batch["output_codes"]
    b, l, n_q = oc.shape
    vocab = seqs[0].vocab
    sent = sentinel_code(vocab)
    pad = pad_code(vocab)
    mask = mask_code(vocab)
    targets = np.full_like(oc, -1)
    include = np.zeros(oc.shape, dtype=bool)
    drop = np.zeros(b, dtype=bool)
    rng = np.random.default_rng(np.random.SeedSequence(mask_seed))
    for i in range(b):
        level = int(rng.integers(0, n_q))
        data = (oc[i] >= 0) & (oc[i] != sent) & (oc[i] != pad)
        for fine in range(level + 1, n_q):
            oc[i, data[:, fine], fine] = mask
        rows = np.flatnonzero(data[:, level])
        frac = rng.uniform()
        chosen = rows[rng.random(rows.size) < frac]
        if chosen.size == 0:
            chosen = rows[[int(rng.integers(0, rows.size))]]
        targets[i, chosen, level] = oc[i, chosen, level]
        include[i, chosen, level] = True
        oc[i, chosen, level] = mask
        drop[i] = rng.random() < dropout
    batch["targets"] = targets
    batch["include"] = include
    batch["input_drop"] = drop
    return batch


def make_batch(corpus: Corpus, split: str, spec: StreamSpec, cfg: TrainConfig, seed: int,
               dropout: float) -> dict:
    if cfg.objective == "stream":
        return stream_batch(corpus, split, spec, cfg, seed)
    return masked_batch(corpus, split, cfg, seed, dropout)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    rows: list  # per step: dict(step, train_loss, valid_loss or None, lr)
    first_loss: float
    final_loss: float
    checkpoint_path: str | None


def _check_model(model: Model, corpus: Corpus, cfg: TrainConfig) -> None:
    want_causal = cfg.objective == "stream"
    if model.config.causal != want_causal:
        raise TrainError(
            f"objective {cfg.objective!r} needs causal={want_causal}, "
            f"model has causal={model.config.causal}"
        )
    if model.config.vocab != corpus.config.vocab or model.config.n_q != corpus.config.n_q:
        raise TrainError("model vocab/n_q do not match the corpus")


def train(model: Model, corpus: Corpus, spec: StreamSpec, cfg: TrainConfig,
          run_dir=None) -> TrainResult:
    """Optimize `model` on the corpus train split; returns the loss curve.

    Deterministic for a fixed (model seed, cfg.seed).  Writes loss.csv and
    model.ckpt into run_dir when given.
    """
    _check_model(model, corpus, cfg)
    state = init_opt_state(model)
    root = np.random.SeedSequence(cfg.seed)
    seeds = root.generate_state(cfg.total_steps + cfg.eval_batches, dtype=np.uint64)
    step_seeds = seeds[: cfg.total_steps]
    valid_batches = [
        make_batch(corpus, "valid", spec, cfg, int(s), dropout=0.0)
        for s in seeds[cfg.total_steps :]
    ]
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for i in range(cfg.total_steps):
        step = i + 1
        lr = lr_at(step, cfg)
        batch = make_batch(corpus, "train", spec, cfg, int(step_seeds[i]), cfg.input_dropout)
        loss, grads = model.loss_and_grads(batch)
        if not np.isfinite(loss):
            raise TrainError(f"loss diverged at step {step}: {loss}")
        clip_grads(grads, cfg.grad_clip)
        adam_step(model, grads, lr, state, cfg)
        valid_loss = None
        if step == cfg.total_steps or (cfg.eval_every and step % cfg.eval_every == 0):
            valid_loss = float(np.mean([model.loss(vb) for vb in valid_batches]))
        rows.append({"step": step, "train_loss": float(loss), "valid_loss": valid_loss, "lr": lr})
        if run_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(run_dir / f"step_{step:06d}.ckpt", model,
                            meta=_meta(spec, cfg, step))

    ckpt_path = None
    if run_dir is not None:
        write_loss_csv(run_dir / "loss.csv", rows)
        ckpt_path = str(run_dir / "model.ckpt")
        save_checkpoint(ckpt_path, model, meta=_meta(spec, cfg, cfg.total_steps))
    return TrainResult(
        rows=rows,
        first_loss=rows[0]["train_loss"],
        final_loss=rows[-1]["train_loss"],
        checkpoint_path=ckpt_path,
    )


def _meta(spec: StreamSpec, cfg: TrainConfig, step: int) -> dict:
    return {"t_f": spec.t_f, "k": spec.k, "objective": cfg.objective, "steps": step}


def write_loss_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "valid_loss", "lr"])
        for r in rows:
            vl = "" if r["valid_loss"] is None else repr(r["valid_loss"])
            w.writerow([r["step"], repr(r["train_loss"]), vl, repr(r["lr"])])
