"""Command-line driver for the full pipeline.

Subcommands: gen-data, train, train-grid, generate, eval, sweep,
feasibility, calibrate-gen-time. Flags that carry durations take seconds
(matching how operating points are usually quoted) and are converted to
whole frames up front; a duration that is not a whole number of frames at
50 Hz is rejected loudly.

Exit codes: 0 success, 1 validation error (bad flags, config, or inputs),
2 runtime failure (training divergence, unexpected errors mid-run).
Every command writes a config snapshot into its output directory and is
reproducible from that snapshot. Config values can also be overridden per
run with STREAMJAM_<SECTION>__<KEY> environment variables.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, snapshot_config
from .decoding import mlm_generate, stream_generate
from .grids import GridError, TokenGrid, seconds_to_frames, write_grid
from .metrics import report_to_json, reports_to_csv, run_eval
from .model import Model, ModelConfig, init_params, load_checkpoint
from .sched import feasible, simulate, sweep_feasibility, sweep_to_csv
from .streams import StreamSpec
from .synth import INSTRUMENTS, load_corpus, sample_pairs, write_corpus
from .training import train


class CliRuntimeError(RuntimeError):
    """Failure after validation passed; mapped to exit code 2."""


@contextmanager
def runtime_phase():
    try:
        yield
    except CliRuntimeError:
        raise
    except Exception as e:
        raise CliRuntimeError(str(e)) from e


class Parser(argparse.ArgumentParser):
    # validation problems exit 1, including flag parse errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_seconds(value: str, flag: str) -> int:
    try:
        sec = float(value)
    except ValueError:
        raise ConfigError(f"{flag}: expected seconds, got {value!r}") from None
    try:
        return seconds_to_frames(sec)
    except GridError as e:
        raise ConfigError(f"{flag}: {e}") from None


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} directory not found: {p}")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _prepare_out(path: str, force: bool = True) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"output path exists and is not a directory: {p}")
    if p.is_dir() and any(p.iterdir()) and not force:
        raise ConfigError(f"output directory {p} is not empty (use --force)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _model_from_config(cfg: RunConfig, vocab: int, n_q: int, causal: bool, seed: int) -> Model:
    m = cfg["model"]
    mcfg = ModelConfig(
        vocab=vocab, n_q=n_q, d_model=m["d_model"], n_layers=m["n_layers"],
        n_heads=m["n_heads"], n_kv_heads=m["n_kv_heads"], d_dac=m["d_dac"],
        ffn_mult=m["ffn_mult"], n_instruments=len(INSTRUMENTS), causal=causal,
        dtype=m["dtype"],
    )
    return Model(mcfg, init_params(mcfg, seed=seed))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])


def _cell_name(spec: StreamSpec) -> str:
    return f"tf{spec.t_f}_k{spec.k}"


def _load_run_model(path: Path):
    model, _, meta = load_checkpoint(path)
    if "t_f" not in meta or "k" not in meta:
        raise ConfigError(f"{path}: checkpoint lacks (t_f, k) metadata")
    return model, StreamSpec(t_f=int(meta["t_f"]), k=int(meta["k"])), meta


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(args.out, force=args.force)
    data = cfg["data"]
    with runtime_phase():
        corpus = write_corpus(out, cfg.synth_config(), data["n_songs"], data["seed"])
        snapshot_config(cfg, out / "config.toml")
        digest = hashlib.sha256((out / "manifest.json").read_bytes()).hexdigest()
    sizes = {name: len(ids) for name, ids in corpus.splits.items()}
    print(
        f"wrote {data['n_songs']} songs to {out} "
        f"(train {sizes['train']}/valid {sizes['valid']}/test {sizes['test']}), "
        f"manifest sha256 {digest[:16]}"
    )
    return 0


def _train_one(cfg: RunConfig, corpus, spec: StreamSpec, run_dir: Path,
               model_seed: int, train_seed: int):
    tcfg = cfg.train_config(seed=train_seed)
    model = _model_from_config(
        cfg, corpus.config.vocab, corpus.config.n_q,
        causal=tcfg.objective == "stream", seed=model_seed,
    )
    result = train(model, corpus, spec, tcfg, run_dir=run_dir)
    snapshot_config(cfg, run_dir / "config.toml")
    return result


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    t_f = parse_seconds(args.t_f, "--t-f")
    k = parse_seconds(args.k, "--k")
    spec = StreamSpec(t_f=t_f, k=k)
    corpus = load_corpus(_require_dir(args.corpus, "corpus"))
    out = _prepare_out(args.out)
    with runtime_phase():
        result = _train_one(cfg, corpus, spec, out,
                            cfg["model"]["seed"], cfg["train"]["seed"])
    print(
        f"trained (t_f={spec.t_f}, k={spec.k}) frames: loss "
        f"{result.first_loss:.4f} -> {result.final_loss:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def cmd_train_grid(args) -> int:
    cfg = load_config(args.config)
    specs = cfg.grid_specs()
    corpus = load_corpus(_require_dir(args.corpus, "corpus"))
    out = _prepare_out(args.out)
    with runtime_phase():
        snapshot_config(cfg, out / "config.toml")
        for i, spec in enumerate(specs):
            run_dir = out / _cell_name(spec)
            result = _train_one(
                cfg, corpus, spec, run_dir,
                _derive_seed(cfg["model"]["seed"], i),
                _derive_seed(cfg["train"]["seed"], i),
            )
            print(
                f"[{i + 1}/{len(specs)}] {_cell_name(spec)}: loss "
                f"{result.first_loss:.4f} -> {result.final_loss:.4f}"
            )
    return 0


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    ckpt = _require_file(args.ckpt, "checkpoint")
    corpus = load_corpus(_require_dir(args.corpus, "corpus"))
    out = _prepare_out(args.out)
    ev = cfg["eval"]
    frames = ev["window_frames"] if args.frames is None else parse_seconds(args.frames, "--frames")
    if args.index < 0:
        raise ConfigError(f"--index must be >= 0, got {args.index}")
    with runtime_phase():
        model, spec, meta = _load_run_model(ckpt)
        drawn = sample_pairs(corpus, ev["split"], args.index + 1, frames, ev["seed"])
        _, pair = drawn[args.index]
        seed = ev["seed"] if args.seed is None else args.seed
        if meta.get("objective") == "masked":
            grid = mlm_generate(model, pair.input_mix, pair.target_instrument,
                                cfg.mlm_config(seed=seed))
            chunk_rows, mean_chunk = [], 0.0
        else:
            res = stream_generate(model, pair.input_mix, pair.target_instrument,
                                  spec, cfg.sample_config(seed=seed))
            grid, chunk_rows = res.grid, res.chunk_rows
            mean_chunk = sum(res.chunk_seconds) / len(res.chunk_seconds)
        write_grid(out / "input.tgrd", pair.input_mix)
        write_grid(out / "target.tgrd", pair.target)
        write_grid(out / "generated.tgrd", grid)
        # wall-clock chunk times go to stdout only: report files must be
        # byte-identical across reruns with the same config and seed
        (out / "meta.json").write_text(json.dumps(
            {"t_f_frames": spec.t_f, "k_frames": spec.k, "frames": frames,
             "seed": seed, "objective": meta.get("objective", "stream"),
             "chunk_rows": chunk_rows},
            indent=2, sort_keys=True) + "\n")
        snapshot_config(cfg, out / "config.toml")
    print(f"generated {frames} frames with (t_f={spec.t_f}, k={spec.k}) into {out} "
          f"({mean_chunk * 1000:.1f} ms/chunk mean)")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = _require_file(args.ckpt, "checkpoint")
    corpus = load_corpus(_require_dir(args.corpus, "corpus"))
    out = _prepare_out(args.out)
    ev = cfg["eval"]
    with runtime_phase():
        model, spec, _ = _load_run_model(ckpt)
        report = run_eval(
            model, corpus, spec, args.variant,
            n_examples=args.n if args.n is not None else ev["n_examples"],
            window_frames=ev["window_frames"],
            seed=ev["seed"],
            sample=cfg.sample_config(seed=ev["seed"]),
            split=ev["split"],
            batch_size=ev["batch_size"],
            tolerance=ev["tolerance"],
            floors_n=ev["floors_n"],
        )
        report_to_json(report, out / "report.json")
        reports_to_csv([report], out / "report.csv")
        snapshot_config(cfg, out / "config.toml")
    print(
        f"eval {args.variant} (t_f={report.t_f}, k={report.k}): "
        f"coherence {report.coherence:.3f} beat_f1 {report.beat_f1:.3f} "
        f"jsd {report.dist_distance:.3f} over {report.n_examples} examples"
    )
    return 0


def _sweep_variants(ev: dict) -> list:
    variants = list(ev["variants"])
    variants += [f"prompt_{L:g}" for L in ev["prompt_seconds"]]
    return variants


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    runs = _require_dir(args.runs, "runs")
    corpus = load_corpus(_require_dir(args.corpus, "corpus"))
    out = _prepare_out(args.out)
    ev = cfg["eval"]
    variants = _sweep_variants(ev)
    specs = cfg.grid_specs()
    with runtime_phase():
        profile = cfg.latency_profile()
        reports, cells, warnings = [], [], []
        for ci, spec in enumerate(specs):
            ckpt = runs / _cell_name(spec) / "model.ckpt"
            if not ckpt.is_file():
                warnings.append({"cell": _cell_name(spec), "reason": f"missing checkpoint {ckpt}"})
                print(f"warning: skipping {_cell_name(spec)}: no checkpoint", file=sys.stderr)
                continue
            model, spec_ck, _ = _load_run_model(ckpt)
            if spec_ck != spec:
                warnings.append({"cell": _cell_name(spec),
                                 "reason": f"checkpoint trained for {_cell_name(spec_ck)}"})
                continue
            underruns = simulate(spec, profile, cfg["sched"]["chunks"],
                                 seed=cfg["sched"]["seed"]).underruns
            rep_cell = feasible(spec, profile)
            cells.append({"cell": _cell_name(spec), "t_f_frames": spec.t_f,
                          "k_frames": spec.k, "underruns": underruns,
                          **rep_cell.as_dict()})
            for vi, variant in enumerate(variants):
                report = run_eval(
                    model, corpus, spec, variant,
                    n_examples=ev["n_examples"],
                    window_frames=ev["window_frames"],
                    seed=_derive_seed(ev["seed"], ci, vi),
                    sample=cfg.sample_config(seed=_derive_seed(ev["seed"], ci, vi)),
                    split=ev["split"],
                    batch_size=ev["batch_size"],
                    tolerance=ev["tolerance"],
                    floors_n=ev["floors_n"],
                )
                report.underruns = underruns
                reports.append(report)
        reports_to_csv(reports, out / "sweep.csv")
        (out / "sweep.json").write_text(json.dumps(
            {"cells": cells, "warnings": warnings,
             "variants": variants, "rows": len(reports)},
            indent=2, sort_keys=True) + "\n")
        snapshot_config(cfg, out / "config.toml")
    print(f"swept {len(cells)} cells x {len(variants)} variants "
          f"({len(warnings)} skipped) into {out}")
    return 0


def cmd_feasibility(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(args.out)
    with runtime_phase():
        profile = cfg.latency_profile()
        cells = sweep_feasibility(profile)
        sweep_to_csv(cells, out / "feasibility.csv")
        (out / "feasibility.json").write_text(json.dumps(
            {"cells": cells, "n_feasible": sum(c["feasible"] for c in cells)},
            indent=2, sort_keys=True, default=float) + "\n")
        snapshot_config(cfg, out / "config.toml")
    n_ok = sum(c["feasible"] for c in cells)
    print(f"feasible region: {n_ok}/{len(cells)} cells, written to {out}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    ckpt = _require_file(args.ckpt, "checkpoint")
    out = _prepare_out(args.out)
    k_grid = [parse_seconds(v, "--k-grid") for v in args.k_grid.split(",")]
    if any(k < 1 for k in k_grid):
        raise ConfigError("--k-grid entries must be at least one frame")
    with runtime_phase():
        model, spec, _ = _load_run_model(ckpt)
        mcfg = model.config
        rng = np.random.default_rng(0)
        samples = []
        for k in k_grid:
            frames = max(4 * k, 8)
            grid = TokenGrid(
                rng.integers(0, mcfg.vocab, size=(frames, mcfg.n_q), dtype=np.int32),
                mcfg.vocab,
            )
            res = stream_generate(
                model, grid, 0, StreamSpec(t_f=0, k=k),
                cfg.sample_config(), num_frames=frames,
            )
            # the first call carries the prefill; steady-state chunks only
            steady = res.chunk_seconds[1:-1] or res.chunk_seconds
            samples.append({"k_frames": k, "k_seconds": k / 50,
                            "t_gen_seconds": float(np.mean(steady))})
        a, b, alpha = _fit_gen_time(samples)
        (out / "calibration.json").write_text(json.dumps(
            {"a": a, "b": b, "alpha": alpha, "samples": samples},
            indent=2, sort_keys=True) + "\n")
        snapshot_config(cfg, out / "config.toml")
    print(f"t_gen(k) ~= {a:.4g} + {b:.4g} * k^{alpha:.2f}, written to {out}")
    return 0


def _fit_gen_time(samples) -> tuple:
    """Least-squares fit of a + b * k^alpha over a small alpha grid."""
    ks = np.array([s["k_seconds"] for s in samples])
    ts = np.array([s["t_gen_seconds"] for s in samples])
    best = None
    for alpha in np.arange(0.25, 2.01, 0.25):
        design = np.stack([np.ones_like(ks), ks**alpha], axis=1)
        coef, *_ = np.linalg.lstsq(design, ts, rcond=None)
        a, b = max(float(coef[0]), 0.0), max(float(coef[1]), 0.0)
        sse = float(np.sum((a + b * ks**alpha - ts) ** 2))
        if best is None or sse < best[0]:
            best = (sse, a, b, float(alpha))
    return best[1], best[2], best[3]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(
        prog="streamjam",
        description="streaming accompaniment over token grids: data, training, "
                    "generation, scheduling, evaluation",
        epilog="config keys can be overridden with STREAMJAM_<SECTION>__<KEY> "
               "environment variables",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="TOML config file")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "synthesize a corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")

    p = add("train", cmd_train, "train one (t_f, k) operating point")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-f", required=True, dest="t_f",
                   help="future visibility in seconds (negative = generate ahead)")
    p.add_argument("--k", required=True, help="chunk length in seconds")

    p = add("train-grid", cmd_train_grid, "train every configured (t_f, k) cell")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("generate", cmd_generate, "stream one accompaniment from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, default=0, help="which held-out example")
    p.add_argument("--frames", default=None, help="output length in seconds")
    p.add_argument("--seed", type=int, default=None)

    p = add("eval", cmd_eval, "score a checkpoint on held-out windows")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="paired",
                   help="paired, random_input, or prompt_<seconds>")
    p.add_argument("--n", type=int, default=None, help="override example count")

    p = add("sweep", cmd_sweep, "evaluate a trained grid and emit the sweep report")
    p.add_argument("--runs", required=True, help="directory from train-grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("feasibility", cmd_feasibility, "map the feasible (t_f, k) region")
    p.add_argument("--out", required=True)

    p = add("calibrate-gen-time", cmd_calibrate,
            "fit the t_gen(k) model from measured decode times (wall-clock: "
            "the one command whose outputs are not byte-reproducible)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-grid", default="0.04,0.1,0.2", dest="k_grid",
                   help="comma-separated chunk lengths in seconds")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliRuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything else is a runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
