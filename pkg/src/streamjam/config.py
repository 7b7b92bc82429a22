"""Run configuration: TOML file, environment overrides, strict keys.

One file carries six sections (data, model, train, decode, sched, eval);
every key has a desk-scale default, so an empty file is a valid config.
Unknown sections or keys are rejected by name. Environment variables of
the form STREAMJAM_<SECTION>__<KEY> override file values (parsed as TOML
literals), and the effective config is snapshotted into each run
directory by a deterministic writer so reruns can be reproduced from the
snapshot alone.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Optional

import tomli

from .decoding import MlmDecodeConfig, SampleConfig
from .sched import LatencyProfile
from .streams import StreamSpec
from .synth import SynthConfig
from .training import TrainConfig

ENV_PREFIX = "STREAMJAM_"


class ConfigError(ValueError):
    pass


def _synth_defaults() -> dict:
    return {f.name: f.default for f in dataclasses.fields(SynthConfig)}


# Desk-scale defaults. Where the full-scale system differs, the value it
# uses is noted inline.
DEFAULTS = {
    "data": dict(
        _synth_defaults(),
        n_songs=60,  # full scale: hours of audio, not applicable here
        n_q=2,
        frames=1500,
        max_stems=4,
        seed=0,
    ),
    "model": {
        "d_model": 64,  # full scale: 2048
        "n_layers": 2,  # full scale: 48
        "n_heads": 4,  # full scale: 32
        "n_kv_heads": 2,
        "d_dac": 16,  # full scale: 1024-d codec embeddings
        "ffn_mult": 4,
        "dtype": "float32",
        "seed": 0,
    },
    "train": dict(
        {f.name: f.default for f in dataclasses.fields(TrainConfig)},
        grid_t_f_seconds=[-1.0, 0.0, 0.2],
        grid_k_seconds=[0.02],
    ),
    "decode": {
        "temperature": 1.0,
        "top_k": 64,  # full scale: 250 over a 2048 vocab
        "seed": 0,
        "mlm_noise_temps": [8.0, 4.0],  # full scale: (8, 8, 4, 4) over 4 levels
        "mlm_steps": [16, 8],  # full scale: (128, 64, 32, 32)
        "cfg_scale": 2.0,
    },
    "sched": {
        "tau_sys": 0.3,
        "tau_jitter": 0.1,
        "a": 0.0,
        "b": 0.5,
        "alpha": 1.0,
        "jitter": "uniform",
        "jitter_width": None,  # None: use tau_jitter as the width
        "chunks": 500,
        "seed": 0,
    },
    "eval": {
        "n_examples": 256,  # full scale: 1024
        "window_frames": 320,
        "variants": ["paired", "random_input"],
        "prompt_seconds": [0.0, 2.0],
        "batch_size": 32,
        "tolerance": 1,
        "split": "test",
        "floors_n": 64,
        "seed": 0,
    },
}


def _check_value(section: str, key: str, value, default):
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] {key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"[{section}] {key} must be a list, got {value!r}")
        return value
    raise ConfigError(f"[{section}] {key}: unsupported default type")  # pragma: no cover


def _merge(base: dict, overrides: dict, source: str) -> dict:
    out = {s: dict(v) for s, v in base.items()}
    for section, values in overrides.items():
        if section not in out:
            raise ConfigError(f"{source}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            out[section][key] = _check_value(section, key, value, DEFAULTS[section][key])
    return out


def _env_overrides(env) -> dict:
    out: dict = {}
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ConfigError(f"{name}: expected {ENV_PREFIX}<SECTION>__<KEY>")
        section, key = rest.split("__", 1)
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw  # bare strings may arrive unquoted
        out.setdefault(section.lower(), {})[key.lower()] = value
    return out


@dataclasses.dataclass(frozen=True)
class RunConfig:
    sections: dict

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    # -- typed views ---------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        data = {k: v for k, v in self.sections["data"].items() if k not in ("n_songs", "seed")}
        return SynthConfig(**data)

    def train_config(self, **overrides) -> TrainConfig:
        skip = ("grid_t_f_seconds", "grid_k_seconds")
        kw = {k: v for k, v in self.sections["train"].items() if k not in skip}
        kw.update(overrides)
        return TrainConfig(**kw)

    def grid_specs(self) -> list:
        train = self.sections["train"]
        cells = []
        for t_f_s in train["grid_t_f_seconds"]:
            for k_s in train["grid_k_seconds"]:
                cells.append(StreamSpec.from_seconds(float(t_f_s), float(k_s)))
        if not cells:
            raise ConfigError("empty (t_f, k) grid")
        return cells

    def sample_config(self, seed: Optional[int] = None) -> SampleConfig:
        d = self.sections["decode"]
        return SampleConfig(
            temperature=d["temperature"],
            top_k=d["top_k"],
            seed=d["seed"] if seed is None else seed,
        )

    def mlm_config(self, seed: Optional[int] = None) -> MlmDecodeConfig:
        d = self.sections["decode"]
        return MlmDecodeConfig(
            noise_temps=tuple(d["mlm_noise_temps"]),
            steps=tuple(d["mlm_steps"]),
            cfg_scale=d["cfg_scale"],
            seed=d["seed"] if seed is None else seed,
        )

    def latency_profile(self) -> LatencyProfile:
        s = self.sections["sched"]
        return LatencyProfile(
            tau_sys=s["tau_sys"],
            tau_jitter=s["tau_jitter"],
            a=s["a"],
            b=s["b"],
            alpha=s["alpha"],
            jitter=s["jitter"],
            jitter_width=s["jitter_width"],
            seed=s["seed"],
        )


def load_config(path=None, env=None) -> RunConfig:
    """Defaults, then the TOML file, then STREAMJAM_* env overrides."""
    merged = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p, "rb") as f:
                raw = tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from e
        merged = _merge(merged, raw, str(p))
    env_over = _env_overrides(os.environ if env is None else env)
    if env_over:
        merged = _merge(merged, env_over, "environment")
    return RunConfig(sections=merged)


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_render_value(v) for v in value) + "]"
    raise ConfigError(f"cannot render {type(value).__name__} into a snapshot")


def snapshot_config(cfg: RunConfig, path) -> None:
    """Write the effective config as TOML, bytes stable across reruns."""
    lines = []
    for section in sorted(cfg.sections):
        lines.append(f"[{section}]")
        for key in sorted(cfg.sections[section]):
            value = cfg.sections[section][key]
            if value is None:
                continue  # unset optional; the loader default applies
            lines.append(f"{key} = {_render_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def roundtrip_check(cfg: RunConfig, path) -> RunConfig:
    """Snapshots must load back to the identical effective config."""
    snapshot_config(cfg, path)
    again = load_config(path, env={})
    if again.sections != cfg.sections:
        raise ConfigError("config snapshot does not round-trip")
    return again
