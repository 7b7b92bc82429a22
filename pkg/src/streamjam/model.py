"""Decoder-only transformer over two fused token streams, in plain numpy.

Trunk: pre-norm blocks with RMSNorm, RoPE, QK-normed grouped-query attention
(learnable per-head similarity scale, init sqrt(head_dim)), SwiGLU FFN, and
one output head per codebook level.

Stream fusion per position:

    z = RMSNorm(RMSNorm(e_x) @ W) + gate * RMSNorm(e_y)

e_x is the sum of frozen random unit-norm input codebooks (one per level,
standing in for a pretrained tokenizer's codebook geometry; never updated),
or a learned pad vector where no input frame is fused, or exactly zero when
the input is dropped (RMSNorm(0) = 0, so a dropped input contributes nothing,
which also implements the unconditional branch of guidance). e_y is the sum
of learned output codebooks, except at the instrument slot where it is the
instrument embedding. The gate starts at zero: at initialization the fused
activations are a function of the input stream alone.

Forward and backward are hand-written; gradients for every trainable tensor
are exercised against finite differences in the tests. Incremental decoding
keeps per-layer KV caches and supports rewinding (chunked decoding re-embeds
the previous chunk once its input frames become available).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .streams import model_vocab

_MAGIC = b"TFCK"
_VERSION = 1
_HEAD = struct.Struct("<4sIQ")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    n_q: int = 4
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 2
    d_dac: int = 32
    ffn_mult: int = 4
    n_instruments: int = 18
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    causal: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.n_heads % self.n_kv_heads:
            raise ModelError(f"n_heads {self.n_heads} not divisible by {self.n_kv_heads} kv heads")
        if self.head_dim % 2:
            raise ModelError(f"head_dim {self.head_dim} must be even for rotary embedding")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"dtype must be float32 or float64, got {self.dtype}")
        if min(self.vocab, self.n_q, self.n_layers, self.d_dac, self.n_instruments) < 1:
            raise ModelError("vocab, n_q, n_layers, d_dac, n_instruments must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.d_model

    @property
    def model_vocab(self) -> int:
        return model_vocab(self.vocab)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def init_params(cfg: ModelConfig, seed) -> dict:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    dt = cfg.np_dtype
    std = 0.02
    p = {}

    def normal(shape, scale=std):
        return (rng.normal(size=shape) * scale).astype(dt)

    for l in range(cfg.n_q):
        rows = rng.normal(size=(cfg.vocab, cfg.d_dac))
        rows /= np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
        p[f"emb_dac_l{l}"] = rows.astype(dt)  # frozen, unit-norm rows
    p["input_pad"] = normal((cfg.d_dac,))
    for l in range(cfg.n_q):
        p[f"emb_out_l{l}"] = normal((cfg.model_vocab, cfg.d_model))
    p["emb_instrument"] = normal((cfg.n_instruments, cfg.d_model))
    p["w_in"] = normal((cfg.d_dac, cfg.d_model))
    p["fuse_norm_x"] = np.ones(cfg.d_dac, dtype=dt)
    p["fuse_norm_proj"] = np.ones(cfg.d_model, dtype=dt)
    p["fuse_norm_y"] = np.ones(cfg.d_model, dtype=dt)
    p["gate"] = np.zeros(cfg.d_model, dtype=dt)
    kv_out = cfg.n_kv_heads * cfg.head_dim
    for i in range(cfg.n_layers):
        p[f"layers.{i}.attn_norm"] = np.ones(cfg.d_model, dtype=dt)
        p[f"layers.{i}.wq"] = normal((cfg.d_model, cfg.d_model))
        p[f"layers.{i}.wk"] = normal((cfg.d_model, kv_out))
        p[f"layers.{i}.wv"] = normal((cfg.d_model, kv_out))
        p[f"layers.{i}.wo"] = normal((cfg.d_model, cfg.d_model))
        p[f"layers.{i}.qk_scale"] = np.full(cfg.n_heads, np.sqrt(cfg.head_dim), dtype=dt)
        p[f"layers.{i}.ffn_norm"] = np.ones(cfg.d_model, dtype=dt)
        p[f"layers.{i}.w_gate"] = normal((cfg.d_model, cfg.d_ffn))
        p[f"layers.{i}.w_up"] = normal((cfg.d_model, cfg.d_ffn))
        p[f"layers.{i}.w_down"] = normal((cfg.d_ffn, cfg.d_model))
    p["final_norm"] = np.ones(cfg.d_model, dtype=dt)
    for l in range(cfg.n_q):
        p[f"head_l{l}"] = normal((cfg.d_model, cfg.model_vocab))
    return p


def frozen_names(cfg: ModelConfig) -> frozenset:
    return frozenset(f"emb_dac_l{l}" for l in range(cfg.n_q))


class KVCache:
    """Per-layer key/value tensors with a shared length; supports rewind."""

    def __init__(self, cfg: ModelConfig, batch: int, capacity: int):
        shape = (batch, capacity, cfg.n_kv_heads, cfg.head_dim)
        self.k = [np.zeros(shape, dtype=cfg.np_dtype) for _ in range(cfg.n_layers)]
        self.v = [np.zeros(shape, dtype=cfg.np_dtype) for _ in range(cfg.n_layers)]
        self.capacity = capacity
        self.length = 0

    def trim(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ModelError(f"cannot trim cache of {self.length} to {length}")
        self.length = length


class Model:
    def __init__(self, config: ModelConfig, params: dict | None = None, seed=0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        self.frozen = frozen_names(config)

    # -- embedding of one block of positions --------------------------------

    def _embed(self, input_codes, output_codes, instrument, input_drop, want_cache):
        cfg, p = self.config, self.params
        dt = cfg.np_dtype
        b, l, n_q = input_codes.shape

        e_x = np.zeros((b, l, cfg.d_dac), dtype=dt)
        for q in range(n_q):
            e_x += p[f"emb_dac_l{q}"][np.maximum(input_codes[..., q], 0)]
        pad_rows = input_codes[..., 0] < 0
        e_x[pad_rows] = p["input_pad"]
        if input_drop is not None and input_drop.any():
            e_x[input_drop] = 0.0

        e_y = np.zeros((b, l, cfg.d_model), dtype=dt)
        for q in range(n_q):
            e_y += p[f"emb_out_l{q}"][np.maximum(output_codes[..., q], 0)]
        inst_rows = output_codes[..., 0] < 0
        bi, pi = np.nonzero(inst_rows)
        e_y[bi, pi] = p["emb_instrument"][instrument[bi]]

        nx, c_nx = nn.rmsnorm_fwd(e_x, p["fuse_norm_x"], cfg.norm_eps)
        px, c_px = nn.linear_fwd(nx, p["w_in"])
        npx, c_npx = nn.rmsnorm_fwd(px, p["fuse_norm_proj"], cfg.norm_eps)
        ny, c_ny = nn.rmsnorm_fwd(e_y, p["fuse_norm_y"], cfg.norm_eps)
        z = npx + p["gate"] * ny
        cache = None
        if want_cache:
            cache = (input_codes, output_codes, instrument, input_drop, pad_rows,
                     (bi, pi), ny, c_nx, c_px, c_npx, c_ny)
        return z, cache

    def _embed_bwd(self, dz, cache, grads):
        cfg, p = self.config, self.params
        (input_codes, output_codes, instrument, input_drop, pad_rows,
         (bi, pi), ny, c_nx, c_px, c_npx, c_ny) = cache
        n_q = input_codes.shape[-1]

        grads["gate"] += np.einsum("bld,bld->d", dz, ny)
        dny = dz * p["gate"]
        de_y, dgy = nn.rmsnorm_bwd(dny, c_ny)
        grads["fuse_norm_y"] += dgy
        # instrument rows feed the instrument table, the rest the output codebooks
        grads["emb_instrument"] += nn.scatter_rows(
            cfg.n_instruments, instrument[bi], de_y[bi, pi]
        ).astype(de_y.dtype)
        de_y_tok = de_y.copy()
        de_y_tok[bi, pi] = 0.0
        for q in range(n_q):
            grads[f"emb_out_l{q}"] += nn.scatter_rows(
                cfg.model_vocab, np.maximum(output_codes[..., q], 0), de_y_tok
            ).astype(de_y.dtype)

        dnpx, dgp = nn.rmsnorm_bwd(dz, c_npx)
        grads["fuse_norm_proj"] += dgp
        dnx, dw_in = nn.linear_bwd(dnpx, c_px)
        grads["w_in"] += dw_in
        de_x, dgx = nn.rmsnorm_bwd(dnx, c_nx)
        grads["fuse_norm_x"] += dgx
        if input_drop is not None and input_drop.any():
            de_x[input_drop] = 0.0
        grads["input_pad"] += de_x[pad_rows].sum(axis=0)
        # frozen input codebooks receive no gradient

    # -- trunk ---------------------------------------------------------------

    def _block_shapes(self, x):
        cfg = self.config
        b, l, _ = x.shape
        return b, l, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim

    def _attn_fwd(self, x, i, mask, cos, sin, want_cache, kv_cache=None, start=0):
        cfg, p = self.config, self.params
        b, l, h, kvh, hd = self._block_shapes(x)
        hx, c_norm = nn.rmsnorm_fwd(x, p[f"layers.{i}.attn_norm"], cfg.norm_eps)
        q, c_q = nn.linear_fwd(hx, p[f"layers.{i}.wq"])
        k, c_k = nn.linear_fwd(hx, p[f"layers.{i}.wk"])
        v, c_v = nn.linear_fwd(hx, p[f"layers.{i}.wv"])
        q = q.reshape(b, l, h, hd).transpose(0, 2, 1, 3)
        k = k.reshape(b, l, kvh, hd).transpose(0, 2, 1, 3)
        v = v.reshape(b, l, kvh, hd).transpose(0, 2, 1, 3)
        qr, c_rq = nn.rope_fwd(q, cos, sin)
        kr, c_rk = nn.rope_fwd(k, cos, sin)
        qn, c_nq = nn.l2norm_fwd(qr)
        kn, c_nk = nn.l2norm_fwd(kr)
        if kv_cache is not None:
            kv_cache.k[i][:, start : start + l] = kn.transpose(0, 2, 1, 3)
            kv_cache.v[i][:, start : start + l] = v.transpose(0, 2, 1, 3)
            keys = kv_cache.k[i][:, : start + l].transpose(0, 2, 1, 3)
            vals = kv_cache.v[i][:, : start + l].transpose(0, 2, 1, 3)
        else:
            keys, vals = kn, v
        out, c_att = nn.attention_fwd(qn, keys, vals, p[f"layers.{i}.qk_scale"], mask)
        merged = out.transpose(0, 2, 1, 3).reshape(b, l, cfg.d_model)
        proj, c_o = nn.linear_fwd(merged, p[f"layers.{i}.wo"])
        cache = (c_norm, c_q, c_k, c_v, c_rq, c_rk, c_nq, c_nk, c_att, c_o) if want_cache else None
        return proj, cache

    def _attn_bwd(self, dproj, i, cache, grads):
        cfg = self.config
        c_norm, c_q, c_k, c_v, c_rq, c_rk, c_nq, c_nk, c_att, c_o = cache
        dmerged, dwo = nn.linear_bwd(dproj, c_o)
        grads[f"layers.{i}.wo"] += dwo
        b, l, _ = dmerged.shape
        h, kvh, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
        dout = dmerged.reshape(b, l, h, hd).transpose(0, 2, 1, 3)
        dqn, dkn, dv, dscale = nn.attention_bwd(dout, c_att)
        grads[f"layers.{i}.qk_scale"] += dscale
        dqr = nn.l2norm_bwd(dqn, c_nq)
        dkr = nn.l2norm_bwd(dkn, c_nk)
        dq = nn.rope_bwd(dqr, c_rq)
        dk = nn.rope_bwd(dkr, c_rk)
        dq = dq.transpose(0, 2, 1, 3).reshape(b, l, h * hd)
        dk = dk.transpose(0, 2, 1, 3).reshape(b, l, kvh * hd)
        dv = dv.transpose(0, 2, 1, 3).reshape(b, l, kvh * hd)
        dh1, dwq = nn.linear_bwd(dq, c_q)
        dh2, dwk = nn.linear_bwd(dk, c_k)
        dh3, dwv = nn.linear_bwd(dv, c_v)
        grads[f"layers.{i}.wq"] += dwq
        grads[f"layers.{i}.wk"] += dwk
        grads[f"layers.{i}.wv"] += dwv
        dhx = dh1 + dh2 + dh3
        dx, dgain = nn.rmsnorm_bwd(dhx, c_norm)
        grads[f"layers.{i}.attn_norm"] += dgain
        return dx

    def _ffn_fwd(self, x, i, want_cache):
        cfg, p = self.config, self.params
        hx, c_norm = nn.rmsnorm_fwd(x, p[f"layers.{i}.ffn_norm"], cfg.norm_eps)
        y, c_sw = nn.swiglu_fwd(hx, p[f"layers.{i}.w_gate"], p[f"layers.{i}.w_up"],
                                p[f"layers.{i}.w_down"])
        return y, ((c_norm, c_sw) if want_cache else None)

    def _ffn_bwd(self, dy, i, cache, grads):
        c_norm, c_sw = cache
        dhx, dwg, dwu, dwd = nn.swiglu_bwd(dy, c_sw)
        grads[f"layers.{i}.w_gate"] += dwg
        grads[f"layers.{i}.w_up"] += dwu
        grads[f"layers.{i}.w_down"] += dwd
        dx, dgain = nn.rmsnorm_bwd(dhx, c_norm)
        grads[f"layers.{i}.ffn_norm"] += dgain
        return dx

    def _mask(self, lq, lk, offset=0):
        cfg = self.config
        if cfg.causal:
            return nn.causal_mask(lq, lk, offset=offset, dtype=cfg.np_dtype)
        return nn.full_mask(lq, lk, dtype=cfg.np_dtype)

    def _run(self, batch, want_grads):
        """Forward (and optionally backward) over a full batch.

        Returns (loss, grads, logits, z). Loss needs batch["targets"] and
        batch["include"]; without them loss is None (pure forward).
        """
        cfg, p = self.config, self.params
        ic = batch["input_codes"]
        oc = batch["output_codes"]
        inst = batch["instrument"]
        drop = batch.get("input_drop")
        b, l, n_q = ic.shape
        if n_q != cfg.n_q:
            raise ModelError(f"batch has n_q={n_q}, model expects {cfg.n_q}")
        if int(inst.max(initial=0)) >= cfg.n_instruments:
            raise ModelError("instrument id out of range")

        z, c_embed = self._embed(ic, oc, inst, drop, want_grads)
        cos, sin = nn.rope_angles(np.arange(l), cfg.head_dim, cfg.rope_base)
        mask = self._mask(l, l)

        x = z
        layer_caches = []
        for i in range(cfg.n_layers):
            attn, c_a = self._attn_fwd(x, i, mask, cos, sin, want_grads)
            x = x + attn
            ffn, c_f = self._ffn_fwd(x, i, want_grads)
            x = x + ffn
            layer_caches.append((c_a, c_f))
        hn, c_fin = nn.rmsnorm_fwd(x, p["final_norm"], cfg.norm_eps)

        logits = [hn @ p[f"head_l{q}"] for q in range(n_q)]

        loss = None
        dhn = None
        level_grads = []
        if want_grads and "targets" not in batch:
            raise ModelError("gradients need targets and include in the batch")
        if "targets" in batch:
            targets = batch["targets"]
            include = batch["include"]
            count = int(include.sum())
            if count == 0:
                raise ModelError("batch includes no loss entries")
            total = 0.0
            dhn = np.zeros_like(hn)
            for q in range(n_q):
                sel = include[..., q]
                lsum, dsel = nn.cross_entropy_sum(logits[q][sel], targets[..., q][sel])
                total += lsum
                if want_grads:
                    dlog = np.zeros_like(logits[q])
                    dlog[sel] = dsel / count
                    level_grads.append(dlog)
            loss = total / count

        if not want_grads:
            return loss, None, logits, z

        grads = {n: np.zeros_like(v) for n, v in p.items() if n not in self.frozen}
        for q in range(n_q):
            dlog = level_grads[q]
            grads[f"head_l{q}"] += hn.reshape(-1, cfg.d_model).T @ dlog.reshape(-1, cfg.model_vocab)
            dhn += dlog @ p[f"head_l{q}"].T
        dx, dgain = nn.rmsnorm_bwd(dhn, c_fin)
        grads["final_norm"] += dgain
        for i in reversed(range(cfg.n_layers)):
            c_a, c_f = layer_caches[i]
            dffn_in = self._ffn_bwd(dx, i, c_f, grads)
            dx = dx + dffn_in
            dattn_in = self._attn_bwd(dx, i, c_a, grads)
            dx = dx + dattn_in
        self._embed_bwd(dx, c_embed, grads)
        return loss, grads, logits, z

    # -- public API ----------------------------------------------------------

    def loss_and_grads(self, batch):
        loss, grads, _, _ = self._run(batch, want_grads=True)
        return loss, grads

    def loss(self, batch) -> float:
        loss, _, _, _ = self._run(batch, want_grads=False)
        return loss

    def forward_logits(self, batch):
        _, _, logits, _ = self._run(batch, want_grads=False)
        return logits

    def fused_embedding(self, batch):
        z, _ = self._embed(
            batch["input_codes"], batch["output_codes"], batch["instrument"],
            batch.get("input_drop"), want_cache=False,
        )
        return z

    def new_cache(self, batch: int, capacity: int) -> KVCache:
        return KVCache(self.config, batch, capacity)

    def forward_cached(self, input_codes, output_codes, instrument, cache: KVCache,
                       input_drop=None):
        """Append a block of positions and return its logits per level.

        input_codes/output_codes are (B, n, n_q); positions are
        cache.length .. cache.length+n-1. Requires a causal model.
        """
        cfg, p = self.config, self.params
        if not cfg.causal:
            raise ModelError("incremental decoding requires a causal model")
        b, n, n_q = input_codes.shape
        start = cache.length
        if start + n > cache.capacity:
            raise ModelError(f"cache capacity {cache.capacity} exceeded")

        z, _ = self._embed(input_codes, output_codes, instrument, input_drop, False)
        cos, sin = nn.rope_angles(np.arange(start, start + n), cfg.head_dim, cfg.rope_base)
        mask = self._mask(n, start + n, offset=start)
        x = z
        for i in range(cfg.n_layers):
            attn, _ = self._attn_fwd(x, i, mask, cos, sin, False, kv_cache=cache, start=start)
            x = x + attn
            ffn, _ = self._ffn_fwd(x, i, False)
            x = x + ffn
        cache.length = start + n
        hn, _ = nn.rmsnorm_fwd(x, p["final_norm"], cfg.norm_eps)
        return [hn @ p[f"head_l{q}"] for q in range(n_q)]


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def _manifest(arrays: dict) -> tuple:
    entries = []
    offset = 0
    for name in sorted(arrays):
        a = arrays[name]
        entries.append([name, a.dtype.str, list(a.shape), offset])
        offset += a.nbytes
    return entries, offset


def save_checkpoint(path, model: Model, extras: dict | None = None, meta: dict | None = None):
    extras = extras or {}
    p_entries, p_size = _manifest(model.params)
    e_entries, _ = _manifest(extras)
    for e in e_entries:
        e[3] += p_size
    header = json.dumps(
        {
            "version": _VERSION,
            "config": asdict(model.config),
            "params": p_entries,
            "extras": e_entries,
            "meta": meta or {},
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(_HEAD.pack(_MAGIC, _VERSION, len(header)))
        f.write(header)
        for name in sorted(model.params):
            f.write(np.ascontiguousarray(model.params[name]).tobytes())
        for name in sorted(extras):
            f.write(np.ascontiguousarray(extras[name]).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEAD.size:
        raise ModelError(f"{path}: truncated checkpoint")
    magic, version, hlen = _HEAD.unpack_from(raw)
    if magic != _MAGIC:
        raise ModelError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ModelError(f"{path}: unsupported version {version}")
    header = json.loads(raw[_HEAD.size : _HEAD.size + hlen])
    known = set(ModelConfig.__dataclass_fields__)
    extra_keys = set(header["config"]) - known
    if extra_keys:
        raise ModelError(f"{path}: unknown config keys {sorted(extra_keys)}")
    cfg = ModelConfig(**header["config"])
    body = raw[_HEAD.size + hlen :]

    def read_arrays(entries):
        out = {}
        for name, dstr, shape, offset in entries:
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype=np.dtype(dstr), count=n, offset=offset)
            out[name] = arr.reshape(shape).copy()
        return out

    params = read_arrays(header["params"])
    extras = read_arrays(header["extras"])
    return Model(cfg, params=params), extras, header.get("meta", {})
