"""Speech encoder, parallel unit decoder, and the autoregressive baseline.

The encoder subsamples input frames 4x with two strided convolutions, then
runs conformer-style layers (self-attention + depthwise convolution +
feed-forward, pre-norm residuals). The parallel decoder upsamples encoder
states by an integer factor, adds learnable positions, and predicts a
log-probability lattice over units-plus-blank in a single pass. The
autoregressive variant shares the encoder and decodes units one at a time;
it exists for encoder pretraining, distillation, and the speed baseline.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .ctc import LogProbLattice, greedy_decode

__all__ = [
    "ModelConfig",
    "RunContext",
    "Module",
    "NarModel",
    "ArModel",
    "ArDecodeMeta",
    "build_model",
    "transfer_encoder",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"CS2U"
CHECKPOINT_VERSION = 1

# Fields the encoders of two models must agree on before weights can be
# copied between them (plus max_positions, which sizes the position table).
ENCODER_COMPAT_FIELDS = (
    "n_encoder_layers",
    "d_model",
    "n_heads",
    "conv_kernel",
    "feature_dim",
    "max_positions",
)


@dataclass
class ModelConfig:
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    conv_kernel: int = 3
    upsample_factor: int = 2
    n_units: int = 16
    feature_dim: int = 8
    variant: str = "nar"  # "nar" | "ar"
    dropout: float = 0.1
    max_positions: int = 1024

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.upsample_factor < 1:
            raise ValueError(f"upsample_factor must be >= 1, got {self.upsample_factor}")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.variant not in ("nar", "ar"):
            raise ValueError(f"variant must be 'nar' or 'ar', got {self.variant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class RunContext:
    """Per-forward training state; None means plain deterministic inference."""

    dropout: float
    rng: np.random.Generator


class Module:
    """Base with name-addressable parameters derived from attribute paths."""

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        for attr, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((attr, val))
            elif isinstance(val, Module):
                out.extend((f"{attr}.{n}", p) for n, p in val.named_parameters())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(
                            (f"{attr}.{i}.{n}", p) for n, p in item.named_parameters()
                        )
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def _uniform(rng: np.random.Generator, shape, bound: float) -> Parameter:
    return Parameter((rng.random(shape) * 2.0 - 1.0) * bound)


def _drop(x: Tensor, ctx: RunContext | None) -> Tensor:
    if ctx is None or ctx.dropout == 0.0:
        return x
    return ad.dropout(x, ctx.dropout, ctx.rng)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.w = _uniform(rng, (d_in, d_out), bound)
        if bias:
            self.b = Parameter(np.zeros(d_out))
        else:
            self.b = None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        return ad.add(out, self.b) if self.b is not None else out


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, n_heads: int):
        self.n_heads = n_heads
        self.wq = Linear(rng, d, d)
        # No key bias: a uniform shift of all keys moves every score for a
        # query by the same amount, which softmax ignores.
        self.wk = Linear(rng, d, d, bias=False)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def __call__(self, query: Tensor, memory: Tensor, mask=None) -> Tensor:
        ctx = ad.attention(
            self.wq(query), self.wk(memory), self.wv(memory), self.n_heads, mask=mask
        )
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, rng, d: int):
        self.w1 = Linear(rng, d, 4 * d)
        self.w2 = Linear(rng, 4 * d, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ad.gelu(self.w1(x)))


class Subsampler(Module):
    """Two stride-2 convolutions with ReLU; output length is floor(N/4).

    Kernel 4 with padding 1 gives floor(L/2) per layer, and
    floor(floor(N/2)/2) == floor(N/4).
    """

    KERNEL = 4

    def __init__(self, rng, feature_dim: int, d: int):
        k = self.KERNEL
        self.w0 = _uniform(rng, (k, feature_dim, d), 1.0 / np.sqrt(k * feature_dim))
        self.b0 = Parameter(np.zeros(d))
        self.w1 = _uniform(rng, (k, d, d), 1.0 / np.sqrt(k * d))
        self.b1 = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] < 4:
            raise ValueError(f"need at least 4 input frames, got {x.shape[0]}")
        h = ad.relu(ad.conv1d(x, self.w0, self.b0, stride=2, padding=1))
        return ad.relu(ad.conv1d(h, self.w1, self.b1, stride=2, padding=1))


class EncoderLayer(Module):
    def __init__(self, rng, d: int, n_heads: int, conv_kernel: int):
        self.ln_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.ln_conv = LayerNorm(d)
        self.conv_dw = _uniform(rng, (conv_kernel, d), 1.0 / np.sqrt(conv_kernel))
        self.conv_pw = Linear(rng, d, d)
        self.ln_ffn = LayerNorm(d)
        self.ffn = FeedForward(rng, d)

    def __call__(self, x: Tensor, ctx: RunContext | None) -> Tensor:
        h = self.ln_attn(x)
        x = ad.add(x, _drop(self.attn(h, h), ctx))
        c = ad.gelu(ad.depthwise_conv1d(self.ln_conv(x), self.conv_dw))
        x = ad.add(x, _drop(self.conv_pw(c), ctx))
        x = ad.add(x, _drop(self.ffn(self.ln_ffn(x)), ctx))
        return x


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.d_model
        self.sub = Subsampler(rng, cfg.feature_dim, d)
        self.pos = _uniform(rng, (cfg.max_positions, d), 0.02)
        self.layers = [
            EncoderLayer(rng, d, cfg.n_heads, cfg.conv_kernel)
            for _ in range(cfg.n_encoder_layers)
        ]
        self.ln_out = LayerNorm(d)
        self.max_positions = cfg.max_positions

    def __call__(self, frames: np.ndarray, ctx: RunContext | None = None) -> Tensor:
        x = self.sub(Tensor(frames))
        n = x.shape[0]
        if n > self.max_positions:
            raise ValueError(f"{n} encoder positions exceed table size {self.max_positions}")
        x = ad.add(x, ad.embedding(self.pos, np.arange(n)))
        x = _drop(x, ctx)
        for layer in self.layers:
            x = layer(x, ctx)
        return self.ln_out(x)


class DecoderLayer(Module):
    def __init__(self, rng, d: int, n_heads: int):
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, n_heads)
        self.ln_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, n_heads)
        self.ln_ffn = LayerNorm(d)
        self.ffn = FeedForward(rng, d)

    def __call__(
        self, x: Tensor, memory: Tensor, ctx: RunContext | None, self_mask=None
    ) -> Tensor:
        h = self.ln_self(x)
        x = ad.add(x, _drop(self.self_attn(h, h, mask=self_mask), ctx))
        x = ad.add(x, _drop(self.cross_attn(self.ln_cross(x), memory), ctx))
        x = ad.add(x, _drop(self.ffn(self.ln_ffn(x)), ctx))
        return x


class NarModel(Module):
    """Parallel unit decoder over an upsampled encoder; one forward pass per
    utterance produces the whole log-probability lattice."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg)
        self.dec_pos = _uniform(rng, (cfg.max_positions, d), 0.02)
        # Token embeddings used only for glancing substitution; the blank has
        # its own row at index n_units.
        self.glance_emb = _uniform(rng, (cfg.n_units + 1, d), 1.0 / np.sqrt(d))
        self.dec_layers = [
            DecoderLayer(rng, d, cfg.n_heads) for _ in range(cfg.n_decoder_layers)
        ]
        self.ln_out = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.n_units + 1)
        _assign_names(self)

    def encode(self, frames: np.ndarray, ctx: RunContext | None = None) -> Tensor:
        return self.encoder(frames, ctx)

    def decoder_input(self, h: Tensor) -> Tensor:
        """Upsampled encoder states, before positions are added (glancing
        replaces rows of this tensor)."""
        return ad.repeat_rows(h, self.cfg.upsample_factor)

    def decode_from_input(
        self, e: Tensor, h: Tensor, ctx: RunContext | None = None
    ) -> Tensor:
        t_len = e.shape[0]
        if t_len > self.cfg.max_positions:
            raise ValueError(
                f"{t_len} decoder positions exceed table size {self.cfg.max_positions}"
            )
        x = ad.add(e, ad.embedding(self.dec_pos, np.arange(t_len)))
        x = _drop(x, ctx)
        for layer in self.dec_layers:
            x = layer(x, h, ctx)
        return ad.log_softmax(self.proj(self.ln_out(x)), axis=-1)

    def forward_lattice(self, frames: np.ndarray, ctx: RunContext | None = None) -> Tensor:
        """Training path: full differentiable pass to the log-lattice."""
        h = self.encode(frames, ctx)
        return self.decode_from_input(self.decoder_input(h), h, ctx)

    def decode_lattice(self, frames: np.ndarray) -> LogProbLattice:
        with ad.no_grad():
            return LogProbLattice(self.forward_lattice(frames).data)

    def greedy_units(self, frames: np.ndarray) -> tuple[list[int], int]:
        """Decode units in one pass; returns (units, decoder forward count)."""
        lattice = self.decode_lattice(frames)
        return greedy_decode(lattice, validate=False), 1


@dataclass
class ArDecodeMeta:
    steps: int  # generation iterations that emitted a unit (== len(units))
    decoder_calls: int  # total decoder forward passes, incl. the stop pass
    eos_terminated: bool
    truncated: bool


class ArModel(Module):
    """Autoregressive baseline sharing the NAR encoder; decodes one unit per
    step with begin/end-of-sequence ids K and K+1 internal to its head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg)
        self.tok_emb = _uniform(rng, (cfg.n_units + 2, d), 1.0 / np.sqrt(d))
        self.dec_pos = _uniform(rng, (cfg.max_positions, d), 0.02)
        self.dec_layers = [
            DecoderLayer(rng, d, cfg.n_heads) for _ in range(cfg.n_decoder_layers)
        ]
        self.ln_out = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.n_units + 2)
        _assign_names(self)

    @property
    def bos_id(self) -> int:
        return self.cfg.n_units

    @property
    def eos_id(self) -> int:
        return self.cfg.n_units + 1

    def encode(self, frames: np.ndarray, ctx: RunContext | None = None) -> Tensor:
        return self.encoder(frames, ctx)

    def forward_logprobs(
        self, tokens, h: Tensor, ctx: RunContext | None = None
    ) -> Tensor:
        """Causal decoder over a token prefix; (L, K+2) log-probabilities."""
        tokens = np.asarray(tokens, dtype=np.intp)
        length = tokens.shape[0]
        if length > self.cfg.max_positions:
            raise ValueError(
                f"prefix of {length} tokens exceeds table size {self.cfg.max_positions}"
            )
        x = ad.add(ad.embedding(self.tok_emb, tokens), ad.embedding(self.dec_pos, np.arange(length)))
        x = _drop(x, ctx)
        causal = np.triu(np.full((length, length), -np.inf), k=1)
        for layer in self.dec_layers:
            x = layer(x, h, ctx, self_mask=causal)
        return ad.log_softmax(self.proj(self.ln_out(x)), axis=-1)

    def step_distribution(self, prefix_units, h: Tensor) -> np.ndarray:
        """Next-symbol distribution (K+2,) given already-emitted units."""
        with ad.no_grad():
            tokens = [self.bos_id] + list(prefix_units)
            logp = self.forward_logprobs(tokens, h)
            return np.exp(logp.data[-1])

    def greedy_decode(self, frames: np.ndarray) -> tuple[list[int], ArDecodeMeta]:
        """Greedy generation until end-of-sequence or the 2*T length cap.

        Each iteration re-runs the decoder on the grown prefix; the pass that
        produces the end symbol is counted in decoder_calls but not in steps.
        """
        with ad.no_grad():
            h = self.encode(frames)
            cap = max(1, 2 * self.cfg.upsample_factor * (frames.shape[0] // 4))
            units: list[int] = []
            calls = 0
            eos = False
            truncated = False
            while True:
                tokens = [self.bos_id] + units
                logp = self.forward_logprobs(tokens, h)
                calls += 1
                row = logp.data[-1].copy()
                row[self.bos_id] = -np.inf  # bos is never a valid emission
                nxt = int(np.argmax(row))
                if nxt == self.eos_id:
                    eos = True
                    break
                units.append(nxt)
                if len(units) >= cap:
                    truncated = True
                    break
            meta = ArDecodeMeta(
                steps=len(units), decoder_calls=calls, eos_terminated=eos, truncated=truncated
            )
            return units, meta


def _assign_names(model: Module) -> None:
    for name, p in model.named_parameters():
        p.name = name


def build_model(cfg: ModelConfig, seed: int = 0) -> NarModel | ArModel:
    if cfg.variant == "nar":
        return NarModel(cfg, seed=seed)
    return ArModel(cfg, seed=seed)


def transfer_encoder(src: ArModel | NarModel, dst: ArModel | NarModel):
    """Copy every encoder parameter from src into dst by name (deep copy).

    Rejects the transfer naming the first differing config field; afterwards
    asserts every encoder parameter on both sides was matched exactly once.
    """
    for field in ENCODER_COMPAT_FIELDS:
        a, b = getattr(src.cfg, field), getattr(dst.cfg, field)
        if a != b:
            raise ValueError(f"encoder config mismatch on {field}: {a} != {b}")
    src_params = {n: p for n, p in src.named_parameters() if n.startswith("encoder.")}
    dst_params = {n: p for n, p in dst.named_parameters() if n.startswith("encoder.")}
    if set(src_params) != set(dst_params):
        missing = set(src_params) ^ set(dst_params)
        raise ValueError(f"encoder parameter sets differ: {sorted(missing)}")
    for name, p in dst_params.items():
        p.data[...] = src_params[name].data
    return dst


# ---------------------------------------------------------------------------
# checkpoint file format: magic "CS2U", u32 version, u32 json-config length,
# config json, u32 parameter count, then per parameter: u32 name length,
# name, u32 ndim, ndim * u32 dims, raw little-endian float64 data (C order).


def save_checkpoint(path: str, model: Module) -> None:
    cfg = model.cfg  # type: ignore[attr-defined]
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
    params = model.named_parameters()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name, p in params:
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data).astype("<f8").tobytes())
    os.replace(tmp, path)


def _read_exact(f, n: int, path: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise ValueError(f"{path}: truncated checkpoint")
    return raw


def load_checkpoint(path: str, expected_config: ModelConfig | None = None):
    """Rebuild a model from a checkpoint; validates magic, version, and (when
    given) every field of the expected config."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, path))
        cfg = ModelConfig(**json.loads(_read_exact(f, blob_len, path).decode("utf-8")))
        if expected_config is not None:
            for field in dataclasses.fields(ModelConfig):
                a = getattr(cfg, field.name)
                b = getattr(expected_config, field.name)
                if a != b:
                    raise ValueError(
                        f"{path}: checkpoint config field {field.name} is {a!r}, "
                        f"expected {b!r}"
                    )
        model = build_model(cfg)
        stored: dict[str, np.ndarray] = {}
        (count,) = struct.unpack("<I", _read_exact(f, 4, path))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, path))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, path))
            n_items = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(f, 8 * n_items, path)
            stored[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    params = dict(model.named_parameters())
    if set(params) != set(stored):
        missing = set(params) ^ set(stored)
        raise ValueError(f"{path}: parameter names do not match model: {sorted(missing)}")
    for name, p in params.items():
        if p.data.shape != stored[name].shape:
            raise ValueError(
                f"{path}: parameter {name!r} has shape {stored[name].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data[...] = stored[name]
    return model
