"""The hybrid encoder: long-range segment transformer + short-range graph TCN.

The long branch embeds non-overlapping segments of the full history and
runs them through stacked self-attention layers, keeping the latest
segment's contextual vector. The short branch runs the last segment
through gated dilated causal convolutions interleaved with diffusion
graph convolutions over the node dimension. Branch outputs are fused by
two small MLPs into the representation that doubles as the retrieval
key, and a head MLP maps it to the forecast.

``mode`` selects the hybrid encoder or the long-only / short-only
ablations; the unused branch is never evaluated (and its parameters are
never created), so each ablation provably reads only its own inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import graph as G
from . import tensor as T
from .data import WindowBatch
from .errors import ConfigError, ContractError, DimensionError, StoreLoadError
from .tensor import Tensor

MODES = ("hybrid", "long_only", "short_only")
KEY_TAPS = ("fusion_output", "head_hidden_linear", "head_hidden_relu")

KMTW_MAGIC = b"KMTW"
KMTW_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_nodes: int
    input_len: int = 2016
    seg_len: int = 12
    horizon: int = 12
    channels: int = 1
    d_model: int = 96
    n_heads: int = 4
    n_transformer_layers: int = 4
    ffn_mult: int = 4
    short_layers: int = 4
    filter_len: int = 2
    dilations: tuple[int, ...] = (1, 2, 1, 2)
    diffusion_order: int = 2
    adaptive_dim: int = 10
    mode: str = "hybrid"
    key_tap: str = "fusion_output"
    use_graph: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.input_len % self.seg_len != 0:
            raise ConfigError(
                f"input_len {self.input_len} not divisible by seg_len {self.seg_len}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.key_tap not in KEY_TAPS:
            raise ConfigError(f"key_tap must be one of {KEY_TAPS}, got {self.key_tap!r}")
        if len(self.dilations) != self.short_layers:
            raise ConfigError(
                f"{self.short_layers} short layers but {len(self.dilations)} dilations")
        if self.mode != "long_only" and self.receptive_field > self.seg_len:
            raise ConfigError(
                f"short-branch receptive field {self.receptive_field} exceeds "
                f"seg_len {self.seg_len}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def n_segments(self) -> int:
        return self.input_len // self.seg_len

    @property
    def receptive_field(self) -> int:
        return 1 + sum(a * (self.filter_len - 1) for a in self.dilations)

    @property
    def uses_long(self) -> bool:
        return self.mode in ("hybrid", "long_only")

    @property
    def uses_short(self) -> bool:
        return self.mode in ("hybrid", "short_only")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["dilations"] = list(d["dilations"])
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        d = json.loads(text)
        d["dilations"] = tuple(d["dilations"])
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Create every learnable weight the configured mode will touch.

    Linear weights are Xavier-uniform, biases truncated normal (std 0.02),
    positional embeddings uniform, layer-norm gain/bias at (1, 0).
    """
    d = cfg.d_model
    p: dict[str, Tensor] = {}

    def linear(name: str, n_in: int, n_out: int) -> None:
        p[f"{name}.W"] = T.xavier_uniform_init(rng, (n_in, n_out))
        p[f"{name}.b"] = T.trunc_normal_init(rng, (n_out,))

    if cfg.uses_long:
        linear("seg", cfg.seg_len * cfg.channels, d)
        p["seg.pos"] = T.uniform_init(rng, (cfg.n_segments, d))
        for i in range(cfg.n_transformer_layers):
            for proj in ("q", "k", "v", "o"):
                linear(f"tr{i}.{proj}", d, d)
            linear(f"tr{i}.ffn1", d, cfg.ffn_mult * d)
            linear(f"tr{i}.ffn2", cfg.ffn_mult * d, d)
            for ln in ("ln1", "ln2"):
                p[f"tr{i}.{ln}.g"] = T.Tensor(np.ones(d), requires_grad=True)
                p[f"tr{i}.{ln}.b"] = T.zeros_init((d,))
        linear("fuse.l1", d, d)
        linear("fuse.l2", d, d)

    if cfg.uses_short:
        linear("short.in", cfg.channels, d)
        for l in range(cfg.short_layers):
            for conv in ("filt", "gate"):
                p[f"short{l}.{conv}.W"] = T.xavier_uniform_init(
                    rng, (cfg.filter_len, d, d))
                p[f"short{l}.{conv}.b"] = T.trunc_normal_init(rng, (d,))
            supports = ("f", "b", "a") if cfg.use_graph else ("a",)
            for s in supports:
                for k in range(cfg.diffusion_order + 1):
                    p[f"short{l}.gc.{s}{k}"] = T.xavier_uniform_init(rng, (d, d))
            linear(f"short{l}.skip", d, d)
        p["adapt.E1"] = T.uniform_init(rng, (cfg.n_nodes, cfg.adaptive_dim), scale=1.0)
        p["adapt.E2"] = T.uniform_init(rng, (cfg.n_nodes, cfg.adaptive_dim), scale=1.0)
        linear("fuse.s1", d, d)
        linear("fuse.s2", d, d)

    linear("head.1", d, d)
    linear("head.2", d, cfg.horizon * cfg.channels)
    return p


def parameter_groups(params: dict[str, Tensor]) -> dict[str, list[str]]:
    """Group parameter names by architectural role (for gradient checks)."""
    groups: dict[str, list[str]] = {}

    def bucket(name: str) -> str:
        if name.startswith("seg."):
            return "segment_embed"
        if name.startswith("tr"):
            return "transformer"
        if ".gc." in name:
            return "graph_conv"
        if name.startswith(("short.", "short")):
            return "short_conv"
        if name.startswith("adapt."):
            return "adaptive_adjacency"
        if name.startswith("fuse."):
            return "fusion"
        return "head"

    for name in sorted(params):
        groups.setdefault(bucket(name), []).append(name)
    return groups


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def segment_embed(params: dict[str, Tensor], cfg: EncoderConfig, x) -> Tensor:
    """Affine-map each non-overlapping segment and add its positional vector.

    Accepts (L, C) for one series or (B, L, C) for a batch.
    """
    xt = x if isinstance(x, Tensor) else T.Tensor(x)
    single = xt.ndim == 2
    if single:
        xt = T.reshape(xt, (1,) + xt.shape)
    b, length, c = xt.shape
    if length != cfg.input_len or c != cfg.channels:
        raise ConfigError(
            f"expected input ({cfg.input_len}, {cfg.channels}), got ({length}, {c})")
    segs = T.reshape(xt, (b, cfg.n_segments, cfg.seg_len * c))
    out = T.matmul(segs, params["seg.W"]) + params["seg.b"] + params["seg.pos"]
    return T.take(out, 0) if single else out


def transformer_layer(
    params: dict[str, Tensor], cfg: EncoderConfig, i: int, x: Tensor,
    rng: np.random.Generator | None = None, return_attention: bool = False,
):
    """Post-norm residual block: LN(x + MSA(x)) then LN(u + FFN(u))."""
    b, n_seg, d = x.shape
    dh = d // cfg.n_heads

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n_seg, cfg.n_heads, dh)), (0, 2, 1, 3))

    q = heads(T.matmul(x, params[f"tr{i}.q.W"]) + params[f"tr{i}.q.b"])
    k = heads(T.matmul(x, params[f"tr{i}.k.W"]) + params[f"tr{i}.k.b"])
    v = heads(T.matmul(x, params[f"tr{i}.v.W"]) + params[f"tr{i}.v.b"])

    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                   T.constant(1.0 / np.sqrt(dh)))
    attention = T.softmax(scores, axis=-1)
    ctx = T.matmul(attention, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n_seg, d))
    msa = T.matmul(ctx, params[f"tr{i}.o.W"]) + params[f"tr{i}.o.b"]
    if cfg.dropout > 0 and rng is not None:
        msa = T.dropout(msa, cfg.dropout, rng)

    u = T.layer_norm(x + msa, params[f"tr{i}.ln1.g"], params[f"tr{i}.ln1.b"])

    h = T.relu(T.matmul(u, params[f"tr{i}.ffn1.W"]) + params[f"tr{i}.ffn1.b"])
    ff = T.matmul(h, params[f"tr{i}.ffn2.W"]) + params[f"tr{i}.ffn2.b"]
    if cfg.dropout > 0 and rng is not None:
        ff = T.dropout(ff, cfg.dropout, rng)

    out = T.layer_norm(u + ff, params[f"tr{i}.ln2.g"], params[f"tr{i}.ln2.b"])
    if return_attention:
        return out, attention.data
    return out


def long_branch(
    params: dict[str, Tensor], cfg: EncoderConfig, x,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Segment-transformer over the full history; returns the final
    segment's contextual representation, (B, d)."""
    h = segment_embed(params, cfg, x)
    if h.ndim == 2:
        h = T.reshape(h, (1,) + h.shape)
    for i in range(cfg.n_transformer_layers):
        h = transformer_layer(params, cfg, i, h, rng=rng)
    return T.take(h, (slice(None), -1))


def dilated_causal_conv(x, weights, bias=None, dilation: int = 1) -> Tensor:
    """Causal convolution with dilation gaps and no padding.

    ``x`` is (..., steps, d_in); ``weights`` is (taps, d_in, d_out);
    output keeps only positions whose every tap is in range, i.e.
    steps - dilation*(taps-1) positions.
    """
    xt = x if isinstance(x, Tensor) else T.Tensor(x)
    wt = weights if isinstance(weights, Tensor) else T.Tensor(weights)
    taps = wt.shape[0]
    steps = xt.shape[-2]
    span = dilation * (taps - 1)
    if steps <= span:
        raise DimensionError(
            f"sequence of {steps} steps shorter than receptive span; "
            f"need at least {span + 1}")
    out_len = steps - span
    ndim = xt.ndim
    out = None
    for m in range(taps):
        lo = span - dilation * m
        idx = (slice(None),) * (ndim - 2) + (slice(lo, lo + out_len), slice(None))
        term = T.matmul(T.take(xt, idx), T.take(wt, m))
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out


def gated_tcn(
    params: dict[str, Tensor], layer: int, x: Tensor, dilation: int,
) -> Tensor:
    """tanh(filter conv) gated by sigmoid(gate conv)."""
    filt = dilated_causal_conv(x, params[f"short{layer}.filt.W"],
                               params[f"short{layer}.filt.b"], dilation)
    gate = dilated_causal_conv(x, params[f"short{layer}.gate.W"],
                               params[f"short{layer}.gate.b"], dilation)
    return T.mul(T.tanh(filt), T.sigmoid(gate))


def graph_conv(z: Tensor, supports: list[tuple[list[Tensor], list[Tensor]]]) -> Tensor:
    """Diffusion convolution: sum over supports and powers of Pᵏ Z W_k.

    ``z`` is (..., N, d); each support is (power list [P⁰..P^B], weight
    list of matching length).
    """
    out = None
    for powers, weights in supports:
        if powers[0].shape[0] != z.shape[-2]:
            raise DimensionError(
                f"graph has {powers[0].shape[0]} nodes, input has {z.shape[-2]}")
        for pk, w in zip(powers, weights):
            term = T.matmul(T.matmul(pk, z), w)
            out = term if out is None else out + term
    return out


def _build_supports(
    params: dict[str, Tensor], cfg: EncoderConfig, layer: int,
    graph: G.DependencyGraph | None, adaptive_powers: list[Tensor],
) -> list[tuple[list[Tensor], list[Tensor]]]:
    order = cfg.diffusion_order
    supports = []
    if cfg.use_graph:
        if graph is None:
            raise ContractError("config expects a predefined graph but none was given")
        fwd, bwd = graph.power_series(order)
        supports.append(([T.constant(m) for m in fwd],
                         [params[f"short{layer}.gc.f{k}"] for k in range(order + 1)]))
        supports.append(([T.constant(m) for m in bwd],
                         [params[f"short{layer}.gc.b{k}"] for k in range(order + 1)]))
    supports.append((adaptive_powers,
                     [params[f"short{layer}.gc.a{k}"] for k in range(order + 1)]))
    return supports


def short_branch(
    params: dict[str, Tensor], cfg: EncoderConfig, s,
    graph: G.DependencyGraph | None = None,
) -> Tensor:
    """Gated dilated-conv + graph-conv stack over the last segment.

    ``s`` is (B, N, L_s, C) with the full node set; returns (B, N, d) as
    the sum of per-layer skip projections taken at the last surviving
    timestep.
    """
    st = s if isinstance(s, Tensor) else T.Tensor(s)
    if st.ndim != 4:
        raise DimensionError(f"short branch expects (B, N, L_s, C), got {st.shape}")
    if st.shape[1] != cfg.n_nodes:
        raise ContractError(
            f"short branch needs all {cfg.n_nodes} nodes jointly, got {st.shape[1]}")
    if st.shape[2] < cfg.receptive_field:
        raise DimensionError(
            f"short input of {st.shape[2]} steps is below the receptive "
            f"field {cfg.receptive_field}")

    adaptive = G.adaptive_adjacency(params["adapt.E1"], params["adapt.E2"])
    adaptive_powers = G.tensor_power_series(adaptive, cfg.diffusion_order)

    x = T.matmul(st, params["short.in.W"]) + params["short.in.b"]
    skip_sum = None
    for layer, dilation in enumerate(cfg.dilations):
        z = gated_tcn(params, layer, x, dilation)
        tap = T.take(z, (slice(None), slice(None), -1))
        skip = T.matmul(tap, params[f"short{layer}.skip.W"]) \
            + params[f"short{layer}.skip.b"]
        skip_sum = skip if skip_sum is None else skip_sum + skip

        supports = _build_supports(params, cfg, layer, graph, adaptive_powers)
        mixed = graph_conv(T.transpose(z, (0, 2, 1, 3)), supports)
        mixed = T.transpose(mixed, (0, 2, 1, 3))
        span = dilation * (cfg.filter_len - 1)
        x = mixed + T.take(x, (slice(None), slice(None), slice(span, None)))
    return skip_sum


def _mlp(params: dict[str, Tensor], prefix: tuple[str, str], x: Tensor) -> Tensor:
    first, second = prefix
    h = T.relu(T.matmul(x, params[f"{first}.W"]) + params[f"{first}.b"])
    return T.matmul(h, params[f"{second}.W"]) + params[f"{second}.b"]


@dataclass
class EncoderOutput:
    key: Tensor        # (B*N, d) representation used as datastore key / query
    forecast: Tensor   # (B*N, T_f*C) in normalized space
    fused: Tensor

    def forecast_rows(self) -> np.ndarray:
        return self.forecast.data


def encode_and_predict(
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    batch: WindowBatch,
    graph: G.DependencyGraph | None = None,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Run the configured branches over a node-complete window batch.

    Output rows are ordered batch-major then node (row = b * N + n).
    The returned ``key`` is the configured tap; by default the fused
    representation that the head consumes.
    """
    b, n = batch.long_x.shape[:2]
    if cfg.uses_short and n != cfg.n_nodes:
        raise ContractError(
            f"{cfg.mode} mode needs node-complete batches: got {n} of {cfg.n_nodes}")

    parts = []
    if cfg.uses_long:
        flat = batch.long_x.reshape(b * n, cfg.input_len, cfg.channels)
        h_long = long_branch(params, cfg, flat, rng=rng)
        parts.append(_mlp(params, ("fuse.l1", "fuse.l2"), h_long))
    if cfg.uses_short:
        h_short = short_branch(params, cfg, batch.short_x, graph)
        h_short = T.reshape(h_short, (b * n, cfg.d_model))
        parts.append(_mlp(params, ("fuse.s1", "fuse.s2"), h_short))

    fused = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    hidden_lin = T.matmul(fused, params["head.1.W"]) + params["head.1.b"]
    hidden_relu = T.relu(hidden_lin)
    forecast = T.matmul(hidden_relu, params["head.2.W"]) + params["head.2.b"]

    key = {"fusion_output": fused,
           "head_hidden_linear": hidden_lin,
           "head_hidden_relu": hidden_relu}[cfg.key_tap]
    return EncoderOutput(key=key, forecast=forecast, fused=fused)


# ---------------------------------------------------------------------------
# checkpoint serialization (kmtw)
# ---------------------------------------------------------------------------

def checkpoint_bytes(params: dict[str, Tensor], cfg: EncoderConfig) -> bytes:
    """Serialize config + parameters; canonical bytes, CRC32 footer."""
    out = bytearray()
    out += KMTW_MAGIC
    out += struct.pack("<H", KMTW_VERSION)
    blob = cfg.to_json().encode()
    out += struct.pack("<I", len(blob))
    out += blob
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        t = params[name]
        enc = name.encode()
        out += struct.pack("<H", len(enc))
        out += enc
        out += struct.pack("<I", t.ndim)
        for dim in t.shape:
            out += struct.pack("<I", dim)
        out += t.data.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(params: dict[str, Tensor], cfg: EncoderConfig, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params, cfg))


def load_checkpoint(path) -> tuple[dict[str, Tensor], EncoderConfig]:
    with open(path, "rb") as f:
        blob = f.read()
    return parse_checkpoint(blob, source=str(path))


def parse_checkpoint(blob: bytes, source: str = "<bytes>"
                     ) -> tuple[dict[str, Tensor], EncoderConfig]:
    off = 0

    def need(n: int) -> int:
        nonlocal off
        if off + n > len(blob):
            raise StoreLoadError(f"{source}: truncated at offset {off}")
        off += n
        return off - n

    start = need(4)
    if blob[start:start + 4] != KMTW_MAGIC:
        raise StoreLoadError(f"{source}: bad magic at offset 0")
    (version,) = struct.unpack_from("<H", blob, need(2))
    if version != KMTW_VERSION:
        raise StoreLoadError(f"{source}: unsupported version {version}")
    if len(blob) < 8:
        raise StoreLoadError(f"{source}: truncated file")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    crc_actual = zlib.crc32(blob[:-4])
    if crc_stored != crc_actual:
        raise StoreLoadError(
            f"{source}: CRC mismatch at offset {len(blob) - 4} "
            f"(stored {crc_stored:#010x}, computed {crc_actual:#010x})")

    (cfg_len,) = struct.unpack_from("<I", blob, need(4))
    try:
        cfg = EncoderConfig.from_json(blob[need(cfg_len):][:cfg_len].decode())
    except (json.JSONDecodeError, TypeError, KeyError) as e:
        raise StoreLoadError(f"{source}: bad config block: {e}") from None
    (count,) = struct.unpack_from("<I", blob, need(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, need(2))
        name = blob[need(name_len):][:name_len].decode()
        (rank,) = struct.unpack_from("<I", blob, need(4))
        dims = struct.unpack_from(f"<{rank}I", blob, need(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        start = need(8 * size)
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=start)
        params[name] = Tensor(arr.reshape(dims).copy(), requires_grad=True)
    if off != len(blob) - 4:
        raise StoreLoadError(f"{source}: {len(blob) - 4 - off} trailing bytes")
    return params, cfg


def fingerprint(params: dict[str, Tensor], cfg: EncoderConfig) -> bytes:
    """SHA-256 of the canonical checkpoint bytes (32 bytes)."""
    return hashlib.sha256(checkpoint_bytes(params, cfg)).digest()
