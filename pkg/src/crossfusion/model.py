"""The fusion architecture: cross-attention blocks, pad-transformers, conv
fusion, class-token survival head, ablation variants, and checkpoint I/O.

Data flow (``full`` variant), all sequences at the shared width ``d_e``:

    coarse/source/fine --proj--> X_C, X_S, X_F
    X'_C = CAB(X_S, X_C)        X'_F = CAB(X_S, X_F)       (source is the query)
    fused = ConvProcessor(PT(X'_C), PT(X_S), PT(X'_F))
    [class_token; fused] --PT--> LayerNorm --token 0--> MLP head
    hazards = sigmoid(logits); survival = running product of (1 - hazard)

``no_cp`` replaces the ConvProcessor with concatenation plus a linear
projection; ``no_fc`` drops the cross-scale branches and runs the fine-scale
patches through the source pathway alone.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, FormatError, InputError
from .layers import (
    AttentionParams,
    FeedForwardParams,
    LayerNormParams,
    LinearParams,
    TransformerBlockParams,
    feed_forward,
    init_attention,
    init_feed_forward,
    init_layer_norm,
    init_linear,
    init_transformer_block,
    linear,
    multi_head_attention,
    named_params,
    transformer_block,
)
from .tensor import DropoutRng, Tensor

VARIANTS = ("full", "no_cp", "no_fc")

CHECKPOINT_MAGIC = b"XFCKPT1"


@dataclass
class ModelConfig:
    d_in: int
    d_e: int = 16
    n_heads: int = 4
    ffn_mult: int = 2
    dropout: float = 0.1
    n_bins: int = 4
    variant: str = "full"

    def __post_init__(self):
        if self.d_e % 2 != 0:
            raise ConfigError(f"d_e must be even (conv fusion halves it), got {self.d_e}")
        if self.d_e % self.n_heads != 0:
            raise ConfigError(f"d_e={self.d_e} not divisible by n_heads={self.n_heads}")
        if self.n_bins < 2:
            raise ConfigError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class Conv2dParams:
    weight: Tensor  # [c_out, c_in_per_group, k, k]
    bias: Tensor  # [c_out]


@dataclass
class Conv3dParams:
    weight: Tensor  # [3, kd, kh, kw]
    bias: Tensor  # [1]


@dataclass
class PPEGParams:
    conv7: Conv2dParams
    conv5: Conv2dParams
    conv3: Conv2dParams


@dataclass
class PadTransformerParams:
    block1: TransformerBlockParams
    block2: TransformerBlockParams
    ppeg: PPEGParams


@dataclass
class CABParams:
    scale_embedding: Tensor  # [1, d_e]
    attn: AttentionParams
    norm1: LayerNormParams
    norm2: LayerNormParams
    ffn: FeedForwardParams


@dataclass
class ConvProcessorParams:
    fuse3d: Conv3dParams
    ms7: Conv2dParams
    ms5: Conv2dParams
    ms3: Conv2dParams
    ms1: Conv2dParams
    out_proj: LinearParams  # [d_e, d_e/2]
    out_norm: LayerNormParams


@dataclass
class ModelParams:
    """All learnable state. Fields unused by a variant are None; the
    depth-first field order below is the checkpoint serialization order."""

    proj_coarse: LinearParams | None
    proj_source: LinearParams
    proj_fine: LinearParams | None
    cab_coarse: CABParams | None
    cab_fine: CABParams | None
    pt_coarse: PadTransformerParams | None
    pt_source: PadTransformerParams
    pt_fine: PadTransformerParams | None
    conv_processor: ConvProcessorParams | None
    fuse_proj: LinearParams | None
    pt_final: PadTransformerParams
    class_token: Tensor
    final_norm: LayerNormParams
    mlp_head: LinearParams


@dataclass
class SurvivalOutput:
    logits: Tensor  # [n_bins]
    hazards: Tensor  # [n_bins], each in (0, 1)
    survival: Tensor  # [n_bins], non-increasing running product of (1 - hazard)
    attention_maps: dict[str, Tensor] | None = None


# -- initialization -----------------------------------------------------------


def _init_conv2d(rng: np.random.Generator, c_out: int, c_in_g: int, k: int) -> Conv2dParams:
    bound = 1.0 / math.sqrt(c_in_g * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in_g, k, k))
    return Conv2dParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(c_out), requires_grad=True),
    )


def _init_conv3d(rng: np.random.Generator, k: int = 3) -> Conv3dParams:
    bound = 1.0 / math.sqrt(3 * k * k * k)
    w = rng.uniform(-bound, bound, size=(3, k, k, k))
    return Conv3dParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(1), requires_grad=True),
    )


def _init_ppeg(rng: np.random.Generator, d: int) -> PPEGParams:
    return PPEGParams(
        conv7=_init_conv2d(rng, d, 1, 7),
        conv5=_init_conv2d(rng, d, 1, 5),
        conv3=_init_conv2d(rng, d, 1, 3),
    )


def _init_pad_transformer(rng: np.random.Generator, cfg: ModelConfig) -> PadTransformerParams:
    return PadTransformerParams(
        block1=init_transformer_block(rng, cfg.d_e, cfg.n_heads, cfg.ffn_mult, cfg.dropout),
        block2=init_transformer_block(rng, cfg.d_e, cfg.n_heads, cfg.ffn_mult, cfg.dropout),
        ppeg=_init_ppeg(rng, cfg.d_e),
    )


def _init_cab(rng: np.random.Generator, cfg: ModelConfig) -> CABParams:
    return CABParams(
        scale_embedding=Tensor(rng.normal(0.0, 0.02, size=(1, cfg.d_e)), requires_grad=True),
        attn=init_attention(rng, cfg.d_e, cfg.n_heads),
        norm1=init_layer_norm(cfg.d_e),
        norm2=init_layer_norm(cfg.d_e),
        ffn=init_feed_forward(rng, cfg.d_e, cfg.ffn_mult),
    )


def _init_conv_processor(rng: np.random.Generator, cfg: ModelConfig) -> ConvProcessorParams:
    d = cfg.d_e
    half = d // 2
    return ConvProcessorParams(
        fuse3d=_init_conv3d(rng, 3),
        ms7=_init_conv2d(rng, half, 2, 7),
        ms5=_init_conv2d(rng, half, 2, 5),
        ms3=_init_conv2d(rng, half, 2, 3),
        ms1=_init_conv2d(rng, half, 2, 1),
        out_proj=init_linear(rng, d, half),
        out_norm=init_layer_norm(d),
    )


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    cross_scale = cfg.variant in ("full", "no_cp")
    return ModelParams(
        proj_coarse=init_linear(rng, cfg.d_e, cfg.d_in) if cross_scale else None,
        proj_source=init_linear(rng, cfg.d_e, cfg.d_in),
        proj_fine=init_linear(rng, cfg.d_e, cfg.d_in) if cross_scale else None,
        cab_coarse=_init_cab(rng, cfg) if cross_scale else None,
        cab_fine=_init_cab(rng, cfg) if cross_scale else None,
        pt_coarse=_init_pad_transformer(rng, cfg) if cross_scale else None,
        pt_source=_init_pad_transformer(rng, cfg),
        pt_fine=_init_pad_transformer(rng, cfg) if cross_scale else None,
        conv_processor=_init_conv_processor(rng, cfg) if cfg.variant == "full" else None,
        fuse_proj=init_linear(rng, cfg.d_e, cfg.d_e) if cfg.variant == "no_cp" else None,
        pt_final=_init_pad_transformer(rng, cfg),
        class_token=Tensor(rng.normal(0.0, 0.02, size=(1, cfg.d_e)), requires_grad=True),
        final_norm=init_layer_norm(cfg.d_e),
        mlp_head=init_linear(rng, cfg.n_bins, cfg.d_e),
    )


def zero_grads(params: ModelParams) -> None:
    for _, t in named_params(params):
        t.grad = None


# -- architecture pieces --------------------------------------------------------


def _wrap_pad(x: Tensor) -> tuple[Tensor, int]:
    """Extend [N, D] to the next square length H*H by wrapping tokens from the front."""
    n = x.shape[0]
    if n < 1:
        raise InputError("square padding requires a non-empty sequence")
    h = math.isqrt(n)
    if h * h < n:
        h += 1
    pad = h * h - n
    if pad == 0:
        return x, h
    return T.concat([x, T.narrow(x, 0, pad)], axis=0), h


def square_pad(x: Tensor) -> tuple[Tensor, int]:
    """[N, D] -> row-major grid [H, W, D] with wrap-around padding; H = W = ceil(sqrt(N))."""
    seq, h = _wrap_pad(x)
    return T.reshape(seq, (h, h, x.shape[1])), x.shape[0]


def ppeg(grid: Tensor, p: PPEGParams) -> Tensor:
    """Sum of three depth-wise convolutions (7/5/3) plus the identity branch."""
    d = grid.shape[0]
    c7 = T.grouped_conv2d(grid, p.conv7.weight, p.conv7.bias, groups=d)
    c5 = T.grouped_conv2d(grid, p.conv5.weight, p.conv5.bias, groups=d)
    c3 = T.grouped_conv2d(grid, p.conv3.weight, p.conv3.bias, groups=d)
    return c7 + c5 + c3 + grid


def pad_transformer(
    x: Tensor,
    p: PadTransformerParams,
    dropout_rng: DropoutRng | None = None,
    return_weights: bool = False,
) -> tuple[Tensor, Tensor | None]:
    """Square-pad, transformer, PPEG over the grid, transformer, truncate to N.

    Returns the [N, D] output and, when asked, block2's attention weights
    over the padded sequence (used for heatmaps).
    """
    n, d = x.shape
    seq, h = _wrap_pad(x)
    s1, _ = transformer_block(p.block1, seq, dropout_rng)
    grid = T.transpose(T.reshape(s1, (h, h, d)), (2, 0, 1))
    spatial = ppeg(grid, p.ppeg)
    s2 = T.reshape(T.transpose(spatial, (1, 2, 0)), (h * h, d))
    s3, weights = transformer_block(p.block2, s2, dropout_rng, return_weights)
    out = T.narrow(s3, 0, n) if n < h * h else s3
    return out, weights


def cross_attention_block(
    x: Tensor,
    context: Tensor,
    p: CABParams,
    return_weights: bool = False,
) -> tuple[Tensor, Tensor | None]:
    """Queries from x, keys/values from context, both shifted by the scale embedding.

    Output keeps the query length: x1 = LN(x + Attn), out = LN(x1 + FFN(x1)).
    """
    q_in = x + p.scale_embedding
    kv_in = context + p.scale_embedding
    attn_out, weights = multi_head_attention(p.attn, q_in, kv_in, return_weights)
    x1 = T.layer_norm(x + attn_out, p.norm1.gamma, p.norm1.beta)
    out = T.layer_norm(x1 + feed_forward(p.ffn, x1), p.norm2.gamma, p.norm2.beta)
    return out, weights


def conv_processor(x1: Tensor, x2: Tensor, x3: Tensor, p: ConvProcessorParams) -> Tensor:
    """Stack three same-length sequences as grids, fuse with a 3-D conv, then
    sum four grouped convolutions (7/5/3/1) that halve the channel width, and
    restore the width with a linear projection plus layer norm.

    Output length is the padded square H*W.
    """
    if not (x1.shape == x2.shape == x3.shape):
        raise ContractError(
            f"conv_processor inputs must agree in shape, got {x1.shape}, {x2.shape}, {x3.shape}"
        )
    d = x1.shape[1]
    grids = []
    h = 0
    for x in (x1, x2, x3):
        seq, h = _wrap_pad(x)
        grid = T.transpose(T.reshape(seq, (h, h, d)), (2, 0, 1))
        grids.append(T.reshape(grid, (1, d, h, h)))
    stacked = T.concat(grids, axis=0)  # [3, D, H, W]
    fused = T.reshape(T.conv3d_fuse(stacked, p.fuse3d.weight, p.fuse3d.bias), (d, h, h))
    half = d // 2
    ms = (
        T.grouped_conv2d(fused, p.ms7.weight, p.ms7.bias, groups=half)
        + T.grouped_conv2d(fused, p.ms5.weight, p.ms5.bias, groups=half)
        + T.grouped_conv2d(fused, p.ms3.weight, p.ms3.bias, groups=half)
        + T.grouped_conv2d(fused, p.ms1.weight, p.ms1.bias, groups=half)
    )
    seq = T.transpose(T.reshape(ms, (half, h * h)), (1, 0))  # [H*W, D/2]
    return T.layer_norm(linear(p.out_proj, seq), p.out_norm.gamma, p.out_norm.beta)


# -- full forward pass ----------------------------------------------------------


def forward(
    bag,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "eval",
    dropout_rng: DropoutRng | None = None,
    collect_attention: bool = False,
) -> SurvivalOutput:
    """One slide through the model. ``bag`` provides coarse/source/fine
    float matrices (each N_scale x d_in). Dropout fires only in train mode."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    for scale in ("coarse", "source", "fine"):
        feats = getattr(bag, scale)
        if feats.shape[0] < 1:
            raise InputError(f"scale {scale!r} has no patches")
        if feats.shape[1] != cfg.d_in:
            raise DimensionError(
                f"scale {scale!r} has width {feats.shape[1]}, expected d_in={cfg.d_in}"
            )
    if mode == "train" and cfg.dropout > 0.0 and dropout_rng is None:
        raise ContractError("train mode with dropout > 0 requires a DropoutRng")
    rng = dropout_rng if mode == "train" else None

    maps: dict[str, Tensor] = {}

    if cfg.variant == "no_fc":
        xs = linear(params.proj_source, Tensor(np.asarray(bag.fine, dtype=np.float64)))
        tokens, w_src = pad_transformer(xs, params.pt_source, rng, collect_attention)
        if collect_attention and w_src is not None:
            maps["pt_source"] = w_src
    else:
        xc = linear(params.proj_coarse, Tensor(np.asarray(bag.coarse, dtype=np.float64)))
        xs = linear(params.proj_source, Tensor(np.asarray(bag.source, dtype=np.float64)))
        xf = linear(params.proj_fine, Tensor(np.asarray(bag.fine, dtype=np.float64)))
        xc2, w_cab_c = cross_attention_block(xs, xc, params.cab_coarse, collect_attention)
        xf2, w_cab_f = cross_attention_block(xs, xf, params.cab_fine, collect_attention)
        pc, _ = pad_transformer(xc2, params.pt_coarse, rng)
        ps, w_src = pad_transformer(xs, params.pt_source, rng, collect_attention)
        pf, _ = pad_transformer(xf2, params.pt_fine, rng)
        if collect_attention:
            maps["cab_coarse"] = w_cab_c
            maps["cab_fine"] = w_cab_f
            maps["pt_source"] = w_src
        if cfg.variant == "full":
            tokens = conv_processor(pc, ps, pf, params.conv_processor)
        else:  # no_cp
            tokens = linear(params.fuse_proj, T.concat([pc, ps, pf], axis=0))

    seq = T.concat([params.class_token, tokens], axis=0)
    refined, w_final = pad_transformer(seq, params.pt_final, rng, collect_attention)
    if collect_attention and w_final is not None:
        maps["pt_final"] = w_final
    normed = T.layer_norm(refined, params.final_norm.gamma, params.final_norm.beta)
    cls = T.narrow(normed, 0, 1)  # [1, d_e]
    logits = T.reshape(linear(params.mlp_head, cls), (cfg.n_bins,))
    hazards = T.sigmoid(logits)
    survival = T.cumprod_lastdim(1.0 - hazards)
    return SurvivalOutput(
        logits=logits,
        hazards=hazards,
        survival=survival,
        attention_maps=maps if collect_attention else None,
    )


# -- heatmap score extraction ----------------------------------------------------


def _minmax(scores: np.ndarray) -> np.ndarray:
    lo, hi = scores.min(), scores.max()
    if hi - lo < 1e-12:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def attention_maps(
    bag, params: ModelParams, cfg: ModelConfig, normalize: bool = True
) -> dict[str, np.ndarray]:
    """Per-patch attention scores for heatmap export (eval mode, no gradients).

    - cab_coarse / cab_fine: mean over heads and queries of the cross-attention
      columns; one score per coarse / fine patch.
    - pt_source: mean attention received per token in the source
      pad-transformer's second block, truncated to the real tokens.
    - pt_fused: the class-token query row of the final pad-transformer's second
      block, averaged over heads, truncated to the real tokens.

    Each map is min-max normalized to [0, 1] unless ``normalize`` is False.
    """
    with T.no_grad():
        out = forward(bag, params, cfg, mode="eval", collect_attention=True)
    raw = out.attention_maps
    n_s = bag.source.shape[0]
    n_f = bag.fine.shape[0]

    maps: dict[str, np.ndarray] = {}
    if cfg.variant != "no_fc":
        maps["cab_coarse"] = raw["cab_coarse"].data.mean(axis=(0, 1))
        maps["cab_fine"] = raw["cab_fine"].data.mean(axis=(0, 1))
        n_src_real = n_s
    else:
        n_src_real = n_f
    maps["pt_source"] = raw["pt_source"].data.mean(axis=(0, 1))[:n_src_real]

    cls_row = raw["pt_final"].data[:, 0, :].mean(axis=0)  # over the padded final sequence
    if cfg.variant == "full":
        maps["pt_fused"] = cls_row[1 : 1 + n_s]
    elif cfg.variant == "no_cp":
        chunks = [cls_row[1 + i * n_s : 1 + (i + 1) * n_s] for i in range(3)]
        maps["pt_fused"] = np.mean(chunks, axis=0)
    else:  # no_fc
        maps["pt_fused"] = cls_row[1 : 1 + n_f]

    if normalize:
        maps = {k: _minmax(v) for k, v in maps.items()}
    return maps


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams) -> None:
    """Binary container: magic, length-prefixed config JSON, then every
    parameter as (u16 name length, name, u8 rank, u32 extents, f64 payload),
    all little-endian, in ModelParams field order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, t in named_params(params):
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.data.ndim))
            for e in t.data.shape:
                f.write(struct.pack("<I", e))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    pos = len(CHECKPOINT_MAGIC)

    def need(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated checkpoint", offset=pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<I", need(4))
    try:
        cfg = ModelConfig(**json.loads(need(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config block: {exc}", offset=len(CHECKPOINT_MAGIC) + 4) from exc

    params = init_params(cfg, seed=0)
    for name, t in named_params(params):
        at = pos
        (nlen,) = struct.unpack("<H", need(2))
        fname = need(nlen).decode("utf-8")
        if fname != name:
            raise FormatError(f"expected parameter {name!r}, found {fname!r}", offset=at)
        (rank,) = struct.unpack("<B", need(1))
        shape = tuple(struct.unpack("<I", need(4))[0] for _ in range(rank))
        if shape != t.data.shape:
            raise FormatError(
                f"parameter {name!r} has shape {shape}, expected {t.data.shape}", offset=at
            )
        payload = need(8 * int(np.prod(shape, dtype=np.int64)))
        t.data = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        t.grad = None
    if pos != len(blob):
        raise FormatError("trailing bytes after last parameter", offset=pos)
    return cfg, params
