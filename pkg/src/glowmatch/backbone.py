"""The L-layer attention backbone and its parameter container.

A layer runs one self-attention unit per image (rotary-encoded relative
positions, shared weights across the two images) followed by one
bidirectional cross-attention unit, each finishing with a residual update
``x <- x + MLP([x | message])``.

Weights file layout (``GLWT``): magic, version u32, dtype code u32
(0=float32, 1=float64), then L, d, h, d_in as u32, then every tensor from
``ModelParams.named_tensors()`` in order as little-endian floats, then a
CRC32 trailer (u32) over the parameter payload.  Bytes after the trailer are
ignored, which lets training checkpoints append optimizer state.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractViolation, FileFormatError, InvalidInput
from .features import FeatureSet, normalize_points
from .numcore import Tensor
from .rope import RotationCache, build_cache, init_basis

logger = logging.getLogger("glowmatch")

WEIGHTS_MAGIC = b"GLWT"
WEIGHTS_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.float64}
_CODE_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class SelfAttnParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wm: Tensor
    bm: Tensor
    mlp: MlpParams


@dataclass
class CrossAttnParams:
    """Bidirectional cross-attention: one shared query/key projection."""

    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wm: Tensor
    bm: Tensor
    mlp: MlpParams


@dataclass
class HeadParams:
    wa: Tensor
    ba: Tensor
    wb: Tensor
    bb: Tensor
    wsig: Tensor
    bsig: Tensor


@dataclass
class ClassifierParams:
    w: Tensor
    b: Tensor


@dataclass
class LayerParams:
    self_attn: SelfAttnParams
    cross_attn: CrossAttnParams
    head: HeadParams
    classifier: ClassifierParams | None  # None for the final layer


@dataclass
class ModelParams:
    """All learned weights plus the architecture hyperparameters."""

    layers_count: int
    d: int
    h: int
    d_in: int
    in_proj_w: Tensor = field(repr=False, default=None)
    in_proj_b: Tensor = field(repr=False, default=None)
    basis: Tensor = field(repr=False, default=None)
    layers: list[LayerParams] = field(repr=False, default_factory=list)

    @property
    def d_head(self) -> int:
        return self.d // self.h

    @property
    def dtype(self):
        return self.in_proj_w.dtype

    def named_tensors(self):
        """Yield (name, tensor) in the fixed serialization order."""
        yield "in_proj.w", self.in_proj_w
        yield "in_proj.b", self.in_proj_b
        yield "rotary.basis", self.basis
        for i, lp in enumerate(self.layers):
            s = lp.self_attn
            for nm, t in (("wq", s.wq), ("bq", s.bq), ("wk", s.wk), ("bk", s.bk),
                          ("wv", s.wv), ("bv", s.bv), ("wm", s.wm), ("bm", s.bm)):
                yield f"layer{i}.self.{nm}", t
            for nm, t in _mlp_items(s.mlp):
                yield f"layer{i}.self.mlp.{nm}", t
            c = lp.cross_attn
            for nm, t in (("wk", c.wk), ("bk", c.bk), ("wv", c.wv), ("bv", c.bv),
                          ("wm", c.wm), ("bm", c.bm)):
                yield f"layer{i}.cross.{nm}", t
            for nm, t in _mlp_items(c.mlp):
                yield f"layer{i}.cross.mlp.{nm}", t
            hd = lp.head
            for nm, t in (("wa", hd.wa), ("ba", hd.ba), ("wb", hd.wb), ("bb", hd.bb),
                          ("wsig", hd.wsig), ("bsig", hd.bsig)):
                yield f"layer{i}.head.{nm}", t
            if lp.classifier is not None:
                yield f"layer{i}.cls.w", lp.classifier.w
                yield f"layer{i}.cls.b", lp.classifier.b

    def tensor_dict(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def num_params(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())

    def astype(self, dtype) -> "ModelParams":
        clone = init_model(np.random.default_rng(0), self.layers_count, self.d, self.h,
                           self.d_in, dtype=dtype)
        for (_, src), (_, dst) in zip(self.named_tensors(), clone.named_tensors()):
            dst.data = src.data.astype(dtype)
        return clone

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)


def _mlp_items(m: MlpParams):
    return (("w1", m.w1), ("b1", m.b1), ("ln_gamma", m.ln_gamma),
            ("ln_beta", m.ln_beta), ("w2", m.w2), ("b2", m.b2))


def _xavier(rng, shape, dtype, gain=1.0):
    std = gain * math.sqrt(2.0 / (shape[0] + shape[-1]))
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def _init_mlp(rng, d_in, d_hidden, d_out, dtype):
    # Small output-projection init keeps every residual unit near-identity at
    # the start of training.
    return MlpParams(
        w1=_xavier(rng, (d_in, d_hidden), dtype),
        b1=_zeros((d_hidden,), dtype),
        ln_gamma=_ones((d_hidden,), dtype),
        ln_beta=_zeros((d_hidden,), dtype),
        w2=_xavier(rng, (d_hidden, d_out), dtype, gain=0.1),
        b2=_zeros((d_out,), dtype),
    )


def init_model(rng: np.random.Generator, layers: int, d: int, h: int, d_in: int,
               dtype=np.float32) -> ModelParams:
    """Fresh parameters for an L-layer model; shapes checked up front."""
    if d % h != 0:
        raise InvalidInput(f"d={d} must be divisible by h={h}")
    if (d // h) % 2 != 0:
        raise InvalidInput(f"per-head width {d // h} must be even for pair rotations")
    if layers < 1:
        raise InvalidInput(f"need at least one layer, got {layers}")
    dtype = np.dtype(dtype)
    mp = ModelParams(layers_count=layers, d=d, h=h, d_in=d_in)
    mp.in_proj_w = _xavier(rng, (d_in, d), dtype)
    mp.in_proj_b = _zeros((d,), dtype)
    mp.basis = Tensor(init_basis(rng, (d // h) // 2, dtype), requires_grad=True)
    for i in range(layers):
        self_attn = SelfAttnParams(
            wq=_xavier(rng, (d, d), dtype), bq=_zeros((d,), dtype),
            wk=_xavier(rng, (d, d), dtype), bk=_zeros((d,), dtype),
            wv=_xavier(rng, (d, d), dtype), bv=_zeros((d,), dtype),
            wm=_xavier(rng, (d, d), dtype), bm=_zeros((d,), dtype),
            mlp=_init_mlp(rng, 2 * d, 2 * d, d, dtype),
        )
        cross_attn = CrossAttnParams(
            wk=_xavier(rng, (d, d), dtype), bk=_zeros((d,), dtype),
            wv=_xavier(rng, (d, d), dtype), bv=_zeros((d,), dtype),
            wm=_xavier(rng, (d, d), dtype), bm=_zeros((d,), dtype),
            mlp=_init_mlp(rng, 2 * d, 2 * d, d, dtype),
        )
        head = HeadParams(
            wa=_xavier(rng, (d, d), dtype), ba=_zeros((d,), dtype),
            wb=_xavier(rng, (d, d), dtype), bb=_zeros((d,), dtype),
            wsig=_xavier(rng, (d, 1), dtype), bsig=_zeros((1,), dtype),
        )
        classifier = None
        if i < layers - 1:
            classifier = ClassifierParams(w=_zeros((d, 1), dtype), b=_zeros((1,), dtype))
        mp.layers.append(LayerParams(self_attn, cross_attn, head, classifier))
    return mp


# ---------------------------------------------------------------------------
# Weights file I/O
# ---------------------------------------------------------------------------


def model_to_bytes(params: ModelParams) -> bytes:
    dtype = np.dtype(params.dtype)
    code = _CODE_OF_DTYPE[dtype]
    header = WEIGHTS_MAGIC + struct.pack(
        "<6I", WEIGHTS_VERSION, code, params.layers_count, params.d, params.h, params.d_in
    )
    payload = b"".join(np.ascontiguousarray(t.data, dtype=dtype.newbyteorder("<")).tobytes()
                       for _, t in params.named_tensors())
    return header + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def save_model(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(params))


def model_from_bytes(raw: bytes) -> ModelParams:
    return _parse_model(raw)[0]


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    return _parse_model(raw)[0]


def _parse_model(raw: bytes) -> tuple[ModelParams, int]:
    """Parse a GLWT blob; returns (params, offset one past the trailer)."""
    if len(raw) < 4 or raw[:4] != WEIGHTS_MAGIC:
        raise FileFormatError(f"bad magic {raw[:4]!r}, expected {WEIGHTS_MAGIC!r}", offset=0)
    if len(raw) < 28:
        raise FileFormatError("truncated weights header", offset=len(raw))
    version, code, layers, d, h, d_in = struct.unpack("<6I", raw[4:28])
    if version != WEIGHTS_VERSION:
        raise FileFormatError(f"unsupported weights version {version}", offset=4)
    if code not in _DTYPE_CODES:
        raise FileFormatError(f"unknown dtype code {code}", offset=8)
    dtype = np.dtype(_DTYPE_CODES[code])
    params = init_model(np.random.default_rng(0), layers, d, h, d_in, dtype=dtype)
    offset = 28
    itemsize = dtype.itemsize
    for name, t in params.named_tensors():
        nbytes = t.data.size * itemsize
        if offset + nbytes > len(raw):
            raise FileFormatError(f"truncated payload while reading {name}", offset=len(raw))
        t.data = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=t.data.size,
                               offset=offset).reshape(t.data.shape).astype(dtype)
        offset += nbytes
    if offset + 4 > len(raw):
        raise FileFormatError("missing checksum trailer", offset=len(raw))
    (crc_stored,) = struct.unpack("<I", raw[offset:offset + 4])
    crc_actual = zlib.crc32(raw[28:offset]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise FileFormatError(
            f"checksum mismatch: stored {crc_stored:#x}, computed {crc_actual:#x}", offset=offset
        )
    return params, offset + 4


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class PairState:
    """States and caches for one image pair during a forward pass.

    Points are physically compacted when pruned; ``idx_a``/``idx_b`` map the
    surviving rows back to original point indices.
    """

    xa: Tensor  # (Ma, d)
    xb: Tensor  # (Nb, d)
    cache_a: RotationCache
    cache_b: RotationCache
    idx_a: np.ndarray
    idx_b: np.ndarray
    n_orig_a: int
    n_orig_b: int

    @property
    def active_mask_a(self) -> np.ndarray:
        m = np.zeros(self.n_orig_a, dtype=bool)
        m[self.idx_a] = True
        return m

    @property
    def active_mask_b(self) -> np.ndarray:
        m = np.zeros(self.n_orig_b, dtype=bool)
        m[self.idx_b] = True
        return m


def init_states(fs_a: FeatureSet, fs_b: FeatureSet, params: ModelParams) -> PairState:
    """Project descriptors into the model width and build rotation caches."""
    for side, fs in (("A", fs_a), ("B", fs_b)):
        if fs.desc_dim != params.d_in:
            raise InvalidInput(
                f"image {side} descriptor width {fs.desc_dim} != model d_in {params.d_in}"
            )
    dtype = params.dtype
    with nc.flops.phase("projection"):
        xa = nc.linear(Tensor(fs_a.descriptors.astype(dtype)), params.in_proj_w, params.in_proj_b)
        xb = nc.linear(Tensor(fs_b.descriptors.astype(dtype)), params.in_proj_w, params.in_proj_b)
    cache_a = build_cache(normalize_points(fs_a), params.basis)
    cache_b = build_cache(normalize_points(fs_b), params.basis)
    return PairState(xa, xb, cache_a, cache_b,
                     np.arange(fs_a.n), np.arange(fs_b.n), fs_a.n, fs_b.n)


def _split_heads(x: Tensor, h: int) -> Tensor:
    n, d = x.shape
    return nc.transpose(nc.reshape(x, (n, h, d // h)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return nc.reshape(nc.transpose(x, (1, 0, 2)), (n, h * dh))


def self_attention_unit(x: Tensor, cache: RotationCache, p: SelfAttnParams, h: int) -> Tensor:
    """Rotary-scored self-attention followed by the residual state update."""
    n, d = x.shape
    if n == 0:
        raise ContractViolation("self-attention needs at least one active point")
    scale = 1.0 / math.sqrt(d / h)
    with nc.flops.phase("projection"):
        q = nc.linear(x, p.wq, p.bq)
        k = nc.linear(x, p.wk, p.bk)
        v = nc.linear(x, p.wv, p.bv)
    # Scale on the small q operand instead of the NxN score matrix.
    qh = nc.mul(cache.rotate(_split_heads(q, h)), scale)
    kh = cache.rotate(_split_heads(k, h))
    vh = _split_heads(v, h)
    with nc.flops.phase("self_attention"):
        scores = nc.matmul(qh, nc.transpose(kh, (0, 2, 1)))
        weights = nc.softmax(scores, axis=-1)
        msg = nc.attn_apply(weights, vh)
    with nc.flops.phase("projection"):
        m = nc.linear(_merge_heads(msg), p.wm, p.bm)
    with nc.flops.phase("update_mlp"):
        upd = nc.mlp_block(nc.concat([x, m], axis=-1), p.mlp)
    return nc.add(x, upd)


def cross_attention_unit(xa: Tensor, xb: Tensor, p: CrossAttnParams, h: int,
                         bidirectional: bool = True) -> tuple[Tensor, Tensor]:
    """Cross-attention over both images from one shared similarity matrix.

    ``bidirectional=False`` recomputes the similarity separately per
    direction; it produces identical messages and exists so the saved FLOPs
    can be measured directly.
    """
    if xa.shape[0] == 0 or xb.shape[0] == 0:
        logger.debug("cross-attention skipped: one side has no active points")
        return xa, xb
    d = xa.shape[1]
    scale = 1.0 / math.sqrt(d / h)
    with nc.flops.phase("projection"):
        ka = nc.linear(xa, p.wk, p.bk)
        kb = nc.linear(xb, p.wk, p.bk)
        va = nc.linear(xa, p.wv, p.bv)
        vb = nc.linear(xb, p.wv, p.bv)
    kah, kbh = nc.mul(_split_heads(ka, h), scale), _split_heads(kb, h)
    vah, vbh = _split_heads(va, h), _split_heads(vb, h)
    with nc.flops.phase("cross_attention"):
        if bidirectional:
            sim = nc.matmul(kah, nc.transpose(kbh, (0, 2, 1)))  # (h, M, N)
            wa = nc.softmax(sim, axis=-1)
            wb = nc.softmax(sim, axis=-2)
            msg_a = nc.attn_apply(wa, vbh)
            msg_b = nc.attn_apply(nc.transpose(wb, (0, 2, 1)), vah)
        else:
            sim_ab = nc.matmul(kah, nc.transpose(kbh, (0, 2, 1)))
            sim_ba = nc.matmul(kbh, nc.transpose(kah, (0, 2, 1)))
            msg_a = nc.attn_apply(nc.softmax(sim_ab, axis=-1), vbh)
            msg_b = nc.attn_apply(nc.softmax(sim_ba, axis=-1), vah)
    with nc.flops.phase("projection"):
        ma = nc.linear(_merge_heads(msg_a), p.wm, p.bm)
        mb = nc.linear(_merge_heads(msg_b), p.wm, p.bm)
    with nc.flops.phase("update_mlp"):
        upd_a = nc.mlp_block(nc.concat([xa, ma], axis=-1), p.mlp)
        upd_b = nc.mlp_block(nc.concat([xb, mb], axis=-1), p.mlp)
    return nc.add(xa, upd_a), nc.add(xb, upd_b)


def run_layer_states(xa: Tensor, xb: Tensor, cache_a: RotationCache, cache_b: RotationCache,
                     lp: LayerParams, h: int, bidirectional: bool = True) -> tuple[Tensor, Tensor]:
    """One layer: self(A), self(B), then cross; empty sides pass through."""
    if xa.shape[0] > 0:
        xa = self_attention_unit(xa, cache_a, lp.self_attn, h)
    if xb.shape[0] > 0:
        xb = self_attention_unit(xb, cache_b, lp.self_attn, h)
    return cross_attention_unit(xa, xb, lp.cross_attn, h, bidirectional=bidirectional)


def run_layer(state: PairState, layer_index: int, params: ModelParams) -> PairState:
    """Driver-facing form of one layer on a PairState (0-based index)."""
    lp = params.layers[layer_index]
    xa, xb = run_layer_states(state.xa, state.xb, state.cache_a, state.cache_b, lp, params.h)
    return PairState(xa, xb, state.cache_a, state.cache_b,
                     state.idx_a, state.idx_b, state.n_orig_a, state.n_orig_b)


def forward_layers(state: PairState, params: ModelParams) -> list[tuple[Tensor, Tensor]]:
    """Full-depth pass (no adaptivity); per-layer states for deep supervision."""
    out = []
    xa, xb = state.xa, state.xb
    for lp in params.layers:
        xa, xb = run_layer_states(xa, xb, state.cache_a, state.cache_b, lp, params.h)
        out.append((xa, xb))
    return out


def analytic_attention_flops(n_a: int, n_b: int, d: int, h: int, layers: int) -> dict[str, int]:
    """Closed-form MAC counts for the attention phases of a full pass."""
    dh = d // h
    self_macs = layers * h * (n_a * n_a * dh * 2 + n_b * n_b * dh * 2)
    cross_macs = layers * h * (n_a * n_b * dh + n_a * n_b * dh * 2)
    return {"self_attention": self_macs, "cross_attention": cross_macs}
