"""Multi-head self-attention blocks in three key-set variants.

spatial   — attention within each frame's N+1 tokens, frames independent
temporal  — attention over a single F+1 sequence of frame embeddings
joint     — every token attends to its own frame's class token plus every
            patch token of every frame (the quadratic-cost reference)

One block is pre-norm residual: the attention sublayer reads LN1(z) and
adds onto z, the MLP sublayer reads LN2(z') and adds onto z'. Q/K/V carry
no biases; the MLP's two linear layers do.

The score computation (q @ k^T) optionally feeds a module-level counter of
executed multiply-accumulates, used to cross-check the analytic cost model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

VARIANTS = ("spatial", "temporal", "joint")


class ScoreMacCounter:
    """Counts multiply-accumulates executed by attention score matmuls."""

    def __init__(self):
        self.active = False
        self.macs = 0

    def reset(self):
        self.macs = 0

    def __enter__(self):
        self.active = True
        self.macs = 0
        return self

    def __exit__(self, exc_type, exc, tb):
        self.active = False
        return False


score_mac_counter = ScoreMacCounter()


@dataclass
class BlockParams:
    """One attention block's parameters.

    Projection matrices are stored fused: w_q/w_k/w_v are [D, D] with rows
    a*D_h .. (a+1)*D_h belonging to head a, and w_o is [D, D] applied to the
    head-order concatenation of per-head outputs.
    """

    A: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @property
    def D(self) -> int:
        return self.w_q.shape[1]

    @property
    def D_h(self) -> int:
        return self.D // self.A

    def tensors(self) -> dict[str, Tensor]:
        return {
            "w_q": self.w_q,
            "w_k": self.w_k,
            "w_v": self.w_v,
            "w_o": self.w_o,
            "ln1_g": self.ln1_g,
            "ln1_b": self.ln1_b,
            "ln2_g": self.ln2_g,
            "ln2_b": self.ln2_b,
            "mlp_w1": self.mlp_w1,
            "mlp_b1": self.mlp_b1,
            "mlp_w2": self.mlp_w2,
            "mlp_b2": self.mlp_b2,
        }


@dataclass
class AttentionRecord:
    """One head's normalized attention matrix, captured during a forward pass.

    weights is [queries, keys]; for per-frame variants `frame` says which
    frame the query rows belong to (None for the temporal sequence).
    """

    layer: int
    head: int
    variant: str
    weights: np.ndarray
    frame: int | None = None


def init_block(D: int, A: int, mlp_ratio: int, rng) -> BlockParams:
    if D % A:
        raise ConfigError(f"model width D={D} not divisible by heads A={A}")
    d_mlp = mlp_ratio * D

    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    return BlockParams(
        A=A,
        w_q=w((D, D)),
        w_k=w((D, D)),
        w_v=w((D, D)),
        w_o=w((D, D)),
        ln1_g=Tensor(np.ones(D), requires_grad=True),
        ln1_b=Tensor(np.zeros(D), requires_grad=True),
        ln2_g=Tensor(np.ones(D), requires_grad=True),
        ln2_b=Tensor(np.zeros(D), requires_grad=True),
        mlp_w1=w((d_mlp, D)),
        mlp_b1=Tensor(np.zeros(d_mlp), requires_grad=True),
        mlp_w2=w((D, d_mlp)),
        mlp_b2=Tensor(np.zeros(D), requires_grad=True),
    )


def qkv_project(z: Tensor, block: BlockParams, head: int):
    """(q, k, v) for one head: each is W·LN1(z) restricted to the head's rows."""
    if not 0 <= head < block.A:
        raise ConfigError(f"head {head} out of range for A={block.A}")
    h = T.layer_norm(z, block.ln1_g, block.ln1_b)
    lo, hi = head * block.D_h, (head + 1) * block.D_h
    q = T.linear(h, T.getitem(block.w_q, np.s_[lo:hi]))
    k = T.linear(h, T.getitem(block.w_k, np.s_[lo:hi]))
    v = T.linear(h, T.getitem(block.w_v, np.s_[lo:hi]))
    return q, k, v


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(D_h)) row-wise.

    q is [..., S, D_h] and k is [..., K, D_h] with equal leading dims;
    the result is [..., S, K] with rows summing to 1.
    """
    d_h = q.shape[-1]
    if k.shape[-1] != d_h:
        raise ConfigError(
            f"query dim {d_h} does not match key dim {k.shape[-1]}"
        )
    if score_mac_counter.active:
        rows = q.shape[-2]
        keys = k.shape[-2]
        batch = 1
        for n in q.shape[:-2]:
            batch *= n
        score_mac_counter.macs += batch * rows * keys * d_h
    scores = T.scale(T.matmul(q, T.swap_last2(k)), 1.0 / math.sqrt(d_h))
    return T.softmax(scores)


def attention_combine(alpha: Tensor, v: Tensor) -> Tensor:
    """Weighted sum over values: [..., S, K] @ [..., K, D_h]."""
    return T.matmul(alpha, v)


def _per_head(z: Tensor, block: BlockParams):
    """LN1 then fused QKV; yields per-head (q, k, v), each [..., S, D_h]."""
    h = T.layer_norm(z, block.ln1_g, block.ln1_b)
    qf = T.linear(h, block.w_q)
    kf = T.linear(h, block.w_k)
    vf = T.linear(h, block.w_v)
    d_h = block.D_h
    for a in range(block.A):
        sl = np.s_[..., a * d_h : (a + 1) * d_h]
        yield T.getitem(qf, sl), T.getitem(kf, sl), T.getitem(vf, sl)


def _attend_shared_keys(z, block, layer, variant, records):
    """Attention where every query row sees the same key set (spatial when z
    is [F, S, D] batched per frame, temporal when z is [S, D])."""
    outs = []
    for a, (q, k, v) in enumerate(_per_head(z, block)):
        alpha = attention_weights(q, k)
        if records is not None:
            w = alpha.data
            if w.ndim == 2:
                records.append(AttentionRecord(layer, a, variant, w.copy()))
            else:
                flat = w.reshape(-1, w.shape[-2], w.shape[-1])
                for f in range(flat.shape[0]):
                    records.append(
                        AttentionRecord(layer, a, variant, flat[f].copy(), frame=f)
                    )
        outs.append(attention_combine(alpha, v))
    return T.concat(outs, axis=-1)


def _attend_joint(z, block, layer, records):
    """Joint space-time attention over a clip's tokens, z = [F, N+1, D] (or
    [B, F, N+1, D]).

    Per Eq-style key set: a query in frame t attends to frame t's class
    token plus the patch tokens of ALL frames (F*N + 1 keys). Computed
    frame-blocked so the executed score MACs equal the analytic count.
    """
    batched = z.ndim == 4
    F = z.shape[-3]
    outs = []
    for a, (q, k, v) in enumerate(_per_head(z, block)):
        # shared patch keys/values across frames: [..., F*N, D_h]
        kp = T.reshape(T.getitem(k, np.s_[..., 1:, :]), _merge_frames(k.shape))
        vp = T.reshape(T.getitem(v, np.s_[..., 1:, :]), _merge_frames(v.shape))
        frame_outs = []
        for t in range(F):
            qt = T.getitem(q, np.s_[..., t, :, :]) if batched else T.getitem(q, t)
            kc = (
                T.getitem(k, np.s_[..., t, 0:1, :])
                if batched
                else T.getitem(k, np.s_[t, 0:1, :])
            )
            vc = (
                T.getitem(v, np.s_[..., t, 0:1, :])
                if batched
                else T.getitem(v, np.s_[t, 0:1, :])
            )
            kt = T.concat([kc, kp], axis=-2)
            vt = T.concat([vc, vp], axis=-2)
            alpha = attention_weights(qt, kt)
            if records is not None and not batched:
                records.append(
                    AttentionRecord(layer, a, "joint", alpha.data.copy(), frame=t)
                )
            frame_outs.append(attention_combine(alpha, vt))
        stacked = T.concat(
            [T.reshape(o, o.shape[:-2] + (1,) + o.shape[-2:]) for o in frame_outs],
            axis=-3,
        )
        outs.append(stacked)
    return T.concat(outs, axis=-1)


def _merge_frames(shape):
    """[..., F, S, D_h] -> [..., F*(S-1), D_h] target shape after dropping
    the class column."""
    *lead, F, S, d = shape
    return tuple(lead) + (F * (S - 1), d)


def msa_block(
    z: Tensor,
    block: BlockParams,
    variant: str,
    layer: int = 0,
    records: list | None = None,
) -> Tensor:
    """One pre-norm residual attention block.

    spatial:  z = [F, N+1, D] or [B, F, N+1, D]; frames attend independently
    temporal: z = [F+1, D] or [B, F+1, D]
    joint:    z = [F, N+1, D] or [B, F, N+1, D]; Eq-5-style key set
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown attention variant {variant!r}")
    if z.shape[-1] != block.D:
        raise ConfigError(
            f"token width {z.shape[-1]} does not match block width {block.D}"
        )
    if variant == "temporal":
        if z.ndim not in (2, 3):
            raise ConfigError(
                f"temporal variant expects [F+1, D] tokens, got {z.shape}"
            )
        attn = _attend_shared_keys(z, block, layer, variant, records)
    else:
        if z.ndim not in (3, 4):
            raise ConfigError(
                f"{variant} variant expects [F, N+1, D] tokens, got {z.shape}"
            )
        if variant == "spatial":
            attn = _attend_shared_keys(z, block, layer, variant, records)
        else:
            attn = _attend_joint(z, block, layer, records)
    z1 = T.add(z, T.linear(attn, block.w_o))
    u = T.layer_norm(z1, block.ln2_g, block.ln2_b)
    mlp = T.linear(
        T.gelu(T.linear(u, block.mlp_w1, block.mlp_b1)),
        block.mlp_w2,
        block.mlp_b2,
    )
    return T.add(z1, mlp)
