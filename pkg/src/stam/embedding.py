"""Frame-to-token embedding: patch extraction, linear projection, learned
positional table, and a shared per-frame class token.

A clip of F frames becomes F token sequences of length N+1 (one class token
plus N patch tokens). Frame identity is carried only by the positional
table, which is indexed jointly by (frame, token position).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of the non-overlapping patch decomposition of one frame."""

    P: int
    H: int
    W: int
    C: int

    def __post_init__(self):
        if self.P <= 0:
            raise ConfigError(f"patch size must be positive, got P={self.P}")
        if self.H % self.P or self.W % self.P:
            raise ConfigError(
                f"frame dims must be divisible by patch size: "
                f"H={self.H}, W={self.W}, P={self.P}"
            )

    @property
    def N(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @property
    def patch_dim(self) -> int:
        return self.C * self.P * self.P


@dataclass
class EmbeddingParams:
    """Learnable embedding state.

    E projects flattened patches into model width D. pos_table[t, p] is the
    positional embedding of token p of frame t (p=0 is the class position).
    class_token is a single shared vector; what distinguishes frame t's
    class token from frame u's is pos_table alone.
    """

    grid: PatchGrid
    E: Tensor
    pos_table: Tensor
    class_token: Tensor

    @property
    def F(self) -> int:
        return self.pos_table.shape[0]

    @property
    def D(self) -> int:
        return self.E.shape[0]


def init_embedding(grid: PatchGrid, F: int, D: int, rng) -> EmbeddingParams:
    """Fresh parameters: normal(0, 0.02) weights, zero class token."""
    e = Tensor(rng.normal(0.0, 0.02, size=(D, grid.patch_dim)), requires_grad=True)
    pos = Tensor(rng.normal(0.0, 0.02, size=(F, grid.N + 1, D)), requires_grad=True)
    cls = Tensor(np.zeros(D), requires_grad=True)
    return EmbeddingParams(grid=grid, E=e, pos_table=pos, class_token=cls)


def _patchify_frames(frames: np.ndarray, P: int) -> np.ndarray:
    """[..., H, W, C] -> [..., N, C*P*P] with patches in row-major grid order
    and each patch flattened in (row, col, channel) order."""
    *lead, H, W, C = frames.shape
    gh, gw = H // P, W // P
    x = frames.reshape(*lead, gh, P, gw, P, C)
    x = np.moveaxis(x, -3, -4)  # [..., gh, gw, P, P, C]
    return np.ascontiguousarray(x).reshape(*lead, gh * gw, P * P * C)


def patchify(frame: np.ndarray, P: int) -> np.ndarray:
    """Split one frame [H, W, C] into [N, C*P*P] flattened patches."""
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise ConfigError(f"patchify expects [H, W, C], got shape {frame.shape}")
    H, W, _ = frame.shape
    if H % P or W % P:
        raise ConfigError(
            f"frame dims must be divisible by patch size: H={H}, W={W}, P={P}"
        )
    return _patchify_frames(frame, P)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of patchify: [N, C*P*P] -> [H, W, C]."""
    P = grid.P
    gh, gw = grid.H // P, grid.W // P
    x = np.asarray(patches).reshape(gh, gw, P, P, grid.C)
    x = np.moveaxis(x, 1, 2)  # [gh, P, gw, P, C]
    return np.ascontiguousarray(x).reshape(grid.H, grid.W, grid.C)


def embed_clip(clip: np.ndarray, params: EmbeddingParams) -> Tensor:
    """Tokenize one clip [F, H, W, C] -> Tensor[F, N+1, D]."""
    out = embed_batch(np.asarray(clip)[None], params)
    return T.reshape(out, out.shape[1:])


def embed_batch(clips: np.ndarray, params: EmbeddingParams) -> Tensor:
    """Tokenize a batch [B, F, H, W, C] -> Tensor[B, F, N+1, D]."""
    clips = np.asarray(clips, dtype=np.float64)
    g = params.grid
    if clips.ndim != 5 or clips.shape[2:] != (g.H, g.W, g.C):
        raise ConfigError(
            f"clip batch shape {clips.shape} does not match frame dims "
            f"(H={g.H}, W={g.W}, C={g.C})"
        )
    B, F = clips.shape[:2]
    if F != params.F:
        raise ConfigError(
            f"clip has {F} frames but pos_table covers {params.F}"
        )
    patches = _patchify_frames(clips, g.P)  # [B, F, N, C*P*P]
    tok = T.linear(Tensor(patches), params.E)  # [B, F, N, D]
    tok = T.add(tok, T.getitem(params.pos_table, np.s_[:, 1:, :]))
    cls = T.add(params.class_token, T.getitem(params.pos_table, np.s_[:, 0, :]))
    cls = T.expand(T.reshape(cls, (1, F, 1, params.D)), (B, F, 1, params.D))
    return T.concat([cls, tok], axis=2)
