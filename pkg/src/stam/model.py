"""The full classifier: spatial attention per frame, frame embeddings,
temporal attention over frames, linear classifier head.

Three variants share one parameter struct:

factorized — spatial stack -> per-frame class embeddings f_t -> temporal
             stack over F+1 tokens -> final LN of the class position ->
             classifier
mean-pool  — classifier applied to the mean of the f_t (temporal stack
             left untouched and untrained)
joint      — the spatial stack runs with the joint space-time key set;
             frame 1's class token, through the frame LN, feeds the
             classifier (reference for cost and F=1 equivalence)
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .attention import AttentionRecord, BlockParams, init_block, msa_block
from .embedding import EmbeddingParams, PatchGrid, embed_batch, init_embedding
from .errors import CheckpointError, ConfigError
from .tensor import Tensor

MODEL_VARIANTS = ("factorized", "mean-pool", "joint")


@dataclass(frozen=True)
class ModelConfig:
    H: int = 16
    W: int = 16
    C: int = 3
    P: int = 4
    F: int = 8
    D: int = 64
    A_space: int = 4
    A_time: int = 4
    L_space: int = 2
    L_time: int = 2
    mlp_ratio: int = 4
    num_classes: int = 4
    variant: str = "factorized"

    def __post_init__(self):
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(
                f"unknown model variant {self.variant!r}; "
                f"expected one of {MODEL_VARIANTS}"
            )
        if self.D % self.A_space:
            raise ConfigError(
                f"D={self.D} not divisible by A_space={self.A_space}"
            )
        if self.D % self.A_time:
            raise ConfigError(f"D={self.D} not divisible by A_time={self.A_time}")
        for name in ("F", "D", "num_classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.L_space < 0 or self.L_time < 0:
            raise ConfigError("layer counts must be >= 0")
        # grid construction validates H, W, P divisibility
        _ = self.grid.N

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(P=self.P, H=self.H, W=self.W, C=self.C)

    @property
    def N(self) -> int:
        return self.grid.N

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


def desk_config(variant: str = "factorized") -> ModelConfig:
    """The small CPU-friendly configuration every end-to-end check uses."""
    return ModelConfig(variant=variant)


def paper_scale_config() -> ModelConfig:
    """Full-scale reference configuration (recorded, not exercised in tests)."""
    return ModelConfig(
        H=224,
        W=224,
        C=3,
        P=16,
        F=16,
        D=768,
        A_space=12,
        A_time=8,
        L_space=12,
        L_time=6,
        mlp_ratio=4,
        num_classes=400,
        variant="factorized",
    )


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: EmbeddingParams
    spatial_blocks: list[BlockParams]
    frame_ln_g: Tensor
    frame_ln_b: Tensor
    temporal_cls: Tensor
    temporal_blocks: list[BlockParams]
    final_ln_g: Tensor
    final_ln_b: Tensor
    w_cls: Tensor
    b_cls: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "embed.proj": self.embedding.E,
            "embed.pos_table": self.embedding.pos_table,
            "embed.class_token": self.embedding.class_token,
            "frame_ln.g": self.frame_ln_g,
            "frame_ln.b": self.frame_ln_b,
            "temporal_cls": self.temporal_cls,
            "final_ln.g": self.final_ln_g,
            "final_ln.b": self.final_ln_b,
            "cls.w": self.w_cls,
            "cls.b": self.b_cls,
        }
        for prefix, blocks in (
            ("spatial", self.spatial_blocks),
            ("temporal", self.temporal_blocks),
        ):
            for i, blk in enumerate(blocks):
                for key, t in blk.tensors().items():
                    out[f"{prefix}.{i}.{key}"] = t
        return out

    def trainable_tensors(self) -> dict[str, Tensor]:
        """The subset the optimizer touches for the configured variant.

        mean-pool and joint never read the temporal stack or the final LN,
        so those stay frozen at initialization for them.
        """
        named = self.named_tensors()
        if self.config.variant == "factorized":
            return named
        frozen = ("temporal.", "temporal_cls", "final_ln.")
        return {
            k: v for k, v in named.items() if not k.startswith(frozen)
        }


def param_count(config: ModelConfig) -> int:
    """Closed-form total parameter count (all variants share the struct)."""
    D, r = config.D, config.mlp_ratio
    n_embed = D * config.grid.patch_dim + config.F * (config.N + 1) * D + D
    n_block = 4 * D * D + 2 * r * D * D + 5 * D + r * D
    n_head = config.num_classes * D + config.num_classes
    # frame LN + temporal class token + final LN
    n_glue = 5 * D
    return n_embed + (config.L_space + config.L_time) * n_block + n_glue + n_head


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters; draw order is fixed so a seed pins every value."""
    rng = np.random.default_rng(seed)
    embedding = init_embedding(config.grid, config.F, config.D, rng)
    spatial = [
        init_block(config.D, config.A_space, config.mlp_ratio, rng)
        for _ in range(config.L_space)
    ]
    temporal = [
        init_block(config.D, config.A_time, config.mlp_ratio, rng)
        for _ in range(config.L_time)
    ]
    D = config.D
    return ModelParams(
        config=config,
        embedding=embedding,
        spatial_blocks=spatial,
        frame_ln_g=Tensor(np.ones(D), requires_grad=True),
        frame_ln_b=Tensor(np.zeros(D), requires_grad=True),
        temporal_cls=Tensor(np.zeros(D), requires_grad=True),
        temporal_blocks=temporal,
        final_ln_g=Tensor(np.ones(D), requires_grad=True),
        final_ln_b=Tensor(np.zeros(D), requires_grad=True),
        w_cls=Tensor(rng.normal(0.0, 0.02, size=(config.num_classes, D)), requires_grad=True),
        b_cls=Tensor(np.zeros(config.num_classes), requires_grad=True),
    )


def config_to_text(config: ModelConfig) -> dict[str, str]:
    """ModelConfig as a flat str->str mapping (checkpoint config blob)."""
    return {
        "H": str(config.H),
        "W": str(config.W),
        "C": str(config.C),
        "P": str(config.P),
        "F": str(config.F),
        "D": str(config.D),
        "A_space": str(config.A_space),
        "A_time": str(config.A_time),
        "L_space": str(config.L_space),
        "L_time": str(config.L_time),
        "mlp_ratio": str(config.mlp_ratio),
        "num_classes": str(config.num_classes),
        "variant": config.variant,
    }


def config_from_text(text: dict[str, str]) -> ModelConfig:
    kwargs = {}
    known = set(config_to_text(ModelConfig()).keys())
    for key, val in text.items():
        if key not in known:
            raise ConfigError(f"unknown model config key {key!r}")
        kwargs[key] = val if key == "variant" else int(val)
    missing = known - set(kwargs)
    if missing:
        raise ConfigError(f"missing model config keys: {sorted(missing)}")
    return ModelConfig(**kwargs)


def params_from_arrays(
    config: ModelConfig, arrays: dict[str, np.ndarray]
) -> ModelParams:
    """Rebuild ModelParams from named arrays, validating names and shapes."""
    params = init_model(config, seed=0)
    named = params.named_tensors()
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise CheckpointError(f"checkpoint missing tensor {missing[0]!r}")
    extra = sorted(set(arrays) - set(named))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    for name, t in named.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, "
                f"config implies {t.data.shape}"
            )
        t.data = arr.copy()
    return params


def _check_clip_batch(clips: np.ndarray, config: ModelConfig) -> np.ndarray:
    clips = np.asarray(clips, dtype=np.float64)
    want = (config.F, config.H, config.W, config.C)
    if clips.ndim != 5 or clips.shape[1:] != want:
        raise ConfigError(
            f"clip batch shape {clips.shape} does not match config "
            f"[B, F={config.F}, H={config.H}, W={config.W}, C={config.C}]"
        )
    return clips


def spatial_tokens(
    clips: np.ndarray,
    params: ModelParams,
    attn_variant: str = "spatial",
    records: list | None = None,
) -> Tensor:
    """Embed and run the spatial stack: [B, F, H, W, C] -> [B, F, N+1, D]."""
    z = embed_batch(clips, params.embedding)
    for i, blk in enumerate(params.spatial_blocks):
        z = msa_block(z, blk, attn_variant, layer=i, records=records)
    return z


def frame_embeddings(
    clips: np.ndarray, params: ModelParams, records: list | None = None
) -> Tensor:
    """f_t for a batch: LN of each frame's class-position output, [B, F, D]."""
    z = spatial_tokens(clips, params, "spatial", records)
    cls = T.getitem(z, np.s_[:, :, 0, :])
    return T.layer_norm(cls, params.frame_ln_g, params.frame_ln_b)


def spatial_forward(clip: np.ndarray, params: ModelParams) -> Tensor:
    """Single clip [F, H, W, C] -> frame embeddings [F, D]."""
    f = frame_embeddings(
        _check_clip_batch(np.asarray(clip)[None], params.config), params
    )
    return T.reshape(f, f.shape[1:])


def temporal_forward(
    f: Tensor, params: ModelParams, records: list | None = None
) -> Tensor:
    """Frame embeddings -> clip embedding y.

    f is [B, F, D] (or [F, D] for one clip); the temporal class token is
    prepended, the temporal stack runs over F+1 positions, and y is the
    final LN of position 0.
    """
    single = f.ndim == 2
    if single:
        f = T.reshape(f, (1,) + f.shape)
    B, F, D = f.shape
    cls = T.expand(T.reshape(params.temporal_cls, (1, 1, D)), (B, 1, D))
    z = T.concat([cls, f], axis=1)
    for i, blk in enumerate(params.temporal_blocks):
        z = msa_block(z, blk, "temporal", layer=i, records=records)
    y = T.layer_norm(
        T.getitem(z, np.s_[:, 0, :]), params.final_ln_g, params.final_ln_b
    )
    if single:
        y = T.reshape(y, (D,))
    return y


def classify(y: Tensor, params: ModelParams) -> Tensor:
    """Single linear layer: [.., D] -> [.., num_classes] logits."""
    if y.shape[-1] != params.config.D:
        raise ConfigError(
            f"classifier input width {y.shape[-1]} does not match D="
            f"{params.config.D}"
        )
    return T.linear(y, params.w_cls, params.b_cls)


def forward_batch(
    clips: np.ndarray, params: ModelParams, records: list | None = None
) -> Tensor:
    """[B, F, H, W, C] -> [B, num_classes] logits, per the config's variant."""
    config = params.config
    clips = _check_clip_batch(clips, config)
    if config.variant == "factorized":
        f = frame_embeddings(clips, params, records)
        return classify(temporal_forward(f, params, records), params)
    if config.variant == "mean-pool":
        f = frame_embeddings(clips, params, records)
        return classify(T.tmean(f, axis=1), params)
    if config.variant == "joint":
        z = spatial_tokens(clips, params, "joint", records)
        y = T.layer_norm(
            T.getitem(z, np.s_[:, 0, 0, :]), params.frame_ln_g, params.frame_ln_b
        )
        return classify(y, params)
    raise ConfigError(f"unknown model variant {config.variant!r}")


def forward(
    clip: np.ndarray, params: ModelParams, records: list | None = None
) -> Tensor:
    """Single clip [F, H, W, C] -> [num_classes] logits."""
    out = forward_batch(np.asarray(clip)[None], params, records)
    return T.reshape(out, out.shape[1:])


def predict_batch(clips: np.ndarray, params: ModelParams) -> np.ndarray:
    """Argmax class ids without building a graph; ties go to the lowest id."""
    with T.no_grad():
        logits = forward_batch(clips, params)
    return np.argmax(logits.data, axis=-1)


def frame_attention_weights(clip: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-frame temporal attention of the class token, [F], summing to 1.

    Taken from the LAST temporal layer, averaged over heads; the class
    token's self-weight is dropped and the F frame entries renormalized.
    """
    config = params.config
    if config.variant != "factorized":
        raise ConfigError(
            f"frame attention is defined for the factorized variant, "
            f"config has {config.variant!r}"
        )
    if config.L_time < 1:
        raise ConfigError("frame attention needs at least one temporal layer")
    records: list[AttentionRecord] = []
    with T.no_grad():
        f = frame_embeddings(np.asarray(clip)[None], params)
        temporal_forward(f, params, records)
    last = [
        r
        for r in records
        if r.variant == "temporal" and r.layer == config.L_time - 1
    ]
    rows = np.stack([r.weights[0] for r in last])  # [A_time, F+1]
    mean_row = rows.mean(axis=0)
    frames = mean_row[1:]
    total = frames.sum()
    if total <= 0:
        raise ConfigError("degenerate attention row; cannot renormalize")
    return frames / total
