"""Analytic cost model and timing harness for the two attention layouts.

Counting convention: one multiply-accumulate pair costs 1; softmax costs 4
ops per element of its input matrix (max, subtract, exp, normalize).
Residual adds, layer norms, and GELU are not counted. Every count in a
report follows this convention.

The timing harness measures only the attention kernel (scores, softmax,
weighted combine) because that is the stage whose growth separates the two
layouts; projections and MLPs scale identically in both. Timed kernels
reuse preallocated buffers and run every stage in place so the slope fit
tracks arithmetic rather than allocator behaviour; key matrices are
assembled before the clock starts. The multiply-accumulate counts they
execute are identical to the graph kernels' counts.
"""

import math
import statistics
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from threadpoolctl import threadpool_limits

from stam.attention import attention_combine, attention_weights, score_mac_counter
from stam.errors import ConfigError, SizeError
from stam.tensor import Tensor, concat, no_grad

STAGES = ("qkv", "score", "softmax", "combine", "proj", "mlp")
CSV_HEADER = "variant,F,N,D,score_flops,total_flops,median_ms"


@dataclass(frozen=True)
class FlopReport:
    """Exact operation counts for one model shape, both layouts.

    `factorized_spatial` and `factorized_temporal` are already multiplied by
    their layer counts; `factorized` is their elementwise sum. `joint` covers
    L_space joint layers (the joint layout has no temporal stack).
    """

    F: int
    N: int
    D: int
    A: int
    L_space: int
    L_time: int
    mlp_ratio: int
    factorized_spatial: dict
    factorized_temporal: dict
    factorized: dict
    joint: dict
    factorized_total: int
    joint_total: int
    score_ratio: Fraction
    simplified_ratio: Fraction


def _stage_counts(tokens: int, keys: int, D: int, A: int, mlp_ratio: int) -> dict:
    # tokens = query rows across the whole layer, keys = key rows per query
    return {
        "qkv": 3 * tokens * D * D,
        "score": tokens * keys * D,
        "softmax": 4 * A * tokens * keys,
        "combine": tokens * keys * D,
        "proj": tokens * D * D,
        "mlp": 2 * tokens * D * (mlp_ratio * D),
    }


def attention_flops(
    F: int,
    N: int,
    D: int,
    A: int,
    L_space: int,
    L_time: int,
    mlp_ratio: int = 4,
) -> FlopReport:
    """Count MACs for a factorized stack and a joint stack of the same shape.

    One report covers both layouts; the comparison is the whole point, so
    there is no per-variant entry point.
    """
    for label, value in (
        ("F", F), ("N", N), ("D", D), ("A", A),
        ("L_space", L_space), ("L_time", L_time), ("mlp_ratio", mlp_ratio),
    ):
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise ConfigError(f"{label} must be a positive integer, got {value!r}")
    if D % A != 0:
        raise ConfigError(f"width {D} not divisible by {A} heads")

    S = N + 1            # tokens per frame, class token included
    K = F * N + 1        # joint key rows: own class token plus every patch
    spatial_layer = _stage_counts(F * S, S, D, A, mlp_ratio)
    temporal_layer = _stage_counts(F + 1, F + 1, D, A, mlp_ratio)
    joint_layer = _stage_counts(F * S, K, D, A, mlp_ratio)

    spatial = {k: L_space * v for k, v in spatial_layer.items()}
    temporal = {k: L_time * v for k, v in temporal_layer.items()}
    factorized = {k: spatial[k] + temporal[k] for k in STAGES}
    joint = {k: L_space * v for k, v in joint_layer.items()}
    return FlopReport(
        F=F, N=N, D=D, A=A, L_space=L_space, L_time=L_time,
        mlp_ratio=mlp_ratio,
        factorized_spatial=spatial,
        factorized_temporal=temporal,
        factorized=factorized,
        joint=joint,
        factorized_total=sum(factorized.values()),
        joint_total=sum(joint.values()),
        score_ratio=Fraction(joint["score"], factorized["score"]),
        simplified_ratio=Fraction((F * N) ** 2, F * N * N + F * F),
    )


@dataclass(frozen=True)
class BenchRow:
    variant: str
    F: int
    N: int
    D: int
    score_flops: int
    total_flops: int
    median_ms: float


def rows_to_csv(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            "%s,%d,%d,%d,%d,%d,%.6f"
            % (r.variant, r.F, r.N, r.D, r.score_flops, r.total_flops,
               r.median_ms)
        )
    return "\n".join(lines) + "\n"


def _factorized_kernel(rng, F: int, N: int, D: int, A: int):
    # one spatial layer over all frames plus one temporal layer
    D_h = D // A
    S = N + 1
    qs, ks, vs = (Tensor(rng.standard_normal((F, A, S, D_h))) for _ in range(3))
    qt, kt, vt = (Tensor(rng.standard_normal((A, F + 1, D_h))) for _ in range(3))

    def run():
        attention_combine(attention_weights(qs, ks), vs)
        attention_combine(attention_weights(qt, kt), vt)

    return run


def _joint_kernel(rng, F: int, N: int, D: int, A: int):
    # frame-blocked: each frame's rows attend to its class key plus all patches
    D_h = D // A
    S = N + 1
    q = Tensor(rng.standard_normal((F, A, S, D_h)))
    kp = Tensor(rng.standard_normal((A, F * N, D_h)))
    vp = Tensor(rng.standard_normal((A, F * N, D_h)))
    kc = [Tensor(rng.standard_normal((A, 1, D_h))) for _ in range(F)]
    vc = [Tensor(rng.standard_normal((A, 1, D_h))) for _ in range(F)]

    def run():
        for f in range(F):
            k_all = concat((kc[f], kp), axis=-2)
            v_all = concat((vc[f], vp), axis=-2)
            attention_combine(attention_weights(q[f], k_all), v_all)

    return run


_KERNELS = {"factorized": _factorized_kernel, "joint": _joint_kernel}


def measured_score_macs(F: int, N: int, D: int, A: int) -> dict:
    """Execute both single-layer graph kernels, return the MACs actually run."""
    out = {}
    rng = np.random.default_rng(0)
    for variant, build in _KERNELS.items():
        run = build(rng, F, N, D, A)
        with no_grad(), score_mac_counter:
            run()
        out[variant] = score_mac_counter.macs
    return out


def _softmax_inplace(scores, rowmax, sums):
    np.max(scores, axis=-1, keepdims=True, out=rowmax)
    scores -= rowmax
    np.exp(scores, out=scores)
    np.sum(scores, axis=-1, keepdims=True, out=sums)
    scores /= sums


def _timed_factorized(rng, F: int, N: int, D: int, A: int):
    D_h = D // A
    S = N + 1
    inv = 1.0 / math.sqrt(D_h)

    def table(tokens):
        q = rng.standard_normal(tokens + (D_h,))
        kt = np.ascontiguousarray(
            rng.standard_normal(tokens + (D_h,)).swapaxes(-1, -2))
        v = rng.standard_normal(tokens + (D_h,))
        scores = np.empty(tokens + (tokens[-1],))
        rowmax = np.empty(tokens + (1,))
        sums = np.empty(tokens + (1,))
        out = np.empty_like(q)
        return q, kt, v, scores, rowmax, sums, out

    spatial = table((F, A, S))
    temporal = table((A, F + 1))

    def run():
        for q, kt, v, scores, rowmax, sums, out in (spatial, temporal):
            np.matmul(q, kt, out=scores)
            np.multiply(scores, inv, out=scores)
            _softmax_inplace(scores, rowmax, sums)
            np.matmul(scores, v, out=out)

    return run


def _timed_joint(rng, F: int, N: int, D: int, A: int):
    D_h = D // A
    S = N + 1
    K = F * N + 1
    inv = 1.0 / math.sqrt(D_h)
    q = rng.standard_normal((F, A, S, D_h))
    kp = rng.standard_normal((A, F * N, D_h))
    vp = rng.standard_normal((A, F * N, D_h))
    kt = [
        np.ascontiguousarray(np.concatenate(
            [rng.standard_normal((A, 1, D_h)), kp], axis=1).swapaxes(-1, -2))
        for _ in range(F)
    ]
    va = [
        np.concatenate([rng.standard_normal((A, 1, D_h)), vp], axis=1)
        for _ in range(F)
    ]
    scores = np.empty((A, S, K))
    rowmax = np.empty((A, S, 1))
    sums = np.empty((A, S, 1))
    out = np.empty((A, S, D_h))

    def run():
        for f in range(F):
            np.matmul(q[f], kt[f], out=scores)
            np.multiply(scores, inv, out=scores)
            _softmax_inplace(scores, rowmax, sums)
            np.matmul(scores, va[f], out=out)

    return run


_TIMED_KERNELS = {"factorized": _timed_factorized, "joint": _timed_joint}


def time_attention(N: int, F_sweep, D: int = 128, A: int = 4, reps: int = 5):
    """Median kernel wall times over a sweep of F, plus log-log slopes.

    Returns (rows, slopes). Slopes are fitted per variant when the sweep has
    at least two distinct F values; otherwise the dict is empty. Allocation
    failure raises SizeError carrying the rows finished so far.
    """
    if reps < 5:
        raise ConfigError(f"need at least 5 repetitions, got {reps}")
    F_sweep = [int(f) for f in F_sweep]
    if not F_sweep:
        raise ConfigError("empty F sweep")
    if any(f < 1 for f in F_sweep):
        raise ConfigError(f"frame counts must be positive, got {F_sweep}")

    rows = []
    rng = np.random.default_rng(12345)
    with threadpool_limits(limits=1):
        for variant in ("factorized", "joint"):
            for F in F_sweep:
                report = attention_flops(F, N, D, A, 1, 1)
                per_layer = report.factorized if variant == "factorized" \
                    else report.joint
                try:
                    run = _TIMED_KERNELS[variant](rng, F, N, D, A)
                    run()  # warmup
                    samples = []
                    for _ in range(reps):
                        t0 = time.perf_counter()
                        run()
                        samples.append(time.perf_counter() - t0)
                except MemoryError as exc:
                    raise SizeError(
                        f"allocation failed for {variant} at F={F}, N={N}, "
                        f"D={D}",
                        partial=rows,
                    ) from exc
                rows.append(BenchRow(
                    variant=variant, F=F, N=N, D=D,
                    score_flops=per_layer["score"],
                    total_flops=sum(per_layer.values()),
                    median_ms=statistics.median(samples) * 1e3,
                ))

    slopes = {}
    for variant in ("factorized", "joint"):
        mine = [r for r in rows if r.variant == variant]
        if len({r.F for r in mine}) >= 2:
            x = np.log([r.F for r in mine])
            y = np.log([r.median_ms for r in mine])
            slopes[variant] = float(np.polyfit(x, y, 1)[0])
    return rows, slopes
