"""End-to-end acceptance gate.

Each test prints one PASS/FAIL line (run with `pytest -s` to see them all)
and asserts the same condition, so the suite is green exactly when every
criterion holds at its stated tolerance.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from stam.attention import init_block, msa_block, score_mac_counter
from stam.bench import attention_flops, measured_score_macs, time_attention
from stam.data import (
    SyntheticTaskSpec,
    VideoClip,
    gen_synthetic,
    read_checkpoint,
    read_dataset,
    uniform_sample,
    write_checkpoint,
    write_dataset,
)
from stam.model import (
    ModelConfig,
    desk_config,
    forward_batch,
    frame_attention_weights,
    init_model,
    spatial_tokens,
)
from stam.tensor import Tensor, cross_entropy, finite_difference_check, no_grad
from stam.trainer import TrainConfig, train


def _report(num, ok, detail):
    print(f"\ncriterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} failed: {detail}"


def _order_pair_spec(seed):
    return SyntheticTaskSpec(
        task="order-pair", classes=4, T=8, H=16, W=16, C=3, seed=seed
    )


def test_criterion_1_temporal_aggregator_ablation(tmp_path):
    # factorized vs mean-pool on order-pair, identical budget and seeds
    t0 = time.time()
    write_dataset(tmp_path / "tr.stamds",
                  gen_synthetic(_order_pair_spec(1), 2000), 4)
    write_dataset(tmp_path / "va.stamds",
                  gen_synthetic(_order_pair_spec(2), 400), 4)
    budget = TrainConfig(
        epochs=25, batch_size=32, peak_lr=3e-3, warmup_steps=50,
        min_lr=1.5e-4, grad_clip=1.0, seed=0,
    )
    acc = {}
    for variant in ("factorized", "mean-pool"):
        _, metrics = train(desk_config(variant), budget,
                           tmp_path / "tr.stamds", tmp_path / "va.stamds",
                           None, None)
        acc[variant] = metrics.epochs[-1]["val_acc"]
    wall = time.time() - t0
    ok = acc["factorized"] >= 0.90 and acc["mean-pool"] <= 0.40 and wall <= 900
    _report(1, ok, "factorized %.3f (need >= 0.90), mean-pool %.3f "
            "(need <= 0.40), %.0fs (limit 900)"
            % (acc["factorized"], acc["mean-pool"], wall))


def test_criterion_2_single_frame_oracle_equivalence():
    config = ModelConfig(F=1)
    worst = 0.0
    for seed in range(20):
        params = init_model(config, seed=seed)
        clips = np.random.default_rng(1000 + seed).random(
            (2, 1, config.H, config.W, config.C))
        with no_grad():
            a = spatial_tokens(clips, params, "spatial")
            b = spatial_tokens(clips, params, "joint")
        worst = max(worst, float(np.max(np.abs(a.data - b.data))))
    ok = worst < 1e-12
    _report(2, ok, "max |spatial - joint| over 20 seeds = %.3e "
            "(tolerance 1e-12)" % worst)


def test_criterion_3_gradient_integrity():
    t0 = time.time()
    config = desk_config()
    params = init_model(config, seed=0)
    rng = np.random.default_rng(0)
    clips = rng.random((2, config.F, config.H, config.W, config.C))
    labels = rng.integers(0, config.num_classes, size=2)

    def loss_fn(_tensors):
        return cross_entropy(forward_batch(clips, params), labels)

    err = finite_difference_check(
        loss_fn, params.named_tensors(), step=1e-5,
        max_entries_per_param=48, seed=0,
    )
    wall = time.time() - t0
    ok = err < 1e-4 and wall <= 120
    _report(3, ok, "max rel err %.3e (tolerance 1e-4), %.0fs (limit 120)"
            % (err, wall))


def test_criterion_4_complexity_law():
    # (a) simplified ratio at the operating point, exact
    report = attention_flops(F=16, N=196, D=768, A=12, L_space=12, L_time=6)
    ratio_ok = report.simplified_ratio == Fraction(9_834_496, 614_912)

    # (b) executed MACs equal analytic score counts, full model and kernels
    desk = attention_flops(F=8, N=16, D=64, A=4, L_space=2, L_time=2)
    clips = np.random.default_rng(0).random((1, 8, 16, 16, 3))
    counts_ok = True
    for variant, want in (("factorized", desk.factorized["score"]),
                          ("joint", desk.joint["score"])):
        params = init_model(desk_config(variant), seed=0)
        with no_grad(), score_mac_counter:
            forward_batch(clips, params)
        counts_ok = counts_ok and score_mac_counter.macs == want
    single = attention_flops(F=8, N=16, D=64, A=4, L_space=1, L_time=1)
    measured = measured_score_macs(F=8, N=16, D=64, A=4)
    counts_ok = counts_ok and measured == {
        "factorized": single.factorized["score"],
        "joint": single.joint["score"],
    }

    # (c) wall-time slopes over the F sweep
    t0 = time.time()
    _, slopes = time_attention(N=64, F_sweep=(8, 16, 32, 64), D=128, reps=5)
    wall = time.time() - t0
    slope_ok = (abs(slopes["factorized"] - 1.0) <= 0.15
                and abs(slopes["joint"] - 2.0) <= 0.2 and wall <= 600)

    ok = ratio_ok and counts_ok and slope_ok
    _report(4, ok, "ratio %s exact=%s; counters exact=%s; slopes "
            "factorized %.3f (1.0±0.15) joint %.3f (2.0±0.2), %.0fs"
            % (report.simplified_ratio, ratio_ok, counts_ok,
               slopes["factorized"], slopes["joint"], wall))


def test_criterion_5_attention_normalization():
    rng = np.random.default_rng(99)
    worst = 0.0
    mixes = 0
    for case in range(100):
        A = int(rng.integers(1, 5))
        D = A * int(rng.integers(1, 5)) * 4
        F = int(rng.integers(1, 5))
        N = int(rng.integers(2, 10))
        block = init_block(D, A, mlp_ratio=2, rng=rng)
        z_s = Tensor(rng.standard_normal((F, N + 1, D)))
        z_t = Tensor(rng.standard_normal((F + 1, D)))
        records = []
        with no_grad():
            msa_block(z_s, block, "spatial", layer=0, records=records)
            msa_block(z_t, block, "temporal", layer=0, records=records)
            msa_block(z_s, block, "joint", layer=0, records=records)
        # spatial and joint record per head per frame, temporal per head
        assert len(records) == A * (2 * F + 1)
        for rec in records:
            sums = rec.weights.sum(axis=-1)
            worst = max(worst, float(np.max(np.abs(sums - 1.0))))
        # spatial never mixes frames: perturbing one frame leaves the
        # others' outputs bit-identical
        if F >= 2:
            z_mod = z_s.data.copy()
            z_mod[0] += 100.0
            with no_grad():
                base = msa_block(z_s, block, "spatial").data
                moved = msa_block(Tensor(z_mod), block, "spatial").data
            if not np.array_equal(base[1:], moved[1:]):
                mixes += 1
    ok = worst <= 1e-6 and mixes == 0
    _report(5, ok, "max |row sum - 1| = %.3e over 100 configs x 3 variants "
            "(tolerance 1e-6); cross-frame leaks: %d" % (worst, mixes))


def test_criterion_6_sampling_contract():
    rng = np.random.default_rng(123)
    bad = 0
    for _ in range(10_000):
        T = int(rng.integers(1, 400))
        F = int(rng.integers(1, T + 1))
        idx = uniform_sample(T, F)
        ok = (len(idx) == F
              and all(0 <= i < T for i in idx)
              and all(b > a for a, b in zip(idx, idx[1:])))
        if F > 1:
            gaps = np.diff(idx)
            ok = ok and int(gaps.max() - gaps.min()) <= 1
        if F == T:
            ok = ok and idx == list(range(T))
        bad += 0 if ok else 1
    ok = bad == 0
    _report(6, ok, "10000 random (T, F) pairs, %d violations" % bad)


def test_criterion_7_determinism_and_formats(tmp_path):
    spec = SyntheticTaskSpec(task="order-pair", classes=2, T=4, H=8, W=8,
                             C=1, seed=11)
    config = ModelConfig(H=8, W=8, C=1, P=4, F=4, D=16, A_space=2, A_time=2,
                         L_space=1, L_time=1, mlp_ratio=2, num_classes=2)
    outs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        write_dataset(d / "tr.stamds", gen_synthetic(spec, 16), 2)
        cfg = TrainConfig(epochs=2, batch_size=8, warmup_steps=1, seed=7,
                          flip=True, crop_size=8)
        train(config, cfg, d / "tr.stamds", d / "tr.stamds",
              d / "c.stamck", d / "m.csv")
        outs.append(((d / "tr.stamds").read_bytes(),
                     (d / "c.stamck").read_bytes(),
                     (d / "m.csv").read_bytes()))
    runs_equal = outs[0] == outs[1]

    # byte-exact round-trips
    clips, ncls = read_dataset(tmp_path / "a" / "tr.stamds")
    write_dataset(tmp_path / "rt.stamds", clips, ncls)
    ds_ok = (tmp_path / "rt.stamds").read_bytes() == outs[0][0]
    cfg_text, arrays = read_checkpoint(tmp_path / "a" / "c.stamck")
    write_checkpoint(tmp_path / "rt.stamck", cfg_text, arrays)
    ck_ok = (tmp_path / "rt.stamck").read_bytes() == outs[0][1]

    ok = runs_equal and ds_ok and ck_ok
    _report(7, ok, "two runs bit-identical=%s, dataset round-trip=%s, "
            "checkpoint round-trip=%s" % (runs_equal, ds_ok, ck_ok))


SIGNAL_FRAME = 5


def _designated_frame_clips(count, seed, F=8, H=16, W=16, C=3, noise=0.08):
    # only frame SIGNAL_FRAME carries class signal; the rest is noise
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(count):
        label = i % 4
        frames = rng.normal(0.5, noise, size=(F, H, W, C))
        amp = rng.uniform(0.15, 0.35)
        axis = np.arange(W) if label < 2 else np.arange(H)
        # width-2 stripes so every 4x4 patch sees the oscillation itself
        stripe = np.where(((axis // 2) + label % 2) % 2 == 0, amp, -amp)
        if label < 2:
            pattern = np.broadcast_to(stripe[None, :, None], (H, W, C))
        else:
            pattern = np.broadcast_to(stripe[:, None, None], (H, W, C))
        frames[SIGNAL_FRAME] += pattern
        clips.append(VideoClip(
            frames=np.clip(frames, 0.0, 1.0).astype(np.float32),
            label=label, source=f"designated{i}"))
    return clips


def test_criterion_8_frame_attention_sanity(tmp_path):
    write_dataset(tmp_path / "tr.stamds",
                  _designated_frame_clips(400, seed=31), 4)
    val = _designated_frame_clips(100, seed=32)
    write_dataset(tmp_path / "va.stamds", val, 4)
    cfg = TrainConfig(epochs=4, batch_size=32, peak_lr=1e-3, warmup_steps=10,
                      min_lr=1e-4, grad_clip=1.0, seed=0)
    params, metrics = train(desk_config(), cfg, tmp_path / "tr.stamds",
                            tmp_path / "va.stamds", None, None)
    hits = sum(
        int(np.argmax(frame_attention_weights(clip.frames, params))
            == SIGNAL_FRAME)
        for clip in val
    )
    ok = hits >= 90
    _report(8, ok, "argmax on the signal frame in %d/100 val clips "
            "(need >= 90); val top1 %.2f"
            % (hits, metrics.epochs[-1]["val_acc"]))
