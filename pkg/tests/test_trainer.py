import math
import os

import numpy as np
import pytest

from mvrender.diffcore import ParamStore
from mvrender import config as cfgmod
from mvrender.scenes import generate_dataset
from mvrender.trainer import (AdamW, Ema, TrainError, CheckpointError,
                              onecycle_lr, save_checkpoint, load_checkpoint,
                              PretrainModel, train_step, fit, rng_for,
                              write_checkpoint, CSV_HEADER)


def tiny_cfg(**kw):
    base = dict(image_size=16, patch=4, embed=16, vit_depth=1, heads=2,
                volume_x=6, volume_y=6, volume_z=4, c_volume=8, l_max=0,
                c_semantic=4, n_coarse=6, n_fine=2, pixels_per_view=12,
                n_views=2, steps=4, attn_points=2)
    base.update(kw)
    return cfgmod.resolve_config(base)


def tiny_data(n_scenes=1, cfg=None):
    cfg = cfg or tiny_cfg()
    return generate_dataset(n_scenes, seed=5, n_views=cfg.n_views,
                            height=cfg.image_size, width=cfg.image_size,
                            num_classes=cfg.num_classes,
                            c_semantic=cfg.c_semantic)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_onecycle_endpoints_reference_constants():
    lr0 = onecycle_lr(0, 1000, 8e-4, 0.05, 100.0, 1000.0)
    lrT = onecycle_lr(1000, 1000, 8e-4, 0.05, 100.0, 1000.0)
    assert lr0 == pytest.approx(8e-6, rel=1e-12)
    assert lrT == pytest.approx(8e-9, rel=1e-12)


def test_onecycle_peak_at_phase_boundary():
    assert onecycle_lr(50, 1000, 8e-4) == pytest.approx(8e-4, rel=1e-15)
    # strictly below the peak on either side
    assert onecycle_lr(49, 1000, 8e-4) < 8e-4
    assert onecycle_lr(51, 1000, 8e-4) < 8e-4


def test_onecycle_closed_form_trace():
    total, max_lr, pct, div, fdiv = 400, 1e-3, 0.05, 100.0, 1000.0
    warm = pct * total
    lo = max_lr / div
    fin = lo / fdiv
    for step in range(0, total + 1, 7):
        if step <= warm:
            want = lo + (max_lr - lo) * (1 - math.cos(math.pi * step / warm)) / 2
        else:
            x = (step - warm) / (total - warm)
            want = fin + (max_lr - fin) * (1 + math.cos(math.pi * x)) / 2
        got = onecycle_lr(step, total, max_lr, pct, div, fdiv)
        assert abs(got - want) < 1e-12


def test_onecycle_rejects_out_of_range():
    with pytest.raises(ValueError):
        onecycle_lr(11, 10, 1e-3)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def one_param_store(value):
    store = ParamStore(dtype=np.float64)
    store.add("w", np.array(value))
    return store


def test_adamw_first_step_closed_form():
    store = one_param_store([0.0])
    opt = AdamW(store, weight_decay=0.0)
    store["w"].grad[...] = 1.0
    opt.step(lr=0.01)
    # m_hat = v_hat = 1 after one unit-gradient step
    expect = -0.01 / (1.0 + opt.eps)
    assert abs(store["w"].data[0] - expect) < 1e-12
    assert abs(store["w"].data[0] - (-0.01)) < 1e-10


def test_adamw_zero_grad_no_decay_is_identity():
    store = one_param_store([0.37, -1.4])
    opt = AdamW(store, weight_decay=0.0)
    store["w"].grad[...] = 0.0
    before = store["w"].data.copy()
    opt.step(lr=0.5)
    np.testing.assert_array_equal(store["w"].data, before)


def test_adamw_pure_decay_closed_form():
    store = one_param_store([0.7, -0.2])
    opt = AdamW(store, weight_decay=0.04)
    store["w"].grad[...] = 0.0
    before = store["w"].data.copy()
    opt.step(lr=0.01)
    np.testing.assert_allclose(store["w"].data,
                               before * (1.0 - 0.01 * 0.04), atol=1e-12)


def test_adamw_rejects_non_finite_gradient():
    store = one_param_store([0.0])
    opt = AdamW(store)
    store["w"].grad[...] = np.nan
    with pytest.raises(TrainError, match="w"):
        opt.step(lr=0.01)


def test_adamw_two_steps_match_reference_recurrence():
    rng = np.random.default_rng(0)
    g1, g2 = rng.standard_normal(3), rng.standard_normal(3)
    theta = rng.standard_normal(3)
    store = one_param_store(theta.copy())
    opt = AdamW(store, weight_decay=0.04)
    m = np.zeros(3)
    v = np.zeros(3)
    ref = theta.copy()
    for t, g in ((1, g1), (2, g2)):
        store["w"].grad[...] = g
        opt.step(lr=0.002)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.002 * 0.04 * ref
        ref -= 0.002 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t))
                                               + 1e-8)
    np.testing.assert_allclose(store["w"].data, ref, atol=1e-14)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def test_ema_hand_value():
    store = one_param_store([1.0])
    ema = Ema(store, decay=0.999)
    ema.shadow["w"][...] = 0.0
    ema.update(store)
    assert ema.shadow["w"][0] == pytest.approx(0.001, rel=1e-12)


def test_ema_fixed_point_exact():
    store = one_param_store([0.7, -3.1])
    ema = Ema(store, decay=0.999)
    before = ema.shadow["w"].copy()
    for _ in range(5):
        ema.update(store)
    np.testing.assert_array_equal(ema.shadow["w"], before)


def test_ema_decay_zero_copies_params():
    store = one_param_store([2.0])
    ema = Ema(store, decay=0.0)
    ema.shadow["w"][...] = -5.0
    ema.update(store)
    assert ema.shadow["w"][0] == 2.0


def test_ema_geometric_formula_100_steps():
    store = one_param_store([0.25])
    ema = Ema(store, decay=0.999)
    e0 = -1.5
    ema.shadow["w"][...] = e0
    for _ in range(100):
        ema.update(store)
    expect = 0.25 + (e0 - 0.25) * 0.999 ** 100
    assert abs(ema.shadow["w"][0] - expect) < 1e-12


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32),
               "b": rng.integers(0, 10, size=7),
               "c": np.array(2.5)}
    meta = {"step": 12, "note": "x"}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, tensors, meta)
    ck = load_checkpoint(path)
    assert ck.meta == meta
    for name, arr in tensors.items():
        np.testing.assert_array_equal(ck.tensors[name], arr)
        assert ck.tensors[name].dtype == arr.dtype


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, tensors, {"step": 1})
    ck = load_checkpoint(p1)
    save_checkpoint(p2, ck.tensors, ck.meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "ck.bin"
    save_checkpoint(p, {"w": np.ones(100)}, {"step": 0})
    blob = p.read_bytes()
    p.write_bytes(blob[:len(blob) - 50])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_checkpoint_corrupt_header(tmp_path):
    p = tmp_path / "ck.bin"
    save_checkpoint(p, {"w": np.ones(2)}, {"step": 0})
    blob = bytearray(p.read_bytes())
    blob[20] = 0xFF  # stomp inside the JSON header
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


# ---------------------------------------------------------------------------
# train_step / fit
# ---------------------------------------------------------------------------

def test_train_step_runs_and_is_deterministic():
    cfg = tiny_cfg()
    samples, teacher = tiny_data()

    def run():
        model = PretrainModel(cfg)
        opt = AdamW(model.store, cfg.weight_decay)
        ema = Ema(model.store, cfg.ema_decay)
        bd, lr = train_step(model, opt, ema, samples[0], teacher, cfg, 0)
        return bd, model.store["decoder.log_s"].data.copy()

    bd1, w1 = run()
    bd2, w2 = run()
    assert bd1.total == bd2.total  # bit-identical
    np.testing.assert_array_equal(w1, w2)
    assert np.isfinite(bd1.total)


def test_train_step_toggles_report_zero():
    cfg = tiny_cfg(toggle_depth=False, toggle_semantic=False)
    samples, teacher = tiny_data()
    model = PretrainModel(cfg)
    opt = AdamW(model.store, cfg.weight_decay)
    ema = Ema(model.store, cfg.ema_decay)
    bd, _ = train_step(model, opt, ema, samples[0], teacher, cfg, 0)
    assert bd.depth == 0.0 and bd.semantic == 0.0
    assert bd.sdf_near == 0.0 and bd.free == 0.0
    assert bd.color > 0


def test_fit_emits_rows_and_recombines(tmp_path):
    cfg = tiny_cfg(steps=3)
    samples, teacher = tiny_data(n_scenes=2, cfg=cfg)
    res = fit(samples, teacher, cfg, tmp_path / "run")
    assert len(res.rows) == 3
    text = open(res.metrics_path).read().splitlines()
    assert text[0] == CSV_HEADER
    assert len(text) == 4
    w = cfgmod.loss_weights(cfg)
    for line in text[1:]:
        f = line.split(",")
        total = float(f[8])
        recombined = (w.color * float(f[2]) + w.depth * float(f[3])
                      + w.semantic * float(f[4]) + w.eikonal * float(f[5])
                      + w.sdf * float(f[6]) + w.free * float(f[7]))
        assert total == pytest.approx(recombined, abs=1e-6)
    assert os.path.exists(res.checkpoint_path)


def test_fit_deterministic_rerun(tmp_path):
    cfg = tiny_cfg(steps=2)
    samples, teacher = tiny_data(cfg=cfg)
    r1 = fit(samples, teacher, cfg, tmp_path / "a")
    r2 = fit(samples, teacher, cfg, tmp_path / "b")
    strip = lambda rows: [r.rsplit(",", 1)[0] for r in rows]  # drop ms
    assert strip(r1.rows) == strip(r2.rows)
    b1 = open(r1.checkpoint_path, "rb").read()
    b2 = open(r2.checkpoint_path, "rb").read()
    assert b1 == b2


def test_fit_resume_bit_exact(tmp_path):
    cfg = tiny_cfg(steps=4, checkpoint_every=2)
    samples, teacher = tiny_data(n_scenes=2, cfg=cfg)
    full = fit(samples, teacher, cfg, tmp_path / "full")
    half = fit(samples, teacher, cfg, tmp_path / "half",
               resume=str(tmp_path / "full" / "checkpoint_000002.bin"))
    assert len(half.rows) == 2
    strip = lambda rows: [r.rsplit(",", 1)[0] for r in rows]
    assert strip(half.rows) == strip(full.rows[2:])
    assert (open(full.checkpoint_path, "rb").read()
            == open(half.checkpoint_path, "rb").read())


def test_fit_resume_rejects_config_mismatch(tmp_path):
    cfg = tiny_cfg(steps=2, checkpoint_every=1)
    samples, teacher = tiny_data(cfg=cfg)
    fit(samples, teacher, cfg, tmp_path / "run")
    other = tiny_cfg(steps=2, checkpoint_every=1, lr=5e-4)
    with pytest.raises(CheckpointError, match="config"):
        fit(samples, teacher, other, tmp_path / "run2",
            resume=str(tmp_path / "run" / "checkpoint_000001.bin"))


def test_fit_requires_samples(tmp_path):
    cfg = tiny_cfg()
    _, teacher = tiny_data(cfg=cfg)
    with pytest.raises(TrainError):
        fit([], teacher, cfg, tmp_path / "x")


def test_model_checkpoint_roundtrip_preserves_params(tmp_path):
    cfg = tiny_cfg()
    model = PretrainModel(cfg)
    opt = AdamW(model.store, cfg.weight_decay)
    ema = Ema(model.store, cfg.ema_decay)
    path = tmp_path / "ck.bin"
    write_checkpoint(path, model, opt, ema, cfg, step=0)
    ck = load_checkpoint(path)
    n_params = len(model.store)
    assert sum(1 for k in ck.tensors if k.startswith("param.")) == n_params
    assert sum(1 for k in ck.tensors if k.startswith("ema.")) == n_params
    assert sum(1 for k in ck.tensors if k.startswith("opt.m.")) == n_params
    for name, p in model.store.items():
        np.testing.assert_array_equal(ck.tensors[f"param.{name}"], p.data)


def test_rng_for_is_stable_and_role_separated():
    a = rng_for(3, 10, 1).integers(0, 1 << 30, size=4)
    b = rng_for(3, 10, 1).integers(0, 1 << 30, size=4)
    c = rng_for(3, 10, 2).integers(0, 1 << 30, size=4)
    np.testing.assert_array_equal(a, b)
    assert np.any(a != c)
