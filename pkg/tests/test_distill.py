import copy

import numpy as np
import pytest
import torch

from helpers import FD_EPS, relu_margin
from mbtransfer.core import Classifier, cross_entropy, finite_difference_gradcheck, param_checksum, torch_generator
from mbtransfer.data import GapConfig, MaskLibrary, apply_cloud_masks, generate_synthetic_pairs, split_dataset
from mbtransfer.distill import (OptimSpec, TeacherSet, TrainSettings, f2_losses, fine_tune_source,
                                generate_pseudo_labels, load_checkpoint, predict, save_checkpoint, train_auxiliaries,
                                train_supervised, train_target)
from mbtransfer.errors import ConfigError, InvalidInputError, ShapeError

BLOCKS = ((4, 3, 2), (8, 3, 2))


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic_pairs(GapConfig(num_classes=3, samples_per_class=30, image_size=8), seed=0)
    ds = apply_cloud_masks(ds, 0.5, 0.5, 1.0, MaskLibrary.procedural(), seed=0)
    return split_dataset(ds, 0.2, 4, seed=0)


def _settings(epochs=2, **kw):
    return TrainSettings(epochs=epochs, batch_size=16, blocks=BLOCKS, **kw)


def _model(c, m=3, seed=0, **kw):
    return Classifier(c, m, BLOCKS, generator=torch_generator(seed), **kw)


@pytest.fixture(scope="module")
def teachers(data):
    f_s, _ = fine_tune_source(_model(3, seed=1), data.view("train-labeled"), _settings(3))
    aux_opt, aux_sar, _ = train_auxiliaries(f_s, data.view("train-unlabeled"), _settings(2))
    return TeacherSet(f_s, aux_opt, aux_sar)


# ---------------------------------------------------------------- fine-tuning

def test_zero_epochs_head_is_initialisation(data):
    f_pre = _model(3, m=5)
    f_s, hist = fine_tune_source(f_pre, data.view("train-labeled"), _settings(0))
    ref = copy.deepcopy(f_pre)
    ref.reset_head(3, torch_generator(0, "finetune", "head"))
    assert hist == [] and f_s.num_classes == 3
    assert torch.equal(f_s.head.weight, ref.head.weight) and torch.equal(f_s.head.bias, ref.head.bias)


def test_frozen_encoder_bit_identical(data):
    f_pre = _model(3, m=5)
    f_s, _ = fine_tune_source(f_pre, data.view("train-labeled"), _settings(5))
    for a, b in zip(f_pre.encoder_parameters(), f_s.encoder_parameters()):
        assert torch.equal(a, b)
    assert not torch.equal(f_pre.head.weight[:3], f_s.head.weight)


def test_unfrozen_encoder_moves(data):
    f_pre = _model(3, m=5)
    f_s, _ = fine_tune_source(f_pre, data.view("train-labeled"), _settings(3), freeze_encoder=False)
    assert any(not torch.equal(a, b) for a, b in zip(f_pre.encoder_parameters(), f_s.encoder_parameters()))


def test_single_sample_per_class_overfits(data):
    one = split_dataset(data, 0.2, 1, seed=0).view("train-labeled")
    f_pre = Classifier(3, 3, generator=torch_generator(2))
    settings = TrainSettings(epochs=200, batch_size=8, optim=OptimSpec(lr=1e-2))
    f_s, hist = fine_tune_source(f_pre, one, settings, freeze_encoder=False)
    assert (predict(f_s, one.optical) == one.labels).all()
    assert hist[-1] < hist[0]


def test_fine_tune_needs_labels(data):
    with pytest.raises(InvalidInputError):
        fine_tune_source(_model(3), data.view("train-unlabeled"), _settings())


# ---------------------------------------------------------------- pseudo-labels

def test_equal_logits_give_uniform_pseudo_labels(data):
    model = _model(3, head_init="zeros")
    for pl in generate_pseudo_labels(model, data.optical[:5]):
        np.testing.assert_allclose(pl.soft, 1 / 3, atol=1e-7)
        assert pl.confidence == pytest.approx(1 / 3, abs=1e-7)


def test_pseudo_labels_match_direct_softmax(data):
    model = _model(3, seed=4)
    x = torch.from_numpy(data.optical[:10])
    with torch.no_grad():
        oracle = torch.softmax(model(x), -1).double().numpy()
    pls = generate_pseudo_labels(model, data.optical[:10])
    np.testing.assert_array_equal(np.stack([p.soft for p in pls]), oracle)
    assert [p.hard for p in pls] == oracle.argmax(1).tolist()


def test_identical_inputs_identical_pseudo_labels(data):
    x = np.repeat(data.optical[:1], 3, axis=0)
    pls = generate_pseudo_labels(_model(3), x)
    assert all(np.array_equal(p.soft, pls[0].soft) for p in pls)


def test_pseudo_labels_shape_mismatch(data):
    with pytest.raises(ShapeError):
        generate_pseudo_labels(_model(6), data.optical[:4])


# ---------------------------------------------------------------- F1

def test_f1_zero_epochs_returns_initialisation(data):
    f_s = _model(3)
    aux_opt, aux_sar, _ = train_auxiliaries(f_s, data.view("train-unlabeled"), _settings(0))
    ref_opt = Classifier(3, 3, BLOCKS, generator=torch_generator(0, "aux-opt", "init"))
    ref_sar = Classifier(3, 3, BLOCKS, generator=torch_generator(0, "aux-sar", "init"))
    assert param_checksum(aux_opt) == param_checksum(ref_opt)
    assert param_checksum(aux_sar) == param_checksum(ref_sar)


def test_f1_modality_isolation_and_frozen_source(data):
    f_s = _model(3)
    before = param_checksum(f_s)
    seen = {"aux-opt": set(), "aux-sar": set()}
    orig = Classifier.forward

    def spy(self, x):
        if self.role in seen:
            seen[self.role].add(x.shape[1])
        return orig(self, x)

    pool = data.view("train-unlabeled")
    # SAR tensors differ from optical so a wrong routing would be visible
    assert not np.array_equal(pool.sar, pool.optical)
    Classifier.forward = spy
    try:
        train_auxiliaries(f_s, pool, _settings(1))
    finally:
        Classifier.forward = orig
    assert seen == {"aux-opt": {3}, "aux-sar": {data.sar.shape[1]}}
    assert param_checksum(f_s) == before


def test_f1_sar_student_learns_from_paired_optical(data, monkeypatch):
    import mbtransfer.distill as distill
    pool = data.view("train-unlabeled")
    calls = []
    real = distill.soft_targets

    def record(model, x, mode="soft"):
        calls.append(x)
        return real(model, x, mode)

    monkeypatch.setattr(distill, "soft_targets", record)
    train_auxiliaries(_model(3), pool, _settings(1), train_opt=False)
    opt_rows = {bytes(r.tobytes()) for r in pool.optical}
    assert calls and all(bytes(r.numpy().tobytes()) in opt_rows for x in calls for r in x)


def test_f1_agreement_on_separable_toy():
    g = GapConfig(num_classes=3, samples_per_class=60, image_size=8, info_opt=1.0, info_sar=1.0, redundancy=1.0,
                  noise_opt=0.2, noise_sar=0.2, clutter=0.2)
    ds = split_dataset(generate_synthetic_pairs(g, 0), 0.0, 2, 0)
    blocks = ((8, 3, 2), (16, 3, 2))
    f_s = Classifier(3, 3, blocks, generator=torch_generator(0))
    train_supervised(f_s, ds.optical, ds.labels, TrainSettings(epochs=60, batch_size=32, optim=OptimSpec(lr=3e-3),
                                                               blocks=blocks))
    with torch.no_grad():
        f_s.head.weight.mul_(10)
        f_s.head.bias.mul_(10)
    pool = ds.view("train-unlabeled")
    hard = predict(f_s, pool.optical)
    assert (hard == ds.labels[pool.indices]).all()
    aux_opt, aux_sar, _ = train_auxiliaries(f_s, pool, TrainSettings(epochs=30, batch_size=32,
                                                                     optim=OptimSpec(lr=3e-3), blocks=blocks))
    assert (predict(aux_opt, pool.optical) == hard).mean() >= 0.95
    assert (predict(aux_sar, pool.sar) == hard).mean() >= 0.95


def test_f1_empty_pool(data):
    empty = split_dataset(data, 0.2, 24, seed=0).view("train-unlabeled")
    with pytest.raises(InvalidInputError):
        train_auxiliaries(_model(3), empty, _settings())


# ---------------------------------------------------------------- F2

def test_teacher_class_mismatch():
    with pytest.raises(ConfigError):
        TeacherSet(_model(3), _model(3, m=4), _model(3))


def test_irm_off_total_is_plain_sum(data, teachers):
    x_opt, x_sar = torch.from_numpy(data.optical[:16]), torch.from_numpy(data.sar[:16])
    target = _model(6, seed=5)
    total, lo, ls, lc, _ = f2_losses(target, teachers, x_opt, x_sar, irm_enabled=False)
    assert total.item() == pytest.approx(lo.item() + ls.item() + lc.item(), abs=1e-6)


def test_equal_scores_make_irm_a_no_op(data):
    t = _model(3, seed=7)
    same = TeacherSet(t, copy.deepcopy(t), copy.deepcopy(t))
    x = torch.from_numpy(data.optical[:16])
    target = _model(6, seed=5)
    on = f2_losses(target, same, x, x, irm_enabled=True)
    off = f2_losses(target, same, x, x, irm_enabled=False)
    assert (on[4].rho_opt, on[4].rho_sar) == (1.0, 1.0)
    for a, b in zip(on[:4], off[:4]):
        assert a.item() == pytest.approx(b.item(), abs=1e-6)


def _f64_fused(seed, x):
    while True:
        target = Classifier(6, 3, BLOCKS, generator=torch_generator(seed, "fused"), dtype=torch.float64)
        if relu_margin(target, x) > 10 * FD_EPS:
            return target
        seed += 1


def test_three_teacher_agreement_gradient():
    g = torch_generator(11)
    x = torch.rand(6, 3, 8, 8, dtype=torch.float64, generator=g)
    t = Classifier(3, 3, BLOCKS, generator=g, dtype=torch.float64)
    same = TeacherSet(t, copy.deepcopy(t), copy.deepcopy(t))
    fused_x = torch.cat([x, x], 1)
    target = _f64_fused(0, fused_x)
    params = list(target.parameters())
    total, *_, ratios = f2_losses(target, same, x, x, irm_enabled=True)
    grads = torch.autograd.grad(total, params)
    with torch.no_grad():
        p = torch.softmax(t(x), -1)
    # finite-difference oracle for grad CE(p, target logits)
    scale = 1 + ratios.rho_opt + ratios.rho_sar
    with torch.no_grad():
        for w, gw in zip(params, grads):
            flat, gflat = w.view(-1), gw.reshape(-1)
            for i in range(0, flat.numel(), max(1, flat.numel() // 7)):
                o = flat[i].item()
                flat[i] = o + FD_EPS
                up = cross_entropy(p, target(fused_x)).item()
                flat[i] = o - FD_EPS
                dn = cross_entropy(p, target(fused_x)).item()
                flat[i] = o
                assert gflat[i].item() == pytest.approx(scale * (up - dn) / (2 * FD_EPS), abs=1e-5)


def test_ratios_are_gradient_inert():
    g = torch_generator(12)
    x_opt = torch.rand(6, 3, 8, 8, dtype=torch.float64, generator=g)
    x_sar = torch.rand(6, 3, 8, 8, dtype=torch.float64, generator=g)
    mk = [Classifier(3, 3, BLOCKS, generator=g, dtype=torch.float64) for _ in range(3)]
    ts = TeacherSet(*mk)
    target = _f64_fused(20, torch.cat([x_opt, x_sar], 1))
    ratios = f2_losses(target, ts, x_opt, x_sar, irm_enabled=True)[4]
    assert ratios.rho_opt != 1.0
    err = finite_difference_gradcheck(lambda: f2_losses(target, ts, x_opt, x_sar, irm_enabled=True)[0],
                                      list(target.parameters()), eps=FD_EPS)
    assert err < 1e-4


def test_train_target_trace_and_frozen_teachers(data, teachers):
    before = teachers.checksums()
    pool = data.view("train-unlabeled")
    target, trace = train_target(teachers, pool, True, _settings(3))
    assert teachers.checksums() == before
    assert len(trace) == 3 * -(-len(pool) // 16)
    for r in trace:
        assert abs(r.total - (r.rho_opt * r.loss_opt + r.rho_sar * r.loss_sar + r.loss_src)) <= 1e-5 * max(1, r.total)
        assert 0.2 <= r.rho_opt <= 5.0 and r.rho_opt_pre * r.rho_sar_pre == pytest.approx(1.0, abs=1e-9)
    assert target.in_channels == 3 + data.sar.shape[1]


def test_train_target_irm_off_logs_unit_weights(data, teachers):
    _, trace = train_target(teachers, data.view("train-unlabeled"), False, _settings(1))
    assert all(r.rho_opt == 1.0 == r.rho_sar for r in trace)
    for r in trace:
        assert r.total == pytest.approx(r.loss_opt + r.loss_sar + r.loss_src, abs=1e-5)


def test_train_target_deterministic(data, teachers):
    pool = data.view("train-unlabeled")
    a, ta = train_target(teachers, pool, True, _settings(2))
    b, tb = train_target(teachers, pool, True, _settings(2))
    assert ta == tb and param_checksum(a) == param_checksum(b)


def test_checkpoint_round_trip(tmp_path, teachers):
    save_checkpoint(teachers.aux_sar, tmp_path / "m.pt")
    back = load_checkpoint(tmp_path / "m.pt")
    assert param_checksum(back) == param_checksum(teachers.aux_sar)
    assert back.descriptor() == teachers.aux_sar.descriptor()
