import copy

import pytest
import torch

from promptalign.detector import Detector, ModelConfig, edge_config
from promptalign.pipeline import (
    Flags,
    PretrainedModels,
    TrainConfig,
    TrainingDiverged,
    adapt_cloud_model,
    generate_pseudo_labels,
    new_cloud_state,
    parameter_hash,
    pretrain,
    retrain_edge_model,
    run_collaboration_cycle,
    train_supervised,
)
from promptalign.synthdata import BenchmarkConfig, DomainSpec, build_benchmark, make_dataset

MODEL = ModelConfig(image_size=32, backbone_channels=(8, 16, 16), d_model=16, n_heads=2, enc_layers=1,
                    dec_layers=1, ffn_dim=32, n_queries=6, d_prompt=8, n_components=4)


def small_cfg(**kw):
    base = dict(batch_size=4, pretrain_epochs=2, pretrain_lr_drop_epochs=1, adapt_epochs=1,
                edge_pretrain_epochs=1, edge_epochs=1, disc_hidden=8)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def bench():
    targets = [DomainSpec(name="dim", brightness=0.6, noise_std=0.05, seed=50),
               DomainSpec(name="noisy", noise_std=0.1, seed=51)]
    return build_benchmark(BenchmarkConfig(image_size=32, n_source=12, n_target=16, targets=targets))


def fresh_state(seed=0):
    return new_cloud_state(MODEL, seed, disc_hidden=8)


def full_hash(state):
    return parameter_hash(state.detector) + parameter_hash(state.discriminators)


def test_zero_epochs_leave_parameters_unchanged(bench):
    source, streams = bench
    state = fresh_state()
    before = full_hash(state)
    state, hist = adapt_cloud_model(source, streams[0].adapt, state, small_cfg(adapt_epochs=0), 0)
    assert hist == [] and full_hash(state) == before and state.cycle == 1

    edge = Detector(edge_config(MODEL))
    h = parameter_hash(edge)
    retrain_edge_model(edge, streams[0].adapt.images, [(i, []) for i in range(8)], small_cfg(), 0)
    assert parameter_hash(edge) == h
    labels = [(i, source.truth(0)) for i in range(8)]
    retrain_edge_model(edge, streams[0].adapt.images, labels, small_cfg(edge_epochs=0), 0)
    assert parameter_hash(edge) == h


def test_all_components_off_equals_supervised_fine_tune(bench):
    source, streams = bench
    cfg = small_cfg(flags=Flags(False, False, False), adapt_epochs=2)
    a = fresh_state(3)
    b = copy.deepcopy(a)
    _, hist = adapt_cloud_model(source, streams[0].adapt, a, cfg, seed=5)
    ref = train_supervised(b.detector, source.images, source.truth(), 2, cfg.lr_detector, 5, cfg)
    assert hist == ref
    assert parameter_hash(a.detector) == parameter_hash(b.detector)


def test_adaptation_is_deterministic(bench):
    source, streams = bench
    cfg = small_cfg(adapt_epochs=2)
    runs = []
    for _ in range(2):
        state, hist = adapt_cloud_model(source, streams[0].adapt, fresh_state(1), cfg, seed=2)
        runs.append((full_hash(state), hist))
    assert runs[0] == runs[1]
    assert all(torch.isfinite(torch.tensor(runs[0][1])))


def test_adaptation_changes_bank_and_discriminators(bench):
    source, streams = bench
    state = fresh_state()
    slow0 = state.detector.vpg.bank.slow.clone()
    d0 = parameter_hash(state.discriminators)
    adapt_cloud_model(source, streams[0].adapt, state, small_cfg(), 0)
    assert not torch.equal(slow0, state.detector.vpg.bank.slow)
    assert parameter_hash(state.discriminators) != d0


def test_target_truth_never_read_in_training(bench):
    source, streams = bench
    target = streams[0].adapt
    state, _ = adapt_cloud_model(source, target, fresh_state(), small_cfg(), 0)
    assert target.guarded_reads == 0
    edge = Detector(edge_config(MODEL))
    pseudo, _ = generate_pseudo_labels(state, target, 0.05, Flags())
    retrain_edge_model(edge, target.images, pseudo, small_cfg(), 0)
    assert target.guarded_reads == 0


def test_pseudo_labels_do_not_mutate_state(bench):
    _, streams = bench
    state = fresh_state()
    state.detector.train()
    before = full_hash(state)
    generate_pseudo_labels(state, streams[0].adapt, 0.3, Flags())
    assert full_hash(state) == before
    assert state.detector.training


def test_tau_limits_and_empty_target(bench):
    _, streams = bench
    state = fresh_state()
    labels, kept = generate_pseudo_labels(state, streams[0].adapt, 0.999999, Flags())
    assert len(labels) == 8 and all(lb == [] for _, lb in labels)
    assert all(not bool(k.keep.any()) for k in kept)
    empty = make_dataset(DomainSpec(), [], "target", size=32)
    assert generate_pseudo_labels(state, empty, 0.5) == ([], [])


def test_non_finite_loss_aborts_with_step(bench):
    source, streams = bench
    state = fresh_state()
    with torch.no_grad():
        state.detector.heads.class_head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as err:
        adapt_cloud_model(source, streams[0].adapt, state, small_cfg(), 0)
    assert err.value.step == 0


def test_empty_inputs_rejected(bench):
    source, _ = bench
    empty = make_dataset(DomainSpec(), [], "target", size=32)
    with pytest.raises(ValueError):
        adapt_cloud_model(source, empty, fresh_state(), small_cfg(), 0)
    with pytest.raises(ValueError):
        run_collaboration_cycle(source, [], None, small_cfg(), 0)


def test_state_config_check(bench):
    state = fresh_state()
    state.config_hash = "0" * 16
    with pytest.raises(ValueError):
        state.check()


def test_edge_must_be_smaller(bench):
    source, _ = bench
    with pytest.raises(ValueError):
        pretrain(source, MODEL, MODEL, small_cfg(), 0)
    with pytest.raises(ValueError):
        wide = ModelConfig(**{**MODEL.to_dict(), "d_model": 32, "ffn_dim": 64, "adaptation_modules": False})
        pretrain(source, MODEL, wide, small_cfg(), 0)


def test_collaboration_cycle_reports(bench):
    source, streams = bench
    cfg = small_cfg()
    models = pretrain(source, MODEL, edge_config(MODEL), cfg, 0)
    assert isinstance(models, PretrainedModels)
    snapshot = copy.deepcopy(models)
    seen = []
    reports = run_collaboration_cycle(source, streams, models, cfg, 0, on_cycle=lambda r, m: seen.append(r.cycle))
    assert [r.cycle for r in reports] == [1, 2] == seen
    assert [r.stream for r in reports] == ["dim", "noisy"]
    for r in reports:
        assert 0 <= r.pseudo_label_map <= 100 and 0 <= r.edge_map <= 100
        assert r.adapted and r.dqfa and r.tiafa and r.vpg
    assert models.cloud.cycle == 2

    again = run_collaboration_cycle(source, streams, snapshot, cfg, 0)
    assert [r.to_dict() for r in again] == [r.to_dict() for r in reports]


def test_no_update_baseline_cycle(bench):
    source, streams = bench
    cfg = small_cfg(adapt=False)
    models = pretrain(source, MODEL, edge_config(MODEL), cfg, 0)
    h = parameter_hash(models.cloud.detector)
    (report,) = run_collaboration_cycle(source, streams[:1], models, cfg, 0)
    assert not report.adapted and not (report.dqfa or report.tiafa or report.vpg)
    assert report.adapt_loss == []
    assert parameter_hash(models.cloud.detector) == h
