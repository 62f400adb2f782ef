import pytest
import torch

import weightgen as wg
from weightgen.arch import Batch, init_weightset, param_count
from weightgen.baselines import (
    MLPPredictorConfig,
    MLPWeightPredictor,
    ensemble_predict,
    mlp_generate,
    scale_teachers,
    train_kd_student,
    train_mlp_predictor,
)
from weightgen.codec import fit_norm_stats, fit_norm_stats_from_weightsets
from weightgen.data import load_dataset
from weightgen.errors import CapacityError, ConfigurationError
from weightgen.fitting import accuracy, predict_logits
from weightgen.generator import GeneratorConfig, WeightGenerator
from weightgen.rng import make_stream
from weightgen.zoo import build_pool

FAST_GRID = ({"lr": 5e-3, "epochs": 8, "weight_decay": 0.0, "augment": False},)


@pytest.fixture(scope="module")
def blob_data():
    return load_dataset("blobs", blob_train=300, blob_val=120, blob_test=120)


@pytest.fixture(scope="module")
def blob_pool(blob_data, tmp_path_factory):
    arch = wg.build_arch("cnn_tiny", blob_data.num_classes, blob_data.input_shape)
    return build_pool(blob_data, arch, pool_size=5, split=(4, 1),
                      hparam_grid=FAST_GRID, seed=31,
                      root=tmp_path_factory.mktemp("zoo"))


def batch_for(arch, n=8, seed=0):
    gen = make_stream(seed, "batch")
    return Batch(torch.randn(n, *arch.input_shape, generator=gen),
                 torch.randint(0, arch.num_classes, (n,), generator=gen))


# -- ensemble -----------------------------------------------------------------


def test_ensemble_single_member_is_identity(cnn_arch, cnn_teachers):
    batch = batch_for(cnn_arch)
    lone = ensemble_predict(cnn_teachers[:1], batch)
    direct = wg.functional_forward(cnn_arch, cnn_teachers[0], batch)
    assert torch.equal(lone, direct)


def test_ensemble_identical_members(cnn_arch, cnn_teachers):
    batch = batch_for(cnn_arch)
    same = ensemble_predict([cnn_teachers[0]] * 3, batch)
    direct = wg.functional_forward(cnn_arch, cnn_teachers[0], batch)
    assert torch.allclose(same, direct, atol=1e-6)


def test_ensemble_matches_elementwise_mean_oracle(cnn_arch, cnn_teachers):
    batch = batch_for(cnn_arch)
    got = ensemble_predict(cnn_teachers, batch)
    members = [wg.functional_forward(cnn_arch, ws, batch) for ws in cnn_teachers]
    expect = (members[0] + members[1] + members[2]) / 3
    assert torch.allclose(got, expect, atol=1e-12)


def test_ensemble_permutation_invariant(cnn_arch, cnn_teachers):
    batch = batch_for(cnn_arch)
    a = ensemble_predict(cnn_teachers, batch)
    b = ensemble_predict([cnn_teachers[2], cnn_teachers[0], cnn_teachers[1]], batch)
    assert torch.allclose(a, b, atol=1e-12)


def test_ensemble_empty_list():
    with pytest.raises(ConfigurationError):
        ensemble_predict([], batch_for(wg.build_arch("mlp_tiny", 10, (1, 8, 8))))


# -- distilled student ----------------------------------------------------------


def test_kd_student_zero_steps_is_chance(blob_pool, blob_data):
    teachers = [blob_pool.load_weights(m.id) for m in blob_pool.train_manifests[:2]]
    student, val_acc = train_kd_student(teachers, blob_data, temperature=2.0, steps=0)
    test_acc = accuracy(predict_logits(student.arch, student, blob_data.x_test),
                        blob_data.y_test)
    assert test_acc < 0.35  # random-init network stays near chance


def test_kd_student_tracks_converged_teacher(blob_pool, blob_data):
    best = max(blob_pool.train_manifests, key=lambda m: m.val_accuracy)
    teacher = blob_pool.load_weights(best.id)
    student, _ = train_kd_student([teacher, teacher], blob_data, temperature=2.0,
                                  steps=200, lr=5e-3)
    t_acc = accuracy(predict_logits(teacher.arch, teacher, blob_data.x_test),
                     blob_data.y_test)
    s_acc = accuracy(predict_logits(student.arch, student, blob_data.x_test),
                     blob_data.y_test)
    assert s_acc >= t_acc - 0.02


# -- MLP predictor ---------------------------------------------------------------


def test_mlp_predictor_shapes_and_validity(cnn_arch, cnn_teachers):
    cfg = MLPPredictorConfig(n_teachers=3, steps=0, seed=5)
    predictor = MLPWeightPredictor(cnn_arch, cfg,
                                   fit_norm_stats_from_weightsets(cnn_teachers))
    student = mlp_generate(predictor, cnn_teachers)
    student.validate()
    for ls in cnn_arch.layers:
        seq, d_layer = ls.token_shape()
        assert predictor.hidden_widths[ls.name] == min(4 * d_layer, 1024)


def test_mlp_predictor_rejects_wrong_teacher_count(cnn_arch, cnn_teachers):
    predictor = MLPWeightPredictor(cnn_arch, MLPPredictorConfig(n_teachers=3))
    with pytest.raises(ConfigurationError):
        predictor.generate(cnn_teachers[:2])


def test_mlp_param_count_exceeds_generator_for_deep_preset(cnn_arch, cnn_teachers):
    # param_count comparison at the desk-default generator size
    predictor = MLPWeightPredictor(cnn_arch, MLPPredictorConfig(n_teachers=3))
    generator = WeightGenerator(cnn_arch, GeneratorConfig(),
                                fit_norm_stats_from_weightsets(cnn_teachers))
    assert len(cnn_arch.layers) >= 4
    assert predictor.num_parameters() > generator.num_parameters()


def test_mlp_training_improves_over_init(blob_pool, blob_data):
    cfg = MLPPredictorConfig(n_teachers=2, steps=120, lr=3e-4, reload_interval=60,
                             seed=9)
    stats = fit_norm_stats(blob_pool)
    teachers = [blob_pool.load_weights(m.id) for m in blob_pool.train_manifests[:2]]

    untrained = MLPWeightPredictor(blob_pool.arch(), cfg, stats)
    s0 = untrained.generate(teachers)
    acc0 = accuracy(predict_logits(s0.arch, s0, blob_data.x_val), blob_data.y_val)

    trained = train_mlp_predictor(blob_pool, blob_data, cfg, stats)
    s1 = trained.generate(teachers)
    acc1 = accuracy(predict_logits(s1.arch, s1, blob_data.x_val), blob_data.y_val)
    assert acc1 > acc0 + 0.1


# -- teacher-count scaling --------------------------------------------------------


@pytest.fixture()
def pair_generator(cnn_arch, cnn_teachers):
    cfg = GeneratorConfig(d_model=32, num_blocks=1, num_heads=4, ffn_dim=64,
                          n_teachers=2, max_seq_len=256, cutoff_rate=0.0, seed=0)
    return WeightGenerator(cnn_arch, cfg, fit_norm_stats_from_weightsets(cnn_teachers))


def test_scale_modes_coincide_for_two_teachers(pair_generator, cnn_teachers):
    pair = cnn_teachers[:2]
    heuristic, _ = scale_teachers(pair, "heuristic", pair_generator)
    concat, _ = scale_teachers(pair, "concatenate", pair_generator)
    direct = pair_generator.generate_student(pair)
    for k in direct.tensors:
        assert torch.equal(heuristic.tensors[k], direct.tensors[k])
        assert torch.equal(concat.tensors[k], direct.tensors[k])


def test_heuristic_three_teachers_two_calls(pair_generator, cnn_teachers, monkeypatch):
    calls = {"n": 0}
    real = pair_generator.generate_student

    def counting(*args, **kwargs):
        calls["n"] += 1
        return real(*args, **kwargs)

    monkeypatch.setattr(pair_generator, "generate_student", counting)
    _, log = scale_teachers(cnn_teachers, "heuristic", pair_generator)
    assert calls["n"] == 2
    assert len(log) == 2


def test_heuristic_requires_two_slot_generator(cnn_arch, cnn_teachers):
    cfg = GeneratorConfig(d_model=32, num_blocks=1, num_heads=4, ffn_dim=64,
                          n_teachers=3, max_seq_len=256, seed=0)
    gen3 = WeightGenerator(cnn_arch, cfg, fit_norm_stats_from_weightsets(cnn_teachers))
    with pytest.raises(ConfigurationError):
        scale_teachers(cnn_teachers, "heuristic", gen3)


def test_concatenate_capacity_error(cnn_arch, cnn_teachers):
    cfg = GeneratorConfig(d_model=32, num_blocks=1, num_heads=4, ffn_dim=64,
                          n_teachers=2, max_seq_len=80, cutoff_rate=0.0, seed=0)
    gen = WeightGenerator(cnn_arch, cfg, fit_norm_stats_from_weightsets(cnn_teachers))
    with pytest.raises(CapacityError):
        scale_teachers(cnn_teachers, "concatenate", gen)  # 1 + 3*32 > 80


def test_scale_teachers_m_validation(pair_generator, cnn_teachers):
    with pytest.raises(ConfigurationError):
        scale_teachers(cnn_teachers[:1], "heuristic", pair_generator)
    with pytest.raises(ConfigurationError):
        scale_teachers(cnn_teachers, "heuristic", pair_generator, m=2)
    with pytest.raises(ConfigurationError):
        scale_teachers(cnn_teachers[:2], "nonsense", pair_generator)
