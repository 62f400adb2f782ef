import pytest
import torch

import weightgen as wg
from weightgen.arch import init_weightset
from weightgen.data import load_dataset
from weightgen.errors import ConfigurationError
from weightgen.fitting import accuracy, predict_logits
from weightgen.rng import make_stream
from weightgen.zoo import (
    build_pool,
    load_pool,
    load_weightset,
    sample_manifests,
    sample_teachers,
    save_weightset,
)

FAST_GRID = (
    {"lr": 5e-3, "epochs": 10, "weight_decay": 0.0, "augment": False},
    {"lr": 2e-3, "epochs": 10, "weight_decay": 0.0, "augment": True},
)


@pytest.fixture(scope="module")
def blob_data():
    return load_dataset("blobs", blob_train=300, blob_val=120, blob_test=120)


@pytest.fixture(scope="module")
def blob_pool(blob_data, tmp_path_factory):
    arch = wg.build_arch("cnn_tiny", blob_data.num_classes, blob_data.input_shape)
    root = tmp_path_factory.mktemp("zoo")
    return build_pool(blob_data, arch, pool_size=5, split=(3, 2),
                      hparam_grid=FAST_GRID, seed=11, root=root)


def test_split_arithmetic(blob_pool):
    assert len(blob_pool.train_manifests) == 3
    assert len(blob_pool.eval_manifests) == 2
    train_ids = {m.id for m in blob_pool.train_manifests}
    eval_ids = {m.id for m in blob_pool.eval_manifests}
    assert not train_ids & eval_ids


def test_single_arch_fingerprint(blob_pool):
    fps = {m.arch_fingerprint for m in blob_pool.manifests}
    assert len(fps) == 1


def test_manifest_embeds_arch_text(blob_pool):
    for m in blob_pool.manifests:
        assert "conv1" in m.arch_text and "fc2" in m.arch_text


def test_stored_val_accuracy_matches_reevaluation(blob_pool, blob_data):
    # re-evaluation oracle
    for m in blob_pool.manifests:
        ws = load_weightset(m.path)
        acc = accuracy(predict_logits(ws.arch, ws, blob_data.x_val), blob_data.y_val)
        assert abs(acc - m.val_accuracy) < 1e-3


def test_pool_reload_and_weight_roundtrip(blob_pool):
    reloaded = load_pool(blob_pool.root)
    assert [m.to_dict() for m in reloaded.manifests] == \
        [m.to_dict() for m in blob_pool.manifests]
    m = blob_pool.manifests[0]
    ws = load_weightset(m.path)
    again = load_weightset(m.path)
    assert all(torch.equal(ws.tensors[k], again.tensors[k]) for k in ws.tensors)


def test_weightset_save_load_bit_identical(tmp_path, cnn_arch):
    ws = init_weightset(cnn_arch, make_stream(0, "w"))
    path = save_weightset(ws, tmp_path / "w.pt")
    back = load_weightset(path)
    assert all(torch.equal(ws.tensors[k], back.tensors[k]) for k in ws.tensors)


def test_split_mismatch_rejected(blob_data):
    arch = wg.build_arch("cnn_tiny", blob_data.num_classes, blob_data.input_shape)
    with pytest.raises(ConfigurationError):
        build_pool(blob_data, arch, pool_size=5, split=(4, 2), hparam_grid=FAST_GRID)


def test_sample_whole_split_and_determinism(blob_pool):
    ids_a = [m.id for m in sample_manifests(blob_pool, 3, "train", make_stream(1, "s"))]
    ids_b = [m.id for m in sample_manifests(blob_pool, 3, "train", make_stream(1, "s"))]
    assert ids_a == ids_b
    assert sorted(ids_a) == sorted(m.id for m in blob_pool.train_manifests)
    assert len(set(ids_a)) == 3


def test_sample_insufficient_split(blob_pool):
    with pytest.raises(ConfigurationError):
        sample_manifests(blob_pool, 3, "eval", make_stream(0, "s"))


def test_sample_teachers_loads_weightsets(blob_pool):
    teachers = sample_teachers(blob_pool, 2, "train", make_stream(2, "s"))
    assert len(teachers) == 2
    for ws in teachers:
        ws.validate()


def test_sampling_frequency_uniform():
    # frequency oracle over a synthetic 10-member split
    from weightgen.zoo import CheckpointManifest, TeacherPool

    manifests = [
        CheckpointManifest(f"t{i:03d}", "fp", 0, {}, 0.9, "unused", "train")
        for i in range(10)
    ] + [CheckpointManifest("e000", "fp", 0, {}, 0.9, "unused", "eval")]
    pool = TeacherPool(root=None, dataset_id="synthetic", manifests=manifests)
    rng = make_stream(9, "freq")
    counts = {f"t{i:03d}": 0 for i in range(10)}
    draws = 1000
    for _ in range(draws):
        for m in sample_manifests(pool, 3, "train", rng):
            counts[m.id] += 1
    for cp_id, count in counts.items():
        assert abs(count / draws - 0.3) < 0.05, (cp_id, count)


def test_access_log_records_loads(blob_pool):
    blob_pool.reset_access_log()
    train_id = blob_pool.train_manifests[0].id
    eval_id = blob_pool.eval_manifests[0].id
    blob_pool.load_weights(train_id)
    assert blob_pool.accessed_eval_ids() == set()
    blob_pool.load_weights(eval_id)
    assert blob_pool.accessed_eval_ids() == {eval_id}
    blob_pool.reset_access_log()
