import shutil
from pathlib import Path

import pytest
import torch
import yaml

from weightgen.cli import main
from weightgen.config import ExperimentConfig
from weightgen.zoo import load_weightset

FAST_CONFIG = {
    "seed": 5,
    "arch_preset": "cnn_tiny",
    "dataset": {"name": "blobs", "blob_train": 300, "blob_val": 120, "blob_test": 120},
    "zoo": {
        "pool_size": 5,
        "train_count": 3,
        "eval_count": 2,
        "grid": [{"lr": 5e-3, "epochs": 8, "weight_decay": 0.0, "augment": False}],
    },
    "generator": {"d_model": 32, "num_blocks": 1, "num_heads": 4, "ffn_dim": 64,
                  "n_teachers": 2, "max_seq_len": 128, "cutoff_rate": 0.1},
    "train": {"batch_size": 32, "max_steps": 30, "eval_every": 10,
              "reload_interval": 15, "patience": 20, "held_out_tuples": 1,
              "pretrain_tuples": 1, "pretrain_steps": 30, "pretrain_eval_every": 10,
              "kd_steps": 60, "kd_lr": 5e-3},
    "loss": {"alpha": 1.0, "kd_temperature": 2.0},
    "eval": {"n_tuples": 2, "topn": 5},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One shared experiment directory: zoo-build once, reuse everywhere."""
    root = tmp_path_factory.mktemp("exp")
    config = dict(FAST_CONFIG, output_dir=str(root / "out"))
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(config))
    assert main(["zoo-build", "--config", str(cfg_path)]) == 0
    return root, cfg_path


def test_config_yaml_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict(dict(FAST_CONFIG, output_dir="out")).resolve()
    path = cfg.to_yaml(tmp_path / "c.yaml")
    again = ExperimentConfig.from_yaml(path).resolve()
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()


def test_seed_fanout_is_deterministic_and_per_stream():
    a = ExperimentConfig.from_dict(dict(FAST_CONFIG)).resolve()
    b = ExperimentConfig.from_dict(dict(FAST_CONFIG)).resolve()
    assert (a.zoo.seed, a.generator.seed, a.train.seed, a.eval.seed) == \
        (b.zoo.seed, b.generator.seed, b.train.seed, b.eval.seed)
    assert len({a.zoo.seed, a.generator.seed, a.train.seed, a.eval.seed}) == 4


def test_missing_config_is_config_error_exit():
    assert main(["pretrain", "--config", "/nonexistent/config.yaml"]) == 2


def test_malformed_config_exit(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("this: [unclosed")
    assert main(["pretrain", "--config", str(bad)]) == 2


def test_train_before_zoo_build_is_actionable(tmp_path, capsys):
    config = dict(FAST_CONFIG, output_dir=str(tmp_path / "out"))
    cfg_path = tmp_path / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(config))
    code = main(["pretrain", "--config", str(cfg_path)])
    assert code == 2
    assert "zoo-build" in capsys.readouterr().err


def test_zoo_build_artifacts(workspace):
    root, cfg_path = workspace
    out = root / "out"
    pools = list((out / "zoo").rglob("pool.json"))
    assert len(pools) == 1
    run_dirs = list((out / "runs").glob("zoo-build-*"))
    assert run_dirs and (run_dirs[0] / "resolved_config.yaml").exists()
    assert (run_dirs[0] / "fingerprint.txt").exists()


def test_pipeline_pretrain_train_generate_evaluate(workspace):
    root, cfg_path = workspace
    out = root / "out"
    assert main(["pretrain", "--config", str(cfg_path), "--run-id", "pre"]) == 0
    pre_ckpt = out / "runs" / "pre" / "checkpoints" / "pretrained.ckpt"
    assert pre_ckpt.exists()

    assert main(["train", "--config", str(cfg_path), "--run-id", "tr",
                 "--init", str(pre_ckpt)]) == 0
    best = out / "runs" / "tr" / "checkpoints" / "best.ckpt"
    assert best.exists()
    assert (out / "runs" / "tr" / "metrics.csv").exists()

    # generate a student for two eval-split checkpoints
    from weightgen.zoo import load_pool

    pool = load_pool(next((out / "zoo").rglob("pool.json")).parent)
    eval_ids = [m.id for m in pool.eval_manifests[:2]]
    student_path = out / "student.pt"
    assert main(["generate", "--config", str(cfg_path), "--generator", str(best),
                 "--teachers", ",".join(eval_ids), "--out", str(student_path)]) == 0
    student = load_weightset(student_path)
    student.validate()

    assert main(["evaluate", "--config", str(cfg_path), "--run-id", "ev",
                 "--generator", str(best)]) == 0
    report = (out / "runs" / "ev" / "report.csv").read_text()
    for method in ("single", "ensemble", "kd", "wg"):
        assert method in report

    assert main(["finetune", "--config", str(cfg_path), "--run-id", "ft",
                 "--init", str(best), "--teachers", ",".join(eval_ids),
                 "--max-steps", "10"]) == 0
    assert (out / "runs" / "ft" / "checkpoints" / "best.ckpt").exists()

    assert main(["report", "--inputs", str(out / "runs" / "ev" / "report.csv")]) == 0


def test_zoo_build_flag_overrides(tmp_path):
    config = dict(FAST_CONFIG, output_dir=str(tmp_path / "out"))
    cfg_path = tmp_path / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(config))
    grid = '[{"lr": 5e-3, "epochs": 4, "weight_decay": 0.0, "augment": false}]'
    assert main(["zoo-build", "--config", str(cfg_path), "--pool-size", "2",
                 "--split", "1:1", "--grid", grid, "--seed", "3",
                 "--dataset", "blobs", "--arch", "mlp_tiny", "--jobs", "1"]) == 0
    from weightgen.zoo import load_pool

    pool_dir = next((tmp_path / "out" / "zoo").rglob("pool.json")).parent
    pool = load_pool(pool_dir)
    assert len(pool.manifests) == 2
    assert pool.manifests[0].hyperparameters["epochs"] == 4
    assert "mlp" in pool.manifests[0].arch_text


def test_baseline_subcommand(workspace):
    root, cfg_path = workspace
    assert main(["baseline", "--config", str(cfg_path), "--method", "single",
                 "--run-id", "b-single"]) == 0
    report = (root / "out" / "runs" / "b-single" / "report.csv").read_text()
    assert "single" in report
    assert main(["baseline", "--config", str(cfg_path), "--method", "nonsense"]) == 2


def test_generate_unknown_teacher_id(workspace):
    root, cfg_path = workspace
    out = root / "out"
    pre = list((out / "runs").glob("pre/checkpoints/pretrained.ckpt"))
    if not pre:
        pytest.skip("pretrain artifact not present")
    assert main(["generate", "--config", str(cfg_path), "--generator", str(pre[0]),
                 "--teachers", "zzz,yyy", "--out", str(out / "s.pt")]) == 2


def test_report_protocol_error(workspace, tmp_path):
    root, cfg_path = workspace
    src = root / "out" / "runs" / "b-single" / "report.csv"
    if not src.exists():
        pytest.skip("baseline report not present")
    other = tmp_path / "other.csv"
    text = src.read_text().splitlines()
    header = text[0].split(",")
    row = text[1].split(",")
    row[header.index("tuples_hash")] = "feedfacefeedface"
    other.write_text("\n".join([",".join(header), ",".join(row)]) + "\n")
    assert main(["report", "--inputs", str(src), str(other)]) == 5


def test_metrics_log_reproducible_end_to_end(tmp_path):
    # same resolved config + seed -> byte-identical metrics logs
    config = dict(FAST_CONFIG, output_dir=str(tmp_path / "out"))
    config["train"] = dict(config["train"], max_steps=12)
    cfg_path = tmp_path / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(config))
    assert main(["zoo-build", "--config", str(cfg_path)]) == 0
    assert main(["pretrain", "--config", str(cfg_path), "--run-id", "p1"]) == 0
    out = tmp_path / "out"
    ckpt = out / "runs" / "p1" / "checkpoints" / "pretrained.ckpt"
    assert main(["train", "--config", str(cfg_path), "--run-id", "t1",
                 "--init", str(ckpt)]) == 0
    assert main(["train", "--config", str(cfg_path), "--run-id", "t2",
                 "--init", str(ckpt)]) == 0
    m1 = (out / "runs" / "t1" / "metrics.csv").read_bytes()
    m2 = (out / "runs" / "t2" / "metrics.csv").read_bytes()
    assert m1 == m2
    v1 = (out / "runs" / "t1" / "validation.csv").read_bytes()
    v2 = (out / "runs" / "t2" / "validation.csv").read_bytes()
    assert v1 == v2
