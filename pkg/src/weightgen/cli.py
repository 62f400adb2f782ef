"""Command-line entry point wiring all pipeline stages.

Subcommands: zoo-build, pretrain, train, finetune, generate, baseline,
evaluate, ablate, sweep, report. Every run writes its resolved config, seed
fan-out and build fingerprint into its run directory, sufficient to reproduce
the metrics logs bit-for-bit.

Exit codes: 0 ok, 2 configuration, 3 structural, 4 capacity, 5 protocol,
1 anything else.
"""
from __future__ import annotations

import argparse
import subprocess
import sys
from pathlib import Path

import torch

from . import __version__
from .arch import ArchSpec, build_arch
from .baselines import MLPPredictorConfig, train_mlp_predictor
from .codec import fit_norm_stats
from .config import ExperimentConfig
from .data import load_dataset
from .errors import (
    CapacityError,
    ConfigurationError,
    ProtocolError,
    StructuralError,
    WeightGenError,
)
from .evaluation import (
    check_same_protocol,
    ensemble_metrics,
    evaluate_method,
    fixed_eval_tuples,
    read_reports_csv,
    render_report_grid,
    run_ablation,
    single_metrics,
    student_metrics,
    teacher_count_sweep,
    write_reports_csv,
    MetricsReport,
)
from .generator import WeightGenerator, load_generator
from .training import finetune_unseen, get_kd_target, pretrain, train
from .zoo import build_pool, load_pool, save_weightset, _pool_dir

EXIT_CODES = (
    (ConfigurationError, 2),
    (StructuralError, 3),
    (CapacityError, 4),
    (ProtocolError, 5),
    (WeightGenError, 1),
)


class _Context:
    """Lazily materialized experiment pieces shared by the handlers."""

    def __init__(self, args):
        self.args = args
        self.config = ExperimentConfig.from_yaml(args.config).resolve()
        self.out = Path(self.config.output_dir)

    @property
    def data(self):
        if not hasattr(self, "_data"):
            self._data = load_dataset(**self.config.dataset.load_kwargs())
        return self._data

    @property
    def arch(self) -> ArchSpec:
        if not hasattr(self, "_arch"):
            self._arch = build_arch(self.config.arch_preset, self.data.num_classes,
                                    self.data.input_shape)
        return self._arch

    @property
    def pool(self):
        if not hasattr(self, "_pool"):
            pool_dir = _pool_dir(self.out / "zoo", self.data.name, self.arch)
            if not (pool_dir / "pool.json").exists():
                raise ConfigurationError(
                    f"no teacher pool at {pool_dir}; run 'weightgen zoo-build' first"
                )
            self._pool = load_pool(pool_dir)
        return self._pool

    @property
    def kd_cache(self) -> Path:
        return self.out / "kd_cache"

    def run_dir(self, command: str) -> Path:
        run_id = self.args.run_id or f"{command}-{self.config.config_hash()}"
        run_dir = self.out / "runs" / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        self.config.to_yaml(run_dir / "resolved_config.yaml")
        (run_dir / "fingerprint.txt").write_text(_build_fingerprint())
        return run_dir

    def eval_tuples(self):
        return fixed_eval_tuples(self.pool, self.config.generator.n_teachers,
                                 self.config.eval.n_tuples, self.config.eval.seed)


def _build_fingerprint() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5).stdout.strip() or "unknown"
    except Exception:
        rev = "unknown"
    return f"weightgen {__version__}\ntorch {torch.__version__}\ngit {rev}\n"


def _parse_ids(raw: str) -> list[str]:
    ids = [s for s in raw.split(",") if s]
    if not ids:
        raise ConfigurationError("expected a comma-separated list of checkpoint ids")
    return ids


# -- handlers -----------------------------------------------------------------


def _cmd_zoo_build(args) -> int:
    ctx = _Context(args)
    cfg = ctx.config
    if args.dataset:
        cfg.dataset.name = args.dataset
    if args.arch:
        cfg.arch_preset = args.arch
    if args.pool_size:
        cfg.zoo.pool_size = args.pool_size
    if args.split:
        train_n, eval_n = (int(x) for x in args.split.split(":"))
        cfg.zoo.train_count, cfg.zoo.eval_count = train_n, eval_n
    if args.grid:
        import json

        cfg.zoo.grid = json.loads(args.grid)
    if args.seed is not None:
        cfg.zoo.seed = args.seed
    if args.jobs:
        cfg.zoo.jobs = args.jobs
    run_dir = ctx.run_dir("zoo-build")
    pool = build_pool(
        ctx.data, ctx.arch, cfg.zoo.pool_size,
        (cfg.zoo.train_count, cfg.zoo.eval_count),
        hparam_grid=cfg.zoo.grid, seed=cfg.zoo.seed, root=ctx.out / "zoo",
        dataset_kwargs=ctx.data.load_spec, jobs=cfg.zoo.jobs,
    )
    accs = [m.val_accuracy for m in pool.manifests]
    print(f"pool at {pool.root}: {len(pool.manifests)} checkpoints "
          f"(val acc {min(accs):.3f}..{max(accs):.3f}), "
          f"{len(pool.train_manifests)} train / {len(pool.eval_manifests)} eval")
    print(f"artifacts: {run_dir}")
    return 0


def _cmd_pretrain(args) -> int:
    ctx = _Context(args)
    run_dir = ctx.run_dir("pretrain")
    generator = WeightGenerator(ctx.arch, ctx.config.generator, fit_norm_stats(ctx.pool))
    result = pretrain(generator, ctx.pool, ctx.data, ctx.config.train, ctx.config.loss,
                      ctx.kd_cache, workdir=run_dir)
    print(f"pretrained {result.state.step} steps, "
          f"eval match loss {result.state.best_eval:.6f}")
    print(f"checkpoint: {run_dir / 'checkpoints' / 'pretrained.ckpt'}")
    return 0


def _cmd_train(args) -> int:
    ctx = _Context(args)
    run_dir = ctx.run_dir("train")
    generator = load_generator(args.init)
    result = train(generator, ctx.pool, ctx.data, ctx.config.train, ctx.config.loss,
                   workdir=run_dir, max_steps=args.max_steps)
    print(f"trained to step {result.state.step}, best held-in val acc "
          f"{result.best_val_acc:.4f}")
    print(f"checkpoints: {result.best_path} / {result.last_path}")
    return 0


def _cmd_finetune(args) -> int:
    ctx = _Context(args)
    run_dir = ctx.run_dir("finetune")
    generator = load_generator(args.init)
    result = finetune_unseen(generator, _parse_ids(args.teachers), ctx.pool, ctx.data,
                             ctx.config.train, ctx.config.loss, workdir=run_dir,
                             max_steps=args.max_steps)
    print(f"fine-tuned on {args.teachers}: best val acc {result.best_val_acc:.4f}")
    print(f"checkpoints: {result.best_path} / {result.last_path}")
    return 0


def _cmd_generate(args) -> int:
    ctx = _Context(args)
    generator = load_generator(args.generator)
    teachers = [ctx.pool.load_weights(i) for i in _parse_ids(args.teachers)]
    student = generator.generate_student(teachers)
    student.validate()
    out = save_weightset(student, args.out)
    print(f"student weights written to {out}")
    return 0


def _cmd_baseline(args) -> int:
    ctx = _Context(args)
    run_dir = ctx.run_dir(f"baseline-{args.method}")
    report = _baseline_report(ctx, args.method)
    write_reports_csv([report], run_dir / "report.csv")
    print(render_report_grid([report]))
    print(f"report: {run_dir / 'report.csv'}")
    return 0


def _baseline_report(ctx: _Context, method: str) -> MetricsReport:
    cfg = ctx.config
    tuples = ctx.eval_tuples()
    topn = cfg.eval.topn
    provenance = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    if method == "single":
        fn = single_metrics(ctx.data, topn, cfg.eval.ece_bins)
    elif method == "ensemble":
        fn = ensemble_metrics(ctx.data, topn, cfg.eval.ece_bins)
    elif method == "kd":
        from .evaluation import metrics_from_logits
        from .fitting import predict_logits

        def fn(teachers, ids):
            student = get_kd_target(ctx.kd_cache, ids, ctx.pool, ctx.data, cfg.train,
                                    cfg.loss)
            logits = predict_logits(student.arch, student, ctx.data.x_test)
            return metrics_from_logits(logits, ctx.data.y_test, topn, cfg.eval.ece_bins)
    elif method == "mlp":
        predictor = train_mlp_predictor(
            ctx.pool, ctx.data,
            MLPPredictorConfig(n_teachers=cfg.generator.n_teachers,
                               seed=cfg.train.seed),
            fit_norm_stats(ctx.pool),
        )
        fn = student_metrics(ctx.data, predictor.generate, topn, cfg.eval.ece_bins)
    else:
        raise ConfigurationError(f"unknown baseline '{method}'")
    return evaluate_method(method, fn, tuples, ctx.pool, ctx.data, topn, provenance)


def _cmd_evaluate(args) -> int:
    ctx = _Context(args)
    cfg = ctx.config
    run_dir = ctx.run_dir("evaluate")
    tuples = ctx.eval_tuples()
    reports = [_baseline_report(ctx, m) for m in ("single", "ensemble", "kd")]
    if args.generator:
        generator = load_generator(args.generator)
        reports.append(evaluate_method(
            "wg", student_metrics(ctx.data, lambda ts: generator.generate_student(ts),
                                  cfg.eval.topn, cfg.eval.ece_bins),
            tuples, ctx.pool, ctx.data, cfg.eval.topn,
            {"config_hash": cfg.config_hash(), "generator": str(args.generator)},
        ))
    check_same_protocol(reports)
    write_reports_csv(reports, run_dir / "report.csv")
    grid = render_report_grid(reports)
    (run_dir / "report.txt").write_text(grid + "\n")
    print(grid)
    print(f"report: {run_dir / 'report.csv'}")
    return 0


def _cmd_ablate(args) -> int:
    ctx = _Context(args)
    cfg = ctx.config
    run_dir = ctx.run_dir("ablate")
    reports = run_ablation(ctx.pool, ctx.data, cfg.generator, cfg.train, cfg.loss,
                           ctx.eval_tuples(), run_dir, topn=cfg.eval.topn)
    print(render_report_grid(list(reports.values())))
    print(f"table: {run_dir / 'ablation.csv'}")
    return 0


def _cmd_sweep(args) -> int:
    ctx = _Context(args)
    run_dir = ctx.run_dir("sweep")
    m_values = [int(x) for x in args.m.split(",")]
    generators = {mode: load_generator(path) for mode, path in
                  (pair.split("=") for pair in args.generators.split(","))}
    rows = teacher_count_sweep(generators, ctx.pool, ctx.data, m_values, run_dir,
                               seed=ctx.config.eval.seed, topn=ctx.config.eval.topn)
    done = sum(1 for r in rows if r["status"] == "ok")
    print(f"sweep wrote {len(rows)} rows ({done} evaluated) to {run_dir / 'sweep.csv'}")
    return 0


def _cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(read_reports_csv(path))
    hashes = {r["tuples_hash"] for r in rows}
    if len(hashes) > 1:
        raise ProtocolError(f"reports cover different evaluation tuples: {sorted(hashes)}")
    header = ["method", "acc1", "spread_acc1", "accn", "spread_accn", "ece", "spread_ece"]
    lines = ["  ".join(f"{h:>12}" for h in header)]
    for r in rows:
        lines.append("  ".join(f"{r[h]:>12}" for h in header))
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weightgen",
        description="Teacher-ensemble weight generation laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--run-id", default=None)
        p.set_defaults(handler=handler)
        return p

    p = add("zoo-build", _cmd_zoo_build, help="train the teacher checkpoint pool")
    p.add_argument("--dataset", default=None, help="override dataset name")
    p.add_argument("--arch", default=None, help="override architecture preset")
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--split", default=None, help="train:eval counts, e.g. 10:2")
    p.add_argument("--grid", default=None, help="hyperparameter grid as a JSON list")
    p.add_argument("--seed", type=int, default=None, help="override the zoo seed")
    p.add_argument("--jobs", type=int, default=None)

    add("pretrain", _cmd_pretrain, help="match distilled weight targets")

    p = add("train", _cmd_train, help="bilevel training of the generator")
    p.add_argument("--init", required=True, help="pretrained generator checkpoint")
    p.add_argument("--max-steps", type=int, default=None)

    p = add("finetune", _cmd_finetune, help="fine-tune on a pinned unseen tuple")
    p.add_argument("--init", required=True)
    p.add_argument("--teachers", required=True, help="comma-separated eval-split ids")
    p.add_argument("--max-steps", type=int, default=None)

    p = add("generate", _cmd_generate, help="emit student weights for a teacher tuple")
    p.add_argument("--generator", required=True)
    p.add_argument("--teachers", required=True)
    p.add_argument("--out", required=True)

    p = add("baseline", _cmd_baseline, help="evaluate one reference method")
    p.add_argument("--method", required=True,
                   choices=["single", "ensemble", "kd", "mlp"])

    p = add("evaluate", _cmd_evaluate, help="comparison table on shared eval tuples")
    p.add_argument("--generator", default=None)

    add("ablate", _cmd_ablate, help="retrain with each component removed")

    p = add("sweep", _cmd_sweep, help="teacher-count scaling sweep")
    p.add_argument("--generators", required=True,
                   help="mode=ckpt pairs, e.g. concatenate=g.ckpt,heuristic=g2.ckpt")
    p.add_argument("--m", required=True, help="comma-separated teacher counts")

    p = sub.add_parser("report", help="render report CSVs as a comparison grid")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except tuple(exc for exc, _ in EXIT_CODES) as exc:
        for klass, code in EXIT_CODES:
            if isinstance(exc, klass):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise AssertionError  # unreachable
    except SystemExit as exc:  # argparse errors
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
