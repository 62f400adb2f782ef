"""Metrics (top-n accuracy, calibration error), per-method reports with 2-sigma
spread across teacher tuples, the component ablation runner, and the
teacher-count sweep with CSV + plot emission."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .arch import WeightSet
from .baselines import scale_teachers
from .data import DatasetSplits
from .errors import CapacityError, ConfigurationError, ProtocolError
from .fitting import predict_logits
from .generator import GeneratorConfig, WeightGenerator
from .losses import LossConfig
from .rng import make_stream
from .training import TrainConfig, pretrain, restore_best, train
from .zoo import TeacherPool, sample_manifests

DEFAULT_BINS = 15
ABLATION_VARIANTS = ("full", "-cross_layer", "-shift_consistency", "-weight_cutoff")


def acc_topn(logits: np.ndarray | torch.Tensor, labels: np.ndarray | torch.Tensor,
             n: int) -> float:
    """Percentage of rows whose label is among the n largest logits.

    Ties break toward the lowest class index (stable sort on the negated row).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if n < 1 or n > logits.shape[1]:
        raise ConfigurationError(f"top-n with n={n} outside [1, {logits.shape[1]}]")
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = (order[:, :n] == labels[:, None]).any(axis=1)
    return float(hits.mean() * 100.0)


def ece(confidences: np.ndarray | torch.Tensor, correctness: np.ndarray | torch.Tensor,
        num_bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error over equal-width confidence bins, as a
    percentage; empty bins contribute nothing."""
    conf = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correctness, dtype=np.float64)
    if conf.size == 0:
        raise ConfigurationError("cannot compute calibration error on empty input")
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise ConfigurationError("confidences must lie in [0, 1]")
    bins = np.minimum((conf * num_bins).astype(int), num_bins - 1)
    total = 0.0
    for b in range(num_bins):
        mask = bins == b
        count = int(mask.sum())
        if count == 0:
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        total += (count / conf.size) * gap
    return float(total * 100.0)


def confidence_and_correctness(logits: torch.Tensor,
                               labels: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Max softmax probability and argmax correctness per row."""
    probs = torch.softmax(logits.to(torch.float64), dim=-1)
    conf, pred = probs.max(dim=-1)
    return conf.numpy(), (pred == labels).to(torch.float64).numpy()


@dataclass
class MetricRow:
    acc1: float
    accn: float
    ece: float


def metrics_from_logits(logits: torch.Tensor, labels: torch.Tensor, topn: int = 5,
                        bins: int = DEFAULT_BINS) -> MetricRow:
    conf, correct = confidence_and_correctness(logits, labels)
    return MetricRow(
        acc1=acc_topn(logits, labels, 1),
        accn=acc_topn(logits, labels, topn),
        ece=ece(conf, correct, bins),
    )


@dataclass
class MetricsReport:
    method: str
    dataset: str
    arch: str
    acc1: float
    accn: float
    ece: float
    topn: int
    n_tuples: int
    spread_acc1: float  # 2 sigma across tuples
    spread_accn: float
    spread_ece: float
    tuples_hash: str
    provenance: dict

    def validate(self) -> None:
        for v in (self.acc1, self.accn):
            if not (0.0 <= v <= 100.0):
                raise ProtocolError(f"accuracy {v} outside [0, 100]")
        if self.accn < self.acc1 - 1e-9:
            raise ProtocolError("top-n accuracy below top-1")
        if min(self.spread_acc1, self.spread_accn, self.spread_ece) < 0:
            raise ProtocolError("spread must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def tuples_fingerprint(tuple_ids: Sequence[Sequence[str]], dataset: str) -> str:
    blob = dataset + "|" + ";".join(",".join(sorted(ids)) for ids in tuple_ids)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def fixed_eval_tuples(pool: TeacherPool, n_teachers: int, n_tuples: int,
                      seed: int) -> list[list[str]]:
    """The shared eval-split tuple list every method is scored on."""
    rng = make_stream(seed, "eval-tuples")
    return [
        [m.id for m in sample_manifests(pool, n_teachers, "eval", rng)]
        for _ in range(n_tuples)
    ]


def evaluate_method(
    method: str,
    per_tuple_metrics: Callable[[list[WeightSet], Sequence[str]], MetricRow],
    tuple_ids: Sequence[Sequence[str]],
    pool: TeacherPool,
    data: DatasetSplits,
    topn: int = 5,
    provenance: Mapping | None = None,
) -> MetricsReport:
    """Mean and 2-sigma of the per-tuple metrics on the fixed test split."""
    if not tuple_ids:
        raise ConfigurationError("need at least one evaluation tuple")
    rows = []
    for ids in tuple_ids:
        teachers = [pool.load_weights(i) for i in ids]
        rows.append(per_tuple_metrics(teachers, ids))
    def agg(vals: list[float]) -> tuple[float, float]:
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(2.0 * arr.std())
    acc1, s1 = agg([r.acc1 for r in rows])
    accn, sn = agg([r.accn for r in rows])
    ece_m, se = agg([r.ece for r in rows])
    report = MetricsReport(
        method=method, dataset=data.name, arch=pool.arch().fingerprint()[:12],
        acc1=acc1, accn=accn, ece=ece_m, topn=topn, n_tuples=len(tuple_ids),
        spread_acc1=s1, spread_accn=sn, spread_ece=se,
        tuples_hash=tuples_fingerprint(tuple_ids, data.name),
        provenance=dict(provenance or {}),
    )
    report.validate()
    return report


def check_same_protocol(reports: Sequence[MetricsReport]) -> None:
    hashes = {r.tuples_hash for r in reports}
    if len(hashes) > 1:
        raise ProtocolError(
            f"methods evaluated on different tuples: { {r.method: r.tuples_hash for r in reports} }"
        )


# -- per-tuple metric builders ----------------------------------------------


def single_metrics(data: DatasetSplits, topn: int = 5,
                   bins: int = DEFAULT_BINS) -> Callable:
    """Average of each member's individual metrics."""

    def fn(teachers: list[WeightSet], ids=None) -> MetricRow:
        rows = [
            metrics_from_logits(
                predict_logits(ws.arch, ws, data.x_test), data.y_test, topn, bins)
            for ws in teachers
        ]
        return MetricRow(
            acc1=sum(r.acc1 for r in rows) / len(rows),
            accn=sum(r.accn for r in rows) / len(rows),
            ece=sum(r.ece for r in rows) / len(rows),
        )

    return fn


def ensemble_metrics(data: DatasetSplits, topn: int = 5,
                     bins: int = DEFAULT_BINS) -> Callable:
    def fn(teachers: list[WeightSet], ids=None) -> MetricRow:
        logits = [predict_logits(ws.arch, ws, data.x_test) for ws in teachers]
        # float64 keeps the mean of identical members bit-exact
        mean = torch.stack(logits).to(torch.float64).mean(dim=0)
        return metrics_from_logits(mean, data.y_test, topn, bins)

    return fn


def student_metrics(data: DatasetSplits, make_student: Callable[[list[WeightSet]], WeightSet],
                    topn: int = 5, bins: int = DEFAULT_BINS) -> Callable:
    def fn(teachers: list[WeightSet], ids=None) -> MetricRow:
        student = make_student(teachers)
        return metrics_from_logits(
            predict_logits(student.arch, student, data.x_test), data.y_test, topn, bins)

    return fn


# -- report files -------------------------------------------------------------

REPORT_FIELDS = ("method", "dataset", "arch", "acc1", "spread_acc1", "accn",
                 "spread_accn", "ece", "spread_ece", "topn", "n_tuples", "tuples_hash")


def write_reports_csv(reports: Sequence[MetricsReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for r in reports:
            d = r.to_dict()
            writer.writerow([_fmt_cell(d[k]) for k in REPORT_FIELDS])
    return path


def read_reports_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def _fmt_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def render_report_grid(reports: Sequence[MetricsReport]) -> str:
    """Plain-text comparison grid: one row per metric, one column per method."""
    check_same_protocol(reports)
    methods = [r.method for r in reports]
    lines = ["metric | " + " | ".join(f"{m:>12}" for m in methods)]
    for metric, spread in (("acc1", "spread_acc1"), ("accn", "spread_accn"),
                           ("ece", "spread_ece")):
        cells = [
            f"{getattr(r, metric):5.1f} ±{getattr(r, spread):4.1f}" for r in reports
        ]
        lines.append(f"{metric:>6} | " + " | ".join(f"{c:>12}" for c in cells))
    return "\n".join(lines)


# -- ablation -----------------------------------------------------------------


def variant_configs(gen_cfg: GeneratorConfig, loss_cfg: LossConfig,
                    variant: str) -> tuple[GeneratorConfig, LossConfig]:
    if variant == "full":
        return replace(gen_cfg), replace(loss_cfg)
    if variant == "-cross_layer":
        return replace(gen_cfg, use_cross_layer=False), replace(loss_cfg)
    if variant == "-shift_consistency":
        return replace(gen_cfg), replace(loss_cfg, alpha=0.0)
    if variant == "-weight_cutoff":
        return replace(gen_cfg, cutoff_rate=0.0), replace(loss_cfg)
    raise ConfigurationError(f"unknown ablation variant '{variant}'")


def run_ablation(
    pool: TeacherPool,
    data: DatasetSplits,
    gen_cfg: GeneratorConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    eval_tuples: Sequence[Sequence[str]],
    workdir: str | Path,
    variants: Sequence[str] = ABLATION_VARIANTS,
    topn: int = 5,
    kd_cache: str | Path | None = None,
    pretrained_state: Mapping | None = None,
) -> dict[str, MetricsReport]:
    """Retrain one generator per variant (shared seeds, one flag flipped each)
    and score all of them on identical eval tuples.

    By default every variant is pretrained with its own flags; passing
    `pretrained_state` starts every variant's main stage from one shared
    pretrained checkpoint instead, which keeps variant differences attributable
    to the main-stage flags and fits tight compute budgets.
    """
    from .codec import fit_norm_stats

    workdir = Path(workdir)
    arch = pool.arch()
    norm_stats = fit_norm_stats(pool)
    reports: dict[str, MetricsReport] = {}
    for variant in variants:
        v_gen_cfg, v_loss_cfg = variant_configs(gen_cfg, loss_cfg, variant)
        generator = WeightGenerator(arch, v_gen_cfg, norm_stats)
        vdir = workdir / (variant.replace("-", "no_") if variant != "full" else "full")
        if pretrained_state is not None:
            generator.load_state_dict(dict(pretrained_state))
        else:
            pretrain(generator, pool, data, train_cfg, v_loss_cfg,
                     kd_cache or workdir / "kd_cache", workdir=vdir)
        result = train(generator, pool, data, train_cfg, v_loss_cfg, workdir=vdir)
        restore_best(generator, result)
        reports[variant] = evaluate_method(
            f"wg[{variant}]",
            student_metrics(data, lambda ts: generator.generate_student(ts), topn),
            eval_tuples, pool, data, topn,
            provenance={"variant": variant, "seed": train_cfg.seed},
        )
    check_same_protocol(list(reports.values()))
    write_reports_csv(list(reports.values()), workdir / "ablation.csv")
    return reports


# -- teacher-count sweep ------------------------------------------------------


def teacher_count_sweep(
    generator_by_mode: Mapping[str, WeightGenerator],
    pool: TeacherPool,
    data: DatasetSplits,
    m_values: Sequence[int],
    out_dir: str | Path,
    split: str = "eval",
    seed: int = 0,
    topn: int = 5,
) -> list[dict]:
    """Evaluate scale_teachers per (m, mode) on the fixed test split.

    m=1 rows evaluate the sampled teacher itself (the single-model baseline).
    Capacity failures in concatenate mode are recorded as skipped cells.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for mode, generator in generator_by_mode.items():
        for m in m_values:
            rng = make_stream(seed, f"sweep-{mode}-{m}")
            manifests = sample_manifests(pool, m, split, rng)
            teachers = [pool.load_weights(mf.id) for mf in manifests]
            if m == 1:
                student = teachers[0]
            else:
                try:
                    student, _ = scale_teachers(teachers, mode, generator, m)
                except CapacityError as exc:
                    rows.append({"mode": mode, "m": m, "status": f"skipped: {exc}",
                                 "acc1": "", "accn": "", "ece": ""})
                    continue
            row = metrics_from_logits(
                predict_logits(student.arch, student, data.x_test), data.y_test, topn)
            rows.append({"mode": mode, "m": m, "status": "ok",
                         "acc1": f"{row.acc1:.6f}", "accn": f"{row.accn:.6f}",
                         "ece": f"{row.ece:.6f}"})
    csv_path = out_dir / "sweep.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["mode", "m", "status", "acc1", "accn", "ece"])
        writer.writeheader()
        writer.writerows(rows)
    plot_sweep(csv_path, out_dir / "sweep.png")
    return rows


def plot_sweep(csv_path: str | Path, png_path: str | Path):
    """Line plot built from the parsed CSV (so plot and file cannot diverge)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_sweep_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    modes = sorted({r["mode"] for r in rows})
    for mode in modes:
        pts = [(int(r["m"]), float(r["acc1"])) for r in rows
               if r["mode"] == mode and r["status"] == "ok"]
        pts.sort()
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("teacher count")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return fig


def read_sweep_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
