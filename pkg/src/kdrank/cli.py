"""Command-line entry point: ``kdrank <command> ...``.

Exit codes: 0 success, 2 input/parse error, 3 training divergence,
4 checkpoint mismatch, 5 sweep sub-run failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import generate_dataset, write_split
from .distill import SWEEP_AXES, RunConfig, apply_axis, distill_student, sweep, train_teacher, write_metrics
from .errors import CheckpointError, ConfigError, ShapeError, SweepError, TrainingError
from .losses import LossWeights, RankingConfig, RankingForm, diff_kendall_tau, gradient_profile, kendall_tau_exact
from .nn import load_checkpoint, save_checkpoint

EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4
EXIT_SWEEP = 5

log = logging.getLogger("kdrank")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _num(x: float) -> str:
    return f"{x:.9g}"


def _load_run_config(path, seed_role: str | None = None, seed: int | None = None) -> RunConfig:
    cfg = cfgmod.load_config(path) if path else RunConfig()
    if seed is not None and seed_role:
        cfg = cfgmod.with_seed(cfg, seed_role, seed)
    return cfg


def _read_vector(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    fields = [f for f in text.replace("\n", ",").split(",") if f.strip()]
    try:
        vec = np.array([float(f) for f in fields])
    except ValueError:
        raise CliError(f"{path}: expected comma-separated numbers") from None
    if vec.size < 2 or not np.all(np.isfinite(vec)):
        raise CliError(f"{path}: need at least 2 finite values")
    return vec


def _read_pair(a, b):
    za, zb = _read_vector(a), _read_vector(b)
    if za.shape != zb.shape:
        raise CliError(f"length mismatch: {za.size} vs {zb.size}")
    return za, zb


def _load_teacher(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_CHECKPOINT) from None
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from None


def _metrics_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".metrics.csv")


def _final_test(rows):
    return [r for r in rows if r.split == "test"][-1]


# --- commands -------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = _load_run_config(args.spec, "dataset", args.seed)
    train, test = generate_dataset(cfg.dataset)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_split(train, out / "train.csv")
        write_split(test, out / "test.csv")
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}") from None
    print(f"train,{len(train)}\ntest,{len(test)}")


def cmd_train_teacher(args) -> None:
    cfg = _load_run_config(args.config, "teacher", args.seed)
    try:
        model, rows = train_teacher(cfg)
    except TrainingError as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from None
    out = Path(args.out)
    save_checkpoint(model, out)
    write_metrics(rows, _metrics_path(out))
    print(f"final_test_accuracy,{_num(_final_test(rows).accuracy)}")


def cmd_distill(args) -> None:
    cfg = _load_run_config(args.config, "student", args.seed)
    if args.no_rank:
        cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, gamma=0.0))
    if args.no_norm:
        cfg = dataclasses.replace(cfg, ranking=dataclasses.replace(cfg.ranking, normalize_inputs=False))
    teacher = _load_teacher(args.teacher)
    if teacher.input_dim != cfg.dataset.input_dim or teacher.output_dim != cfg.dataset.num_classes:
        raise CliError(
            f"teacher maps {teacher.input_dim}->{teacher.output_dim}, dataset is "
            f"{cfg.dataset.input_dim}->{cfg.dataset.num_classes}",
            EXIT_CHECKPOINT,
        )
    try:
        student, rows = distill_student(cfg, teacher)
    except TrainingError as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from None
    out = Path(args.out)
    save_checkpoint(student, out)
    write_metrics(rows, _metrics_path(out))
    final = _final_test(rows)
    print(f"final_test_accuracy,{_num(final.accuracy)}\nfinal_mean_tau,{_num(final.mean_exact_tau)}")


def cmd_grad_profile(args) -> None:
    z_t, z_s = _read_pair(args.teacher_logits, args.student_logits)
    w = LossWeights(temperature=args.T)
    rk = RankingConfig(steepness=args.k, form=args.form, normalize_inputs=not args.no_norm)
    print("channel,q_t,abs_kl_grad,abs_rk_grad")
    for row in gradient_profile(z_t, z_s, w, rk):
        print(f"{row.channel},{_num(row.q_t)},{_num(row.abs_kl_grad)},{_num(row.abs_rk_grad)}")


def cmd_tau(args) -> None:
    a, b = _read_pair(args.a, args.b)
    kb = kendall_tau_exact(a, b)
    header, values = "tau,concordant,discordant,ties", [_num(kb.tau), str(kb.concordant), str(kb.discordant), str(kb.ties)]
    if args.k is not None:
        header += ",tau_d"
        values.append(_num(diff_kendall_tau(a, b, args.k)))
    print(header)
    print(",".join(values))


def _parse_values(axis: str, text: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise CliError("--values is empty")
    if axis == "subset":
        return items
    try:
        return [float(v) for v in items]
    except ValueError:
        raise CliError(f"--values for axis {axis} must be numbers") from None


def _value_slug(value) -> str:
    return str(value).replace(":", "").replace("/", "_")


def cmd_sweep(args) -> None:
    cfg = _load_run_config(args.config, "student", args.seed)
    values = _parse_values(args.axis, args.values)
    for v in values:
        # validate every point before spending time on training
        apply_axis(cfg, args.axis, v)
    teacher = _load_teacher(args.teacher) if args.teacher else None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}") from None
    try:
        points = sweep(cfg, args.axis, values, teacher=teacher)
    except SweepError as exc:
        raise CliError(str(exc), EXIT_SWEEP) from None
    lines = ["value,final_accuracy,final_mean_tau"]
    for p in points:
        write_metrics(p.rows, out / f"metrics_{args.axis}_{_value_slug(p.value)}.csv")
        lines.append(f"{p.value},{_num(p.final.accuracy)},{_num(p.final.mean_exact_tau)}")
    summary = "\n".join(lines) + "\n"
    (out / "summary.csv").write_text(summary)
    sys.stdout.write(summary)


def cmd_print_config(args) -> None:
    sys.stdout.write(cfgmod.format_config(_load_run_config(args.config)))


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdrank", description="Kendall-tau ranking loss for logit distillation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/test dataset CSVs")
    p.add_argument("--spec", help="config file (only [dataset] is used)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override dataset seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the teacher with cross-entropy")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path; metrics go to <out>.metrics.csv")
    p.add_argument("--seed", type=int, help="override teacher seed")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override student seed")
    p.add_argument("--no-rank", action="store_true", help="force gamma=0 (plain KD)")
    p.add_argument("--no-norm", action="store_true", help="disable z-score before the ranking loss")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("grad-profile", help="per-channel KL vs ranking gradient magnitudes")
    p.add_argument("--teacher-logits", required=True)
    p.add_argument("--student-logits", required=True)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--T", type=float, default=4.0)
    p.add_argument("--form", choices=[f.value for f in RankingForm], default="symmetric")
    p.add_argument("--no-norm", action="store_true")
    p.set_defaults(func=cmd_grad_profile)

    p = sub.add_parser("tau", help="exact (and differentiable) Kendall tau of two vectors")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--k", type=float)
    p.set_defaults(func=cmd_tau)

    p = sub.add_parser("sweep", help="ablation over one axis")
    p.add_argument("--config")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated; subset values look like top:10 or min:30")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--teacher", help="reuse a teacher checkpoint instead of training one")
    p.add_argument("--seed", type=int, help="override student seed")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("print-config", help="print the fully-resolved config")
    p.add_argument("--config")
    p.set_defaults(func=cmd_print_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
