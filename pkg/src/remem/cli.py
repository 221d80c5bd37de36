"""Command line entry point: ``remem <subcommand> --config cfg.json [--set k=v ...]``.

Every subcommand writes its tables into ``output_dir`` together with
``config.json`` (the resolved config, loadable again with ``--config``) and
``run.json`` (config, seed, wall time and content hashes of the inputs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as X
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .distill import GRID_HEADER, StudentModel, train_student
from .errors import ConfigError, FormatError, RememError
from .expertness import EXPERTNESS_HEADER, criticality, expertness_profile, write_rows
from .finetune import VitTeacher, evaluate
from .infometer import write_info_plane
from .seeding import derive_seed


def blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class Run:
    """Output directory plus the bookkeeping that ends up in run.json."""

    def __init__(self, cfg: RunConfig, subcommand: str, threads: int):
        self.cfg = cfg
        self.subcommand = subcommand
        self.threads = threads
        self.out = Path(cfg.output_dir)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def note_input(self, path) -> None:
        self.inputs[str(path)] = blob_hash(Path(path).read_bytes())

    def rows(self, name: str, rows: list[dict], header) -> None:
        write_rows(rows, header, self.path(name))

    def json(self, name: str, doc) -> None:
        self.path(name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def finish(self, started: float) -> None:
        cfg_json = self.cfg.to_json()
        (self.out / "config.json").write_text(cfg_json + "\n")
        parts = [self.cfg.content_hash()] + [self.inputs[k] for k in sorted(self.inputs)]
        doc = {
            "subcommand": self.subcommand,
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "threads": self.threads,
            "wall_time_s": round(time.time() - started, 3),
            "config_hash": self.cfg.content_hash(),
            "input_hashes": self.inputs,
            "content_hash": blob_hash("\n".join(parts).encode()),
            "outputs": self.outputs + ["config.json"],
            **self.extra,
        }
        (self.out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- model resolution --------------------------------------------------------

def _context(run: Run) -> X.Context:
    cfg = run.cfg
    if cfg.vit.init_checkpoint:
        run.note_input(cfg.vit.init_checkpoint)
    return X.prepare(cfg)


def _teacher(run: Run, ctx: X.Context):
    """The analysed teacher: ``distill.teacher_checkpoint`` if set, else a fresh fine-tune."""
    cfg = run.cfg
    path = cfg.distill.teacher_checkpoint
    if path:
        model = load_checkpoint(path, X.vit_config(cfg))
        run.note_input(path)
        return model
    return X.finetune_teacher(ctx, ckpt_steps=()).model


def _analysis_images(ctx: X.Context) -> np.ndarray:
    n = ctx.cfg.expertness.n_images
    return ctx.test.images[:n] if n and n < len(ctx.test) else ctx.test.images


# -- subcommands -------------------------------------------------------------

def cmd_finetune(run: Run) -> None:
    cfg = run.cfg
    ctx = _context(run)
    remem = X.remem_config(cfg)
    res = X.finetune_teacher(ctx, remem, ckpt_steps=())
    save_checkpoint(res.model, run.path("teacher.rmem"))
    run.rows("trace.csv", [{"step": s, "loss": loss} for s, loss in res.trace], ("step", "loss"))
    run.rows("metrics.csv", [
        {"split": "train", "accuracy": evaluate(res.model, remem, ctx.train)},
        {"split": "test", "accuracy": evaluate(res.model, remem, ctx.test)},
    ], ("split", "accuracy"))


def cmd_distill(run: Run) -> None:
    cfg = run.cfg
    ctx = _context(run)
    remem = X.remem_config(cfg)
    teacher = _teacher(run, ctx)
    seed = derive_seed(cfg.seed, "student")
    student = StudentModel(int(np.prod(ctx.train.image_shape)), cfg.dataset.n_classes, cfg.distill.d_hidden,
                           seed=derive_seed(seed, "student-init"))
    res = train_student(student, VitTeacher(teacher, X.distill_remem(cfg, remem)), ctx.train, ctx.test, X.kd_config(cfg), seed)
    run.rows("student_trace.csv",
             [{"step": s, "train_loss": loss, "test_acc": "" if acc is None else acc} for s, loss, acc in res.trace],
             ("step", "train_loss", "test_acc"))
    run.rows("metrics.csv", [{
        "teacher_acc": evaluate(teacher, remem, ctx.test), "student_best_acc": res.best_acc,
        "student_best_step": res.best_step, "student_final_acc": res.final_acc,
    }], ("teacher_acc", "student_best_acc", "student_best_step", "student_final_acc"))


def cmd_sweep(run: Run) -> None:
    ctx = _context(run)
    out, _ = X.distill_variant(ctx, workers=run.threads)
    run.rows("grid.csv", out.rows, GRID_HEADER)
    run.json("best.json", out.best)
    if out.failures:
        run.extra["failed_cells"] = len(out.failures)


def cmd_prune_sweep(run: Run) -> None:
    ctx = _context(run)
    run.rows("prune.csv", X.prune_sweep(ctx), X.PRUNE_HEADER)


def cmd_expertness(run: Run) -> None:
    cfg = run.cfg
    ctx = _context(run)
    remem = X.remem_config(cfg)
    model = _teacher(run, ctx)
    n = len(_analysis_images(ctx))
    rows = expertness_profile(model, remem, ctx.test.subset(np.arange(n)), cfg.expertness.k,
                              derive_seed(cfg.seed, "expertness"), cfg.expertness.aggregate)
    run.rows("expertness.csv", rows, EXPERTNESS_HEADER)


def cmd_mi(run: Run) -> None:
    ctx = _context(run)
    remem = X.remem_config(run.cfg)
    model = _teacher(run, ctx)
    write_info_plane([X.teacher_point(ctx, model, remem, "teacher")], run.path("info_plane.csv"))


def cmd_criticality(run: Run) -> None:
    cfg = run.cfg
    ctx = _context(run)
    remem = X.remem_config(cfg)
    model = _teacher(run, ctx)
    crit = criticality(model, remem, _analysis_images(ctx), cfg.expertness.layer)
    rows = [{"rank": i, "neuron": int(n), "sigma": float(s)} for i, (n, s) in enumerate(zip(crit.neurons, crit.sigma))]
    run.rows("criticality.csv", rows, ("rank", "neuron", "sigma"))


def cmd_ablate(run: Run) -> None:
    ctx = _context(run)
    run.rows("ablate.csv", X.ablate(ctx, workers=run.threads), X.ABLATE_HEADER)


COMMANDS = {
    "finetune": cmd_finetune,
    "distill": cmd_distill,
    "sweep": cmd_sweep,
    "prune-sweep": cmd_prune_sweep,
    "expertness": cmd_expertness,
    "mi": cmd_mi,
    "criticality": cmd_criticality,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="remem", description="Teacher reweighting and distillation experiments.")
    p.add_argument("subcommand", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config; defaults apply to every key it leaves out")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one key, e.g. --set optimizer.sam_rho=0.05 (repeatable)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for sweep cells")
    p.add_argument("--seed", type=int, help="root seed; overrides the config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run_command(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config, args.overrides, args.seed)
        try:
            run = Run(cfg, args.subcommand, args.threads)
        except OSError as exc:
            raise FormatError(f"cannot create output_dir {cfg.output_dir}: {exc}") from exc
        if args.config:
            run.note_input(args.config)
        COMMANDS[args.subcommand](run)
        run.finish(started)
    except RememError as exc:
        print(f"remem: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"remem: numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"remem: io error: {exc}", file=sys.stderr)
        return 4
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
