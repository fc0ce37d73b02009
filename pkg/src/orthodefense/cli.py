"""Command-line driver.

    python -m orthodefense train --config c.cfg --out run1
    python -m orthodefense train-ortho --config c.cfg --reference run1/model.orth --lambda 30 --out run2
    python -m orthodefense evaluate --config c.cfg --out eval run1/model.orth retrained.orth run2/model.orth

Every command writes ``resolved.cfg`` (the merged configuration, preceded by
the command line as a comment) into ``--out`` before doing any work.  Exit
status is 0 on success, 1 on a domain error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import shlex
import sys
from pathlib import Path


from .attacks import ATTACKS, AttackSpec, run_attack
from .data import (
    ConfigError,
    DataFormatError,
    Dataset,
    file_hash,
    gen_synthetic,
    load_checkpoint,
    load_csv,
    load_idx,
    parse_config,
    save_checkpoint,
    write_csv,
)
from .defenses import DefenseSpec, apply_defense
from .harness import EvalProtocol, FoolingReport, compare_defenses, emit_report, read_report, run_transfer, sweep_lambda
from .nn import ArchitectureError, OptimizerSpec, cnn_arch, mlp_arch
from .ortho import OrthoConfig, TrainingDiverged, measure_pair_similarity, train_orthogonal

COMMANDS = ("train", "train-ortho", "attack", "defend", "evaluate", "sweep-lambda", "compare-defenses", "report")


# ---------------------------------------------------------------------------
# argument parsing


def _eps_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orthodefense", description="Orthogonal-gradient training and transfer-attack evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_, *, seed=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int)
        return p

    add("train", "train an ordinary model")

    p = add("train-ortho", "train a model with gradients orthogonal to a reference")
    p.add_argument("--reference", help="reference checkpoint (overrides reference.checkpoint)")
    p.add_argument("--lambda", dest="lam", type=float)

    p = add("attack", "craft adversarial examples on a model")
    p.add_argument("model", help="checkpoint to attack")
    p.add_argument("--attack", choices=ATTACKS, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n-samples", type=int)

    p = add("defend", "apply an input transformation to a stored batch", seed=False)
    p.add_argument("batch", help="batch in the CSV dataset format (label,p0,p1,...)")
    p.add_argument("--defense", required=True)

    p = add("evaluate", "fooling ratios of attacks crafted on a source model")
    p.add_argument("source", help="source checkpoint (attacks are crafted here)")
    p.add_argument("targets", nargs="+", help="target checkpoints")
    p.add_argument("--attack", action="append", choices=ATTACKS)
    p.add_argument("--eps", type=_eps_list)
    p.add_argument("--defense")
    p.add_argument("--workers", type=int)
    p.add_argument("--n-samples", type=int)

    p = add("sweep-lambda", "train and evaluate one orthogonal model per lambda")
    p.add_argument("--reference")
    p.add_argument("--lambda", dest="lam", type=float, action="append")
    p.add_argument("--attack", action="append", choices=ATTACKS)
    p.add_argument("--eps", type=_eps_list)
    p.add_argument("--workers", type=int)
    p.add_argument("--n-samples", type=int)

    p = add("compare-defenses", "defended ordinary target against the orthogonal target")
    p.add_argument("source")
    p.add_argument("ordinary")
    p.add_argument("orthogonal")
    p.add_argument("--defense", action="append")
    p.add_argument("--attack", action="append", choices=ATTACKS)
    p.add_argument("--eps", type=_eps_list)
    p.add_argument("--workers", type=int)
    p.add_argument("--n-samples", type=int)

    p = add("report", "merge report CSVs and regenerate the plotting script", seed=False)
    p.add_argument("reports", nargs="+")
    return parser


def _overrides(args) -> dict[str, str]:
    training = args.command in ("train", "train-ortho", "sweep-lambda")
    o = {}
    if getattr(args, "seed", None) is not None:
        o["train.seed" if training else "eval.seed"] = str(args.seed)
    if getattr(args, "reference", None) is not None:
        o["reference.checkpoint"] = args.reference
    lam = getattr(args, "lam", None)
    if lam is not None:
        if isinstance(lam, list):
            o["eval.lambdas"] = ",".join(map(repr, lam))
        else:
            o["train.lambda"] = repr(lam)
    if getattr(args, "n_samples", None) is not None:
        o["eval.n_samples"] = str(args.n_samples)
    if getattr(args, "workers", None) is not None:
        o["eval.workers"] = str(args.workers)
    eps = getattr(args, "eps", None)
    if isinstance(eps, list):
        o["eval.eps_grid"] = ",".join(map(repr, eps))
    attack = getattr(args, "attack", None)
    if isinstance(attack, list):
        o["eval.attacks"] = ",".join(attack)
    defense = getattr(args, "defense", None)
    if isinstance(defense, list):
        o["eval.defenses"] = " ".join(defense)
    return o


# ---------------------------------------------------------------------------
# helpers shared by the commands


def load_data(cfg) -> tuple[Dataset, Dataset]:
    """The configured dataset, split into (train, val)."""
    kind = cfg["dataset.kind"]
    if kind == "synthetic":
        ds = gen_synthetic(cfg["dataset.synth.classes"], cfg["dataset.synth.n"], cfg["dataset.synth.hw"],
                           cfg["dataset.synth.seed"], contrast=cfg["dataset.synth.contrast"])
    elif kind == "idx":
        if not cfg.get("dataset.path") or not cfg.get("dataset.labels_path"):
            raise ConfigError("dataset.kind = idx needs dataset.path and dataset.labels_path")
        ds = load_idx(cfg["dataset.path"], cfg["dataset.labels_path"])
    elif kind == "csv":
        if not cfg.get("dataset.path"):
            raise ConfigError("dataset.kind = csv needs dataset.path")
        ds = load_csv(cfg["dataset.path"])
    else:
        raise ConfigError(f"unknown dataset.kind {kind!r}")
    return ds.split(cfg["dataset.val_fraction"], cfg["dataset.split_seed"])


def architecture(cfg, input_shape, classes):
    arch = cfg["model.arch"]
    if arch == "mlp":
        return mlp_arch(input_shape, classes, cfg["model.hidden"])
    if arch == "cnn":
        return cnn_arch(input_shape, classes)
    raise ConfigError(f"unknown model.arch {arch!r}")


def ortho_config(cfg, lam=None) -> OrthoConfig:
    opt = OptimizerSpec(lr=cfg["train.lr"], momentum=cfg["train.momentum"], batch_size=cfg["train.batch"])
    return OrthoConfig(cfg["train.lambda"] if lam is None else lam, cfg["train.epochs_check"],
                       cfg["train.max_epochs"], opt, cfg["train.seed"], cfg["train.penalty"])


def protocol(cfg) -> EvalProtocol:
    return EvalProtocol(cfg["eval.n_samples"], cfg["eval.eps_grid"], cfg["eval.attacks"], cfg["eval.iters"],
                        cfg["eval.mu"], cfg["eval.random_start"], cfg["eval.seed"], cfg["eval.workers"])


def _meta(cfg, record, lam, reference=""):
    return {
        "seed": cfg["train.seed"],
        "lambda": repr(float(lam)),
        "penalty": cfg["train.penalty"],
        "reference": reference,
        "val_acc": repr(record.best_val_acc),
        "best_epoch": record.best_epoch,
    }


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="")


def _checkpoint(path):
    model, _ = load_checkpoint(path)
    return model


def _reference(cfg):
    ref_path = cfg.get("reference.checkpoint")
    if not ref_path:
        raise ConfigError("no reference model (use --reference or reference.checkpoint)")
    ref, meta = load_checkpoint(ref_path)
    if cfg["train.lambda"] == 0 and meta.get("seed") == str(cfg["train.seed"]):
        _say(f"warning: lambda = 0 with the reference's seed {cfg['train.seed']} reproduces the reference exactly")
    return ref, ref_path


def _say(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, args, out: Path):
    train, val = load_data(cfg)
    arch = architecture(cfg, train.image_shape, train.num_classes)
    model, record = train_orthogonal(arch, None, train, val, ortho_config(cfg, lam=0.0))
    save_checkpoint(model, _meta(cfg, record, 0.0), out / "model.orth")
    _write(out / "train.csv", record.to_csv())
    _say(f"val accuracy {record.best_val_acc:.4f} at epoch {record.best_epoch}")


def cmd_train_ortho(cfg, args, out: Path):
    ref, ref_path = _reference(cfg)
    train, val = load_data(cfg)
    arch = architecture(cfg, train.image_shape, train.num_classes)
    model, record = train_orthogonal(arch, ref, train, val, ortho_config(cfg), input_shape=ref.input_shape)
    save_checkpoint(model, _meta(cfg, record, cfg["train.lambda"], file_hash(ref_path)), out / "model.orth")
    _write(out / "train.csv", record.to_csv())
    sim = measure_pair_similarity(ref, model, val, min(10, len(val)))
    _say(f"val accuracy {record.best_val_acc:.4f}, delta vs reference {sim.mean:+.4f} (|delta| {sim.mean_abs:.4f})")


def cmd_attack(cfg, args, out: Path):
    from .harness import select_correct

    model = _checkpoint(args.model)
    _, val = load_data(cfg)
    idx = select_correct([model], val, cfg["eval.n_samples"], cfg["eval.seed"])
    spec = AttackSpec(args.attack, args.eps, iters=cfg["eval.iters"], mu=cfg["eval.mu"],
                      random_start=cfg["eval.random_start"], seed=cfg["eval.seed"])
    adv = run_attack(model, val.images[idx], val.labels[idx], spec)
    write_csv(Dataset(adv.perturbed, val.labels[idx], val.num_classes, "adversarial"), out / "adversarial.csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "true_label", "linf"])
    for i, label, linf in zip(idx, val.labels[idx], adv.linf):
        w.writerow([int(i), int(label), repr(float(linf))])
    _write(out / "adversarial_meta.csv", buf.getvalue())


def cmd_defend(cfg, args, out: Path):
    spec = DefenseSpec.parse(args.defense)
    batch = load_csv(args.batch)
    defended = apply_defense(batch.images, spec)
    write_csv(Dataset(defended, batch.labels, batch.num_classes, spec.name), out / "defended.csv")


def short_names(paths) -> list[str]:
    """The shortest trailing path suffixes that tell ``paths`` apart.

    Reports then name models independently of where the run directory lives.
    """
    parts = [Path(p).resolve().parts for p in paths]
    if len(set(parts)) != len(parts):
        raise ValueError("the same checkpoint is given twice")
    for k in range(1, max(map(len, parts)) + 1):
        names = ["/".join(p[-k:]) for p in parts]
        if len(set(names)) == len(names):
            return names
    return ["/".join(p) for p in parts]


def cmd_evaluate(cfg, args, out: Path):
    source_name, *names = short_names([args.source, *args.targets])
    source = _checkpoint(args.source)
    targets = {name: _checkpoint(t) for name, t in zip(names, args.targets)}
    _, val = load_data(cfg)
    defense = DefenseSpec.parse(args.defense) if args.defense else None
    report = run_transfer(source, targets, val, protocol(cfg), defense, source_name=source_name)
    emit_report(report, out / "report.csv")


def cmd_sweep_lambda(cfg, args, out: Path):
    ref, ref_path = _reference(cfg)
    train, val = load_data(cfg)
    arch = architecture(cfg, train.image_shape, train.num_classes)
    results = sweep_lambda(arch, ref, cfg["eval.lambdas"], train, val, protocol(cfg), ortho_config(cfg),
                           log=lambda r: _say(f"lambda {r.lam:g}: |delta| {r.similarity.mean_abs:.4f}, "
                                              f"val accuracy {r.record.best_val_acc:.4f}"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "delta_mean", "delta_std", "delta_abs", "val_acc", "best_epoch"])
    report = FoolingReport()
    for r in results:
        w.writerow([repr(r.lam), repr(r.similarity.mean), repr(r.similarity.std), repr(r.similarity.mean_abs),
                    repr(r.record.best_val_acc), r.record.best_epoch])
        lam_txt = f"{r.lam:g}"
        save_checkpoint(r.model, _meta(cfg, r.record, r.lam, file_hash(ref_path)), out / f"lambda_{lam_txt}.orth")
        report = FoolingReport(report.rows + r.report.rows)
    _write(out / "similarity.csv", buf.getvalue())
    emit_report(report.sorted(), out / "report.csv")


def cmd_compare_defenses(cfg, args, out: Path):
    source, ordinary, orthogonal = (_checkpoint(p) for p in (args.source, args.ordinary, args.orthogonal))
    specs = [DefenseSpec.parse(s) for s in cfg["eval.defenses"]]
    if not specs:
        raise ConfigError("no defenses given (use --defense or eval.defenses)")
    _, val = load_data(cfg)
    report = compare_defenses(source, ordinary, orthogonal, specs, val, protocol(cfg))
    emit_report(report, out / "defenses.csv")


def cmd_report(cfg, args, out: Path):
    rows = []
    for path in args.reports:
        try:
            rows += read_report(path).rows
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}") from None
    keys = [r.key() for r in rows]
    if len(set(keys)) != len(keys):
        raise DataFormatError("the reports contain duplicate rows")
    report = FoolingReport(rows).sorted()
    emit_report(report, out / "report.csv")
    _write(out / "summary.txt", summary_table(report))


def summary_table(report: FoolingReport) -> str:
    """Fooling ratio (%) per (target, defense, attack) against epsilon, as fixed-width text."""
    eps = sorted({r.epsilon for r in report.rows})
    lines = ["target | defense | attack | " + " | ".join(f"{100 * e:g}%" for e in eps)]
    groups = {}
    for r in report.rows:
        groups.setdefault((r.source, r.target, r.defense, r.attack), {})[r.epsilon] = r.fooling_ratio
    for (_, target, defense, attack), vals in sorted(groups.items()):
        cells = [f"{100 * vals[e]:.1f}" if e in vals else "-" for e in eps]
        lines.append(" | ".join([target, defense, attack, *cells]))
    return "\n".join(lines) + "\n"


HANDLERS = {
    "train": cmd_train,
    "train-ortho": cmd_train_ortho,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "evaluate": cmd_evaluate,
    "sweep-lambda": cmd_sweep_lambda,
    "compare-defenses": cmd_compare_defenses,
    "report": cmd_report,
}

DOMAIN_ERRORS = (ValueError, ConfigError, DataFormatError, ArchitectureError, TrainingDiverged, OSError,
                 FloatingPointError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
        cfg = parse_config(text, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "resolved.cfg", "# orthodefense " + shlex.join(argv) + "\n" + cfg.dumps())
        HANDLERS[args.command](cfg, args, out)
    except DOMAIN_ERRORS as exc:
        _say(f"orthodefense {args.command}: error: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
