"""Transferability evaluation: craft attacks on a source model, count how
often they fool a set of target models, and write the results as CSV.

Only samples that every model classifies correctly before perturbation are
evaluated, so a fooled sample is always one the attack broke.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attacks import ATTACKS, MAX_EPS, AttackSpec, run_attack
from .defenses import DefenseSpec, apply_defense
from .nn import Model, predict
from .ortho import OrthoConfig, PairSimilarity, TrainRecord, measure_pair_similarity, train_orthogonal

__all__ = [
    "REPORT_HEADER",
    "EvalProtocol",
    "ReportRow",
    "FoolingReport",
    "LambdaResult",
    "select_correct",
    "run_transfer",
    "sweep_lambda",
    "compare_defenses",
    "emit_report",
    "read_report",
    "plot_script",
]

REPORT_HEADER = "source,target,attack,epsilon,defense,n,n_fooled,fooling_ratio"
NO_DEFENSE = "none"
CHUNK = 100  # images per crafting job; fixed so results do not depend on the worker count


@dataclass(frozen=True)
class EvalProtocol:
    n_samples: int = 500
    eps_grid: tuple[float, ...] = (0.0, 0.005, 0.01, 0.02, 0.03, 0.05, 0.08)
    attacks: tuple[str, ...] = ATTACKS
    iters: int = 10
    mu: float = 1.0
    random_start: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "eps_grid", tuple(float(e) for e in self.eps_grid))
        object.__setattr__(self, "attacks", tuple(self.attacks))
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if not self.eps_grid:
            raise ValueError("the epsilon grid is empty")
        if list(self.eps_grid) != sorted(self.eps_grid):
            raise ValueError("the epsilon grid must be sorted")
        if any(not 0 <= e <= MAX_EPS for e in self.eps_grid):
            raise ValueError(f"every epsilon must lie in [0, {MAX_EPS}]")
        if not self.attacks:
            raise ValueError("no attacks given")
        for kind in self.attacks:
            if kind not in ATTACKS:
                raise ValueError(f"unknown attack {kind!r}")
        if self.workers <= 0:
            raise ValueError("workers must be positive")

    def spec(self, kind: str, eps: float, seed: int | None = None) -> AttackSpec:
        return AttackSpec(kind, eps, iters=self.iters, mu=self.mu, random_start=self.random_start,
                          seed=self.seed if seed is None else seed)


@dataclass(frozen=True)
class ReportRow:
    source: str
    target: str
    attack: str
    epsilon: float
    defense: str
    n: int
    n_fooled: int

    @property
    def fooling_ratio(self) -> float:
        return self.n_fooled / self.n

    def key(self):
        return (self.source, self.target, self.attack, self.epsilon, self.defense)


@dataclass
class FoolingReport:
    rows: list[ReportRow] = field(default_factory=list)
    sample_indices: np.ndarray | None = None

    def sorted(self) -> "FoolingReport":
        return FoolingReport(sorted(self.rows, key=ReportRow.key), self.sample_indices)

    def extend(self, other: "FoolingReport") -> "FoolingReport":
        return FoolingReport(self.rows + other.rows, self.sample_indices).sorted()

    def ratio(self, target: str, attack: str, epsilon: float, defense: str = NO_DEFENSE) -> float:
        for r in self.rows:
            if r.target == target and r.attack == attack and r.epsilon == epsilon and r.defense == defense:
                return r.fooling_ratio
        raise KeyError((target, attack, epsilon, defense))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(REPORT_HEADER + "\n")
        writer = csv.writer(out, lineterminator="\n")
        for r in self.sorted().rows:
            writer.writerow([r.source, r.target, r.attack, repr(r.epsilon), r.defense, r.n, r.n_fooled,
                             repr(r.fooling_ratio)])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FoolingReport":
        lines = text.splitlines()
        if not lines or lines[0] != REPORT_HEADER:
            raise ValueError("report header does not match")
        rows = []
        for lineno, rec in enumerate(csv.reader(lines[1:]), start=2):
            if len(rec) != 8:
                raise ValueError(f"line {lineno}: expected 8 fields")
            row = ReportRow(rec[0], rec[1], rec[2], float(rec[3]), rec[4], int(rec[5]), int(rec[6]))
            if row.n <= 0 or not 0 <= row.n_fooled <= row.n:
                raise ValueError(f"line {lineno}: bad counts")
            if float(rec[7]) != row.fooling_ratio:
                raise ValueError(f"line {lineno}: fooling_ratio disagrees with the counts")
            rows.append(row)
        return cls(rows)


# ---------------------------------------------------------------------------


def _xy(data):
    if hasattr(data, "images"):
        return np.asarray(data.images, dtype=np.float64), np.asarray(data.labels)
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def select_correct(models: Sequence[Model], dataset, n: int, seed: int = 0) -> np.ndarray:
    """Seeded draw of ``n`` sample indices that every model classifies correctly (sorted)."""
    x, y = _xy(dataset)
    ok = np.ones(len(y), dtype=bool)
    for m in models:
        ok &= predict(m, x) == y
    pool = np.flatnonzero(ok)
    if len(pool) < n:
        raise ValueError(f"only {len(pool)} samples are correct on every model, {n} requested")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=n, replace=False))


def _craft_chunk(job):
    model, x, y, spec = job
    return run_attack(model, x, y, spec).perturbed


def _craft(source: Model, x, y, spec: AttackSpec, workers: int) -> np.ndarray:
    starts = range(0, len(y), CHUNK)
    jobs = [(source, x[s : s + CHUNK], y[s : s + CHUNK], replace(spec, seed=spec.seed + i))
            for i, s in enumerate(starts)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_craft_chunk, jobs))
    else:
        parts = [_craft_chunk(j) for j in jobs]
    return np.concatenate(parts) if parts else x.copy()


def _named(targets) -> dict[str, Model]:
    if isinstance(targets, Mapping):
        return dict(targets)
    return {f"target{i}": m for i, m in enumerate(targets)}


def run_transfer(source: Model, targets, data, protocol: EvalProtocol,
                 defense: DefenseSpec | None = None, source_name: str = "source",
                 indices=None) -> FoolingReport:
    """Fooling counts of attacks crafted on ``source`` against each target.

    ``targets`` is a name -> Model mapping (or a list, named target0, ...).
    The source is always evaluated too, as the white-box row.  A defense,
    when given, transforms the input of every target (and of the white-box
    row) before classification.
    """
    named = _named(targets)
    if source_name in named:
        raise ValueError(f"target name {source_name!r} collides with the source")
    x, y = _xy(data)
    for name, m in named.items():
        if m.input_shape != source.input_shape or m.num_classes != source.num_classes:
            raise ValueError(f"target {name!r} does not match the source's input shape or class count")
    if indices is None:
        indices = select_correct([source, *named.values()], (x, y), protocol.n_samples, protocol.seed)
    xs, ys = x[indices], y[indices]
    evaluated = {source_name: source, **named}
    dname = NO_DEFENSE if defense is None else defense.name
    rows = []
    for kind in protocol.attacks:
        for eps in protocol.eps_grid:
            adv = _craft(source, xs, ys, protocol.spec(kind, eps), protocol.workers)
            seen = apply_defense(adv, defense)
            for name, m in evaluated.items():
                fooled = int(np.sum(predict(m, seen) != ys))
                rows.append(ReportRow(source_name, name, kind, eps, dname, len(ys), fooled))
    return FoolingReport(rows, np.asarray(indices)).sorted()


@dataclass
class LambdaResult:
    lam: float
    similarity: PairSimilarity
    report: FoolingReport
    record: TrainRecord
    model: Model


def sweep_lambda(arch, ref: Model, lambdas: Sequence[float], train, val, protocol: EvalProtocol,
                 cfg: OrthoConfig = OrthoConfig(), similarity_batches: int = 10,
                 log=None) -> list[LambdaResult]:
    """Train one model per lambda against ``ref`` and evaluate transfer from ``ref`` to it."""
    if not len(lambdas):
        raise ValueError("no lambda values given")
    out = []
    for lam in lambdas:
        model, record = train_orthogonal(arch, ref, train, val, replace(cfg, lam=float(lam)),
                                         input_shape=ref.input_shape)
        sim = measure_pair_similarity(ref, model, val, similarity_batches)
        report = run_transfer(ref, {f"lambda={_num(lam)}": model}, val, protocol)
        out.append(LambdaResult(float(lam), sim, report, record, model))
        if log is not None:
            log(out[-1])
    return out


def compare_defenses(source: Model, ordinary: Model, orthogonal: Model, specs: Sequence[DefenseSpec],
                     data, protocol: EvalProtocol) -> FoolingReport:
    """Defended ordinary target against the undefended orthogonal target.

    Rows cover the ordinary target without defense, with each defense, and
    the orthogonal target without defense.  The epsilon grid always
    includes 0, whose rows give the clean-sample fooling ratio.
    """
    grid = protocol.eps_grid if 0.0 in protocol.eps_grid else (0.0, *protocol.eps_grid)
    protocol = replace(protocol, eps_grid=tuple(sorted(grid)))
    idx = select_correct([source, ordinary, orthogonal], data, protocol.n_samples, protocol.seed)
    x, y = _xy(data)
    xs, ys = x[idx], y[idx]
    rows = []
    for kind in protocol.attacks:
        for eps in protocol.eps_grid:
            adv = _craft(source, xs, ys, protocol.spec(kind, eps), protocol.workers)
            for spec in (None, *specs):
                seen = apply_defense(adv, spec)
                fooled = int(np.sum(predict(ordinary, seen) != ys))
                rows.append(ReportRow("source", "ordinary", kind, eps,
                                      NO_DEFENSE if spec is None else spec.name, len(ys), fooled))
            fooled = int(np.sum(predict(orthogonal, adv) != ys))
            rows.append(ReportRow("source", "orthogonal", kind, eps, NO_DEFENSE, len(ys), fooled))
    return FoolingReport(rows, idx).sorted()


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# ---------------------------------------------------------------------------
# output


def plot_script(csv_name: str) -> str:
    """Python source that plots fooling ratio against epsilon, one panel per attack."""
    return f'''"""Plot fooling ratio against epsilon from {csv_name} (needs matplotlib)."""
import csv
import os
from collections import defaultdict

import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
curves = defaultdict(list)
with open(os.path.join(here, "{csv_name}"), newline="") as fh:
    for row in csv.DictReader(fh):
        label = row["target"] if row["defense"] == "none" else row["target"] + " + " + row["defense"]
        curves[row["attack"], label].append((float(row["epsilon"]), 100 * float(row["fooling_ratio"])))

attacks = sorted({{a for a, _ in curves}})
fig, axes = plt.subplots(1, len(attacks), figsize=(4 * len(attacks), 3.5), squeeze=False)
for ax, attack in zip(axes[0], attacks):
    for (a, label), pts in sorted(curves.items()):
        if a == attack:
            pts.sort()
            ax.plot([100 * e for e, _ in pts], [f for _, f in pts], marker="o", label=label)
    ax.set_title(attack)
    ax.set_xlabel("epsilon (%)")
    ax.set_ylabel("fooling ratio (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
axes[0][0].legend(fontsize=8)
fig.tight_layout()
fig.savefig(os.path.join(here, "{Path(csv_name).stem}.png"), dpi=120)
'''


def emit_report(report: FoolingReport, path) -> tuple[Path, Path]:
    """Write ``report`` as CSV at ``path`` plus ``plot_<stem>.py`` beside it."""
    if not report.rows:
        raise ValueError("refusing to write an empty report")
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"directory {path.parent} does not exist")
    script = path.with_name(f"plot_{path.stem}.py")
    text = report.to_csv()
    path.write_text(text, encoding="utf-8", newline="")
    script.write_text(plot_script(path.name), encoding="utf-8", newline="")
    return path, script


def read_report(path) -> FoolingReport:
    return FoolingReport.from_csv(Path(path).read_text(encoding="utf-8"))


def default_workers() -> int:
    return os.cpu_count() or 1
