"""Input-transformation defenses next to orthogonal training.

    python demos/defenses_tour.py [--quick]

The four defenses are applied to a handful of adversarial examples to show
what each one does to the pixels. Then the harness compares a defended
ordinary target against an undefended orthogonal one. The epsilon = 0 rows
show the clean-sample cost of each defense.
"""

import argparse
from dataclasses import replace

import numpy as np

from orthodefense import DefenseSpec, EvalProtocol, compare_defenses, parse_config, pgd, predict
from orthodefense.cli import architecture, load_data, ortho_config, summary_table
from orthodefense.defenses import tv_minimize
from orthodefense.ortho import train_ordinary, train_orthogonal

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--quick", action="store_true", help="smaller data and fewer epochs")
args = parser.parse_args()

overrides = {"dataset.synth.n": "1200", "train.max_epochs": "40", "train.epochs_check": "10"} if args.quick else {}
cfg = parse_config("", overrides)
train, val = load_data(cfg)
arch = architecture(cfg, train.image_shape, train.num_classes)
base = ortho_config(cfg, lam=30.0)
source, _ = train_ordinary(arch, train, val, replace(base, seed=1))
ordinary, _ = train_ordinary(arch, train, val, replace(base, seed=2))
orthogonal, _ = train_orthogonal(arch, source, train, val, replace(base, seed=2))

specs = [DefenseSpec.parse(s) for s in ("jpeg:quality=75", "tvm:weight=0.05", "bit:depth=3", "bilateral:window=5")]

# what each defense does to eight PGD examples at eps = 0.05
x, y = val.images[:8], val.labels[:8]
adv = pgd(source, x, y, 0.05).perturbed
print(f"{'defense':<22} {'mean |change|':>14} {'max |change|':>13} {'ordinary still fooled':>22}")
print(f"{'none':<22} {0:>14.4f} {0:>13.4f} {int(np.sum(predict(ordinary, adv) != y)):>19}/8")
for spec in specs:
    out = spec(adv)
    d = np.abs(out - adv)
    print(f"{spec.name:<22} {d.mean():>14.4f} {d.max():>13.4f} {int(np.sum(predict(ordinary, out) != y)):>19}/8")

# the TV solver descends its energy monotonically
_, energy = tv_minimize(adv, 0.05, return_energy=True)
print(f"\ntotal-variation energy, image 0: {energy[0, 0]:.3f} -> {energy[-1, 0]:.3f} over {len(energy) - 1} steps")

protocol = EvalProtocol(n_samples=200 if args.quick else 500, eps_grid=(0.03, 0.05), attacks=("fgsm", "pgd"))
report = compare_defenses(source, ordinary, orthogonal, specs, val, protocol)
print()
print(summary_table(report))
