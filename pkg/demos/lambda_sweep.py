"""How the penalty weight trades gradient similarity against accuracy.

    python demos/lambda_sweep.py [--quick]

One model per lambda is trained against a fixed reference. Lambda = 0 is an
ordinary retrain. For each model the script prints the similarity to the
reference, the validation accuracy and the PGD fooling ratio of attacks
crafted on the reference.
"""

import argparse
from dataclasses import replace

from orthodefense import EvalProtocol, parse_config, sweep_lambda
from orthodefense.cli import architecture, load_data, ortho_config
from orthodefense.ortho import train_ordinary

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--quick", action="store_true", help="smaller data and fewer epochs")
args = parser.parse_args()

overrides = {"dataset.synth.n": "1200", "train.max_epochs": "40", "train.epochs_check": "10"} if args.quick else {}
cfg = parse_config("", overrides)
train, val = load_data(cfg)
arch = architecture(cfg, train.image_shape, train.num_classes)
base = ortho_config(cfg, lam=30.0)
reference, rec = train_ordinary(arch, train, val, replace(base, seed=1))
print(f"reference val acc {rec.best_val_acc:.3f}\n")
print(f"{'lambda':>7} {'mean |delta|':>13} {'val acc':>8} {'stop':>5} {'pgd@0.03':>9} {'pgd@0.05':>9}")


def show(r):
    (name,) = {row.target for row in r.report.rows} - {"source"}
    fool = [r.report.ratio(name, "pgd", e) for e in (0.03, 0.05)]
    print(f"{r.lam:>7g} {r.similarity.mean_abs:>13.4f} {r.record.best_val_acc:>8.3f} "
          f"{r.record.best_epoch:>5} {fool[0]:>9.3f} {fool[1]:>9.3f}", flush=True)


protocol = EvalProtocol(n_samples=200 if args.quick else 500, eps_grid=(0.03, 0.05), attacks=("pgd",))
sweep_lambda(arch, reference, [0, 5, 30, 100], train, val, protocol, replace(base, seed=2), log=show)
