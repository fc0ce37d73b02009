"""Train a model whose input-gradients are orthogonal to a reference's and
watch transferred attacks lose their grip.

    python demos/orthogonal_training.py [--quick]

Three MLPs share one architecture and one synthetic dataset:

* ``source``, the attacker's surrogate, trained with seed 1;
* ``retrained``, an ordinary model trained with seed 2;
* ``orthogonal``, trained with seed 2 plus a penalty on the similarity of
  its input-gradients to those of ``source``.

Attacks are crafted on ``source`` and replayed against the other two.
"""

import argparse
import time
from dataclasses import replace

from orthodefense import EvalProtocol, measure_pair_similarity, parse_config, run_transfer
from orthodefense.cli import architecture, load_data, ortho_config, summary_table
from orthodefense.ortho import train_ordinary, train_orthogonal

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--quick", action="store_true", help="smaller data and fewer epochs")
args = parser.parse_args()

# the defaults are the desk configuration; --quick shrinks it for a smoke run
overrides = {"dataset.synth.n": "1200", "train.max_epochs": "40", "train.epochs_check": "10"} if args.quick else {}
cfg = parse_config("", overrides)
train, val = load_data(cfg)
arch = architecture(cfg, train.image_shape, train.num_classes)
base = ortho_config(cfg, lam=30.0)
print(f"{len(train)} training and {len(val)} validation images of shape {train.image_shape}, "
      f"{train.num_classes} classes")

t = time.perf_counter()
source, rec_s = train_ordinary(arch, train, val, replace(base, seed=1))
retrained, rec_r = train_ordinary(arch, train, val, replace(base, seed=2))
orthogonal, rec_o = train_orthogonal(arch, source, train, val, replace(base, seed=2))
print(f"trained three models in {time.perf_counter() - t:.0f}s")
print(f"  source      val acc {rec_s.best_val_acc:.3f}")
print(f"  retrained   val acc {rec_r.best_val_acc:.3f}")
print(f"  orthogonal  val acc {rec_o.best_val_acc:.3f}  (lambda = {base.lam:g}, {base.penalty} penalty)")

# similarity of unit input-gradients, averaged over ten validation batches
for name, model in (("retrained", retrained), ("orthogonal", orthogonal)):
    s = measure_pair_similarity(source, model, val, 10)
    print(f"  delta(source, {name:<10}) = {s.mean:+.4f}  (mean |delta| {s.mean_abs:.4f})")

protocol = EvalProtocol(n_samples=200 if args.quick else 500, eps_grid=(0.01, 0.03, 0.05))
report = run_transfer(source, {"retrained": retrained, "orthogonal": orthogonal}, val, protocol)
print()
print(summary_table(report))
