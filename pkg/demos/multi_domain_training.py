"""Train one model on two synthetic anatomies and score it.

    python demos/multi_domain_training.py [steps] [out.ckpt]

Defaults: 150 steps (about a minute), checkpoint written to demo.ckpt.
"""

import sys

from datr.checkpoint import save_checkpoint
from datr.datasets import gen_synthetic, synthetic_spec
from datr.trainer import TrainConfig, evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150
out = sys.argv[2] if len(sys.argv) > 2 else "demo.ckpt"

# Two domains with different landmark counts and motifs; 16 train + 4 val images each.
alpha = gen_synthetic(synthetic_spec("alpha", 3), 20, seed=1, test_count=5)
beta = gen_synthetic(synthetic_spec("beta", 5), 20, seed=2, test_count=5, motif_offset=3)


def progress(trainer, row):
    print(f"epoch {row['epoch']:3d}  step {row['steps']:4d}  lr {row['lr']:.1e}  "
          f"train {row['train_loss']:.4f}  val {row['val_total']:.4f}")


ckpt, trainer = train(TrainConfig(epochs=1000, max_steps=steps, seed=0), [alpha, beta], on_epoch=progress)
model = ckpt.build_model()
store = model.store
print(f"\nshared parameters {store.count('shared')}, per domain "
      + ", ".join(f"{d}: {store.count(f'domain/{d}')}" for d in model.domains))
print(f"best epoch {ckpt.meta['best_epoch']} (min validation loss)\n")
print(evaluate(model, [alpha, beta], "test").to_text())
save_checkpoint(ckpt, out)
print("saved", out)
