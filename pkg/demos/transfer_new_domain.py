"""Adapt a trained model to a third anatomy with the shared weights frozen.

    python demos/transfer_new_domain.py [in.ckpt] [steps]

Run multi_domain_training.py first to produce demo.ckpt.
"""

import sys

from datr.checkpoint import load_checkpoint
from datr.datasets import gen_synthetic, synthetic_spec
from datr.trainer import TrainConfig, evaluate, transfer

path = sys.argv[1] if len(sys.argv) > 1 else "demo.ckpt"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 100

base = load_checkpoint(path)
gamma = gen_synthetic(synthetic_spec("gamma", 4), 20, seed=3, test_count=5, motif_offset=2)
before = base.build_model().store.checksum("shared")

# The new domain starts as a copy of an existing one wherever shapes agree;
# only its own tensors are updated and batch norm stays in inference mode.
new, trainer = transfer(base, gamma.spec, gamma, TrainConfig(epochs=1000, max_steps=steps, seed=0))
model = new.build_model()
print("trainable", model.store.count("domain/gamma"), "frozen", model.store.count("shared"))
print("shared weights unchanged:", model.store.checksum("shared") == before)
print(evaluate(model, [gamma], "test").to_text())
