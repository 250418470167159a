"""Memorize 32 synthetic faces, then run the four-stage protocol on 200.

Takes about a minute on one core.

Run: python3 demos/04_desk_training.py
"""

from lhcnet.backbone import build_tiny_spec, init_model, tiny_forward
from lhcnet.cli import synthetic_dataset
from lhcnet.train import Dataset, Optimizer, accuracy, crossentropy, standard_stages, run_protocol, train_step

spec = build_tiny_spec(seed=0)
small = Dataset.from_split(synthetic_dataset(32, 16, 0)["Training"])
model, opt = init_model(spec), Optimizer("adam", 3e-3)
for epoch in range(1, 501):
    model, _ = train_step(model, small.images, small.labels, opt, list(model.params))
    loss = crossentropy(tiny_forward(model, small.images), small.labels).item()
    if epoch % 20 == 0 or loss < 0.01:
        print(f"epoch {epoch:>3}  loss {loss:.4f}  train acc {accuracy(model, small):.2f}")
    if loss < 0.01:
        break

splits = synthetic_dataset(200, 16, 0)
train, val = Dataset.from_split(splits["Training"]), Dataset.from_split(splits["PublicTest"])
res = run_protocol(init_model(spec), train, val, standard_stages(), seed=0)
for k, h in enumerate(res.stages, start=1):
    print(f"stage {k}: {len(h.records) - 1} epochs, best val acc {h.best_metric:.3f} at epoch {h.best_epoch}, "
          f"stopped early={h.stopped_early}")
print(f"loss {res.base_loss:.4f} -> {res.final_loss:.4f}: {'accepted' if res.verdict.accepted else 'rejected'}")
