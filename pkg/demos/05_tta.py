"""The 60-transform test-time augmentation plan and its effect on one model.

Run: python3 demos/05_tta.py
"""

from collections import Counter

from lhcnet.backbone import build_tiny_spec, init_model
from lhcnet.cli import synthetic_dataset
from lhcnet.data import tta_enumerate
from lhcnet.train import Dataset, evaluate

plan = tta_enumerate()
print(f"{len(plan)} transforms, total weight {sum(plan.weights):g}")
print("weights:", dict(Counter(plan.weights)))
for t, w in list(zip(plan.transforms, plan.weights))[:5]:
    print(f"  {t}  weight {w:g}")

val = Dataset.from_split(synthetic_dataset(28, 16, 1)["PublicTest"])
model = init_model(build_tiny_spec(seed=1))
plain, tta = evaluate(model, val), evaluate(model, val, plan)
print(f"untrained model on {len(val)} images: plain {plain.accuracy:.3f}, TTA {tta.accuracy:.3f}")
