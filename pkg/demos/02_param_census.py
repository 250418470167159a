"""Parameter census of the five-block ResNet34v2 layout.

Run: python3 demos/02_param_census.py
"""

from lhcnet.backbone import build_full_spec, count_params

spec = build_full_spec()
census = count_params(spec)
print(f"{'position':<8} {'input':>12} {'n':>3} {'d':>4} {'params':>10}")
for ins, p in zip(spec.insertions, census.per_block):
    shape = "x".join(map(str, ins.config.input_shape))
    print(f"{ins.position:<8} {shape:>12} {ins.config.n:>3} {ins.config.d:>4} {p:>10,}")
print(f"attention {census.attention_only:,} of {census.total:,} "
      f"({100 * census.attention_share:.1f}%, {census.total / 1e6:.1f}M total)")
gated = count_params(build_full_spec(gated=True))
print(f"gated variant adds {gated.gates} scalar gates")
