"""Where do local heads beat global ones?

A heads attend locally (one spatial band each), B heads are global, the
rest are idle. With n=8 and d=HW/16 local heads win on the dimension
measure once A > 0.26 B.

Run: python3 demos/03_efficiency_regions.py
"""

from lhcnet.analysis import region_scan

side, n = 56, 8
rows = region_scan(side, side, n, side * side // 16)
grid = {(r["A"], r["B"]): r for r in rows}
print("B\\A " + " ".join(f"{a:>2}" for a in range(n + 1)))
for b in range(n, -1, -1):
    cells = []
    for a in range(n + 1):
        r = grid.get((a, b))
        cells.append(" ." if r is None else (" L" if r["local_wins_dims"] else " G"))
    print(f"{b:>3} " + " ".join(cells))
print("L: local favoured, G: global favoured, .: A+B outside [1, n]")
