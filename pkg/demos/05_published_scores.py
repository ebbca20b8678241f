"""Recompute the arena driving score from a published per-route table.

ADS is route completion times PDMS. Feeding the published PDMS and RC of four
routes through ``ads`` shows which printed ADS values follow from the printed
inputs and which do not (see the acceptance notes in the README).

    python3 demos/05_published_scores.py
"""

from statistics import mean

from arenasim.metrics import ads

rows = [
    ("sing_route_1", 0.7615, 0.1684, 0.1282),
    ("sing_route_2", 0.7215, 0.169, 0.0875),
    ("boston_route_1", 0.4952, 0.091, 0.0450),
    ("boston_route_2", 0.6888, 0.121, 0.0835),
]

print(f"{'route':<16} {'PDMS':>7} {'RC':>7} {'printed':>8} {'RC*PDMS':>8} {'diff':>8}")
for name, pdms, rc, printed in rows:
    value = ads(rc, pdms)
    flag = "" if abs(value - printed) <= 1e-4 else "  <- beyond 1e-4"
    print(f"{name:<16} {pdms:>7.4f} {rc:>7.4f} {printed:>8.4f} {value:>8.4f} {value - printed:>+8.4f}{flag}")

print(f"\nmean printed ADS {mean(r[3] for r in rows):.4f}; mean of products {mean(ads(r[2], r[1]) for r in rows):.4f}")
