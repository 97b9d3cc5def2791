"""Regenerate frozen_reference.json with explicit loops (independent of the library einsums).

Run from the repository root: python3 tests/data/make_frozen_reference.py
"""

import json
import random
from pathlib import Path

N = 5
FROZEN = [0, 3]
ACTIVE = [1, 2, 4]


def main():
    rng = random.Random(20240611)
    factors = []
    for _ in range(4):
        m = [[0.0] * N for _ in range(N)]
        for i in range(N):
            for j in range(i, N):
                m[i][j] = m[j][i] = rng.uniform(-0.5, 0.5)
        factors.append(m)
    # physicist h[t][u][v][w] = (tw|uv) = sum_k L_k[t][w] L_k[u][v]
    h4 = [[[[sum(f[t][w] * f[u][v] for f in factors) for w in range(N)] for v in range(N)] for u in range(N)]
          for t in range(N)]
    h1 = [[0.0] * N for _ in range(N)]
    for i in range(N):
        for j in range(i, N):
            h1[i][j] = h1[j][i] = rng.uniform(-1.0, 1.0)

    e_frozen = 0.0
    for a in FROZEN:
        e_frozen += 2.0 * h1[a][a]
        for b in FROZEN:
            e_frozen += 2.0 * h4[a][b][b][a] - h4[a][b][a][b]
    h_eff = []
    for t in ACTIVE:
        row = []
        for u in ACTIVE:
            value = h1[t][u]
            for a in FROZEN:
                value += 2.0 * h4[t][a][a][u] - h4[t][a][u][a]
            row.append(value)
        h_eff.append(row)

    out = {"n": N, "frozen": FROZEN, "active": ACTIVE, "h1": h1, "h4": h4, "e_frozen": e_frozen, "h_eff": h_eff}
    path = Path(__file__).with_name("frozen_reference.json")
    path.write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
