"""Vocabulary-shape sweep: more sub-codebooks, exponentially more vocabulary.

Holds the total number of stored code vectors fixed while splitting them into
more (smaller) sub-codebooks. Held-out quantization error drops monotonically
while the theoretical vocabulary explodes, and MCQ beats residual
quantization at the same budget in high dimension.

Run:  python demos/04_vocabulary_scaling.py
"""

from vqkit.data import gen_vectors
from vqkit.evaluate import COMPARE_COLUMNS, compare_quantizers, rows_to_csv

vectors = gen_vectors(seed=0, count=24_000, dim=32)

sweep = [
    {"scheme": "mcq", "n": 1, "K": 256},
    {"scheme": "mcq", "n": 2, "K": 128},
    {"scheme": "mcq", "n": 4, "K": 64},
    {"scheme": "mcq", "n": 8, "K": 32},
]
rows = compare_quantizers(vectors, sweep, seeds=[0])
print(f"{'shape':>8s} {'vocab bits':>10s} {'held-out err':>12s} {'utilization':>11s}")
for r in rows:
    print(f"{r['n']:>4d}x{r['K']:<4d} {r['bits']:10.0f} {r['mean_error']:12.4f} "
          f"{r['utilization']:11.2f}")

print("\nMCQ vs RQ at the same 8x256 budget (64-d):")
vectors64 = gen_vectors(seed=3, count=24_000, dim=64)
duel = [{"scheme": "mcq", "n": 8, "K": 256}, {"scheme": "rq", "n": 8, "K": 256}]
rows = compare_quantizers(vectors64, duel, seeds=[0])
for r in rows:
    print(f"{r['scheme']:>4s}: held-out mean error {r['mean_error']:.4f}")
ratio = rows[1]["mean_error"] / rows[0]["mean_error"]
print(f"RQ error / MCQ error = {ratio:.1f}x")

print("\nfull CSV:")
print(rows_to_csv(rows, COMPARE_COLUMNS))
