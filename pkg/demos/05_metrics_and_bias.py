"""The evaluation metrics in isolation, and why normalized mean-per-type
exposes answer-distribution bias: a majority-answer predictor keeps a high
simple accuracy while its N-MPT collapses.

Run: python demos/05_metrics_and_bias.py
"""

import numpy as np

from ramen import metrics as ME

rng = np.random.default_rng(0)

# --- a skewed corpus: 85% of exist answers are "yes" -------------------------
records = []
qid = 0
for _ in range(400):
    gold = "yes" if rng.random() < 0.85 else "no"
    records.append(ME.PredictionRecord(qid, "exist", "yes", gold))  # majority predictor
    qid += 1
for _ in range(200):
    gold = str(rng.integers(0, 4))
    pred = "1"  # majority count
    records.append(ME.PredictionRecord(qid, "count", pred, gold))
    qid += 1

report = ME.build_report(records, include_harmonic=True)
print("majority-answer predictor on a skewed corpus:")
print(f"  simple accuracy {report.overall_simple:.3f}")
print(f"  MPT             {report.mpt:.3f}")
print(f"  N-MPT           {report.nmpt:.3f}   <- rare answers are all missed")
print(f"  harmonic MPT    {report.harmonic_mpt:.3f}")

# Per-answer accuracies inside one family show where the score went.
exist = [r for r in records if r.family == "exist"]
print("\nper-answer accuracy (exist):", ME.per_answer_accuracies(exist))

# --- the 10-choose-3 consensus metric ----------------------------------------
# With ten annotator answers per question, a prediction scores
# min(matches / 3, 1): full credit at three or more agreements.
for matches in (0, 1, 2, 3, 5):
    golds = tuple(["a"] * matches + ["b"] * (10 - matches))
    rec = ME.PredictionRecord(0, "f", "a", golds)
    print(f"prediction matching {matches}/10 annotators -> {ME.vqa_10choose3([rec]):.3f}")

# --- order invariance ---------------------------------------------------------
shuffled = list(records)
rng.shuffle(shuffled)
assert ME.mean_per_type(shuffled) == ME.mean_per_type(records)
assert ME.normalized_mean_per_type(shuffled) == ME.normalized_mean_per_type(records)
print("\nmetrics are order-invariant over records: True")
