"""A small end-to-end training run: Adamax under the warmup/plateau/decay
schedule, early stopping on validation accuracy, checkpointing, and the
evaluation metrics (simple, MPT, N-MPT).

Takes about a minute on a laptop CPU. Run:
    python demos/04_train_and_evaluate.py
"""

import os
import tempfile

import numpy as np

from ramen import data as D
from ramen import metrics as ME
from ramen import model as M
from ramen import train as TR

# --- a small corpus and a small model ---------------------------------------
items, scenes, _ = D.generate_corpus(
    D.CorpusConfig(num_scenes=400, per_family=1, max_objects=3, seed=8)
)
vocab = D.build_answer_vocab(
    [it for it in items if it.split in ("train", "val")], {"min_count": 9}
)
data = TR.TrainData.build(
    items, scenes, vocab, feat_seed=1, noise_sigma=0.1, visual_dim=96, num_regions=15
)
print(f"{len(items)} questions over {len(scenes)} scenes, {len(vocab)} answers")

cfg = M.RamenConfig(
    num_answers=len(vocab), vocab_size=len(D.VOCAB), visual_dim=96, spatial_dim=512,
    question_dim=64, projector_width=64, aggregator_hidden=64,
    pre_classifier_width=128, embed_dim=32,
)
net = M.RamenModel(cfg, seed=0)

# The schedule keeps the reference shape (linear warmup, plateau, then decay
# by 0.25 every 2 epochs); rates are scaled up for this tiny corpus.
schedule = TR.Schedule(warmup_slope=1e-3, plateau_lr=2e-3, plateau_until_epoch=10)
trainer = TR.TrainerConfig(batch_size=64, max_epochs=12, early_stop_patience=6,
                           seed=0, augment_noise=0.2)

print("\nepoch  lr        train_loss  train_acc  val_acc")
result = TR.train(net, data, trainer, schedule)
for row in result.history:
    print(f"{row['epoch']:4d}   {row['lr']:.2e}  {row['train_loss']:.4f}     "
          f"{row['train_acc']:.3f}      {row['val_acc']:.3f}")
print(f"best val {result.best_val_acc:.3f} at epoch {result.best_epoch}")

# --- evaluate the best checkpoint with the full metric set -------------------
TR.apply_params(net, result.best_params)
acc, records = TR.evaluate(net, data, "test")
report = ME.build_report(records, include_harmonic=True)
print(f"\ntest: simple {report.overall_simple:.3f}  MPT {report.mpt:.3f}  "
      f"N-MPT {report.nmpt:.3f}  harmonic-MPT {report.harmonic_mpt:.3f}")
for fam, stats in report.per_family.items():
    print(f"  {fam:20s} {stats['simple']:.3f}  (n={stats['count']})")

# --- checkpoints round-trip exactly and resume continues the trajectory -----
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "demo.npz")
    state = TR.AdamaxState.init(net.parameters())
    rng = np.random.default_rng(0)
    gen = np.random.Generator(np.random.PCG64(0))
    TR.save_checkpoint(net, state, path, epoch=result.best_epoch, rng=gen)
    loaded, _, meta = TR.load_checkpoint(path)
    same = all(
        np.array_equal(p.data, q.data)
        for (_, p), (_, q) in zip(net.parameters(), loaded.parameters())
    )
    print(f"\ncheckpoint round-trip exact: {same} (epoch {meta['epoch']})")
