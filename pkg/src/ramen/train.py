"""Training loop: Adamax updates under a warmup/plateau/decay learning-rate
schedule, seeded shuffling into fixed-size mini-batches, per-epoch validation
with early stopping on simple accuracy, and value-exact checkpointing
(parameters, optimizer state, batchnorm buffers, RNG state), so a resumed run
reproduces a straight-through run bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from .errors import DataError, NumericError
from .metrics import PredictionRecord
from .tensor import Tensor

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class Schedule:
    """Warmup for the first `warmup_epochs` epochs at `warmup_slope * epoch`,
    a plateau through `plateau_until_epoch`, then multiply by `decay_factor`
    every `decay_every` epochs. The warmup peak (2x the plateau rate at the
    defaults) is deliberate, not smoothed out."""

    warmup_epochs: int = 4
    warmup_slope: float = 2.5e-4
    plateau_lr: float = 5e-4
    plateau_until_epoch: int = 10
    decay_factor: float = 0.25
    decay_every: int = 2

    def __post_init__(self):
        if min(self.warmup_epochs, self.plateau_until_epoch, self.decay_every) <= 0:
            raise ValueError("schedule epochs must be positive")
        if min(self.warmup_slope, self.plateau_lr, self.decay_factor) <= 0:
            raise ValueError("schedule rates must be positive")


def lr_at_epoch(s: Schedule, epoch: int) -> float:
    """Learning rate for a 1-based epoch index."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    if epoch <= s.warmup_epochs:
        return s.warmup_slope * epoch
    if epoch <= s.plateau_until_epoch:
        return s.plateau_lr
    steps = math.ceil((epoch - s.plateau_until_epoch) / s.decay_every)
    return s.plateau_lr * s.decay_factor**steps


# ---------------------------------------------------------------------------
# Adamax


@dataclass
class AdamaxState:
    """First moment m and infinity-norm accumulator u per parameter."""

    m: dict
    u: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        m = {name: np.zeros_like(p.data) for name, p in params}
        u = {name: np.zeros_like(p.data) for name, p in params}
        return cls(m=m, u=u, t=0, beta1=beta1, beta2=beta2, eps=eps)


def adamax_step(state: AdamaxState, params, grads, lr: float) -> None:
    """One update: t += 1; m = b1*m + (1-b1)*g; u = max(b2*u, |g|);
    theta -= (lr / (1 - b1^t)) * m / (u + eps). Mutates params in place."""
    state.t += 1
    step = lr / (1.0 - state.beta1**state.t)
    for name, p in params:
        g = grads[name]
        if g is None:
            raise NumericError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        u = state.u[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.data -= (step * m / (u + state.eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# training data assembly


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 64
    max_epochs: int = 20
    early_stop_patience: int = 5
    seed: int = 0
    precision: str = "float32"
    loss: str = "softmax"  # or "binary" for multi-label targets
    # Fresh Gaussian noise on the visual features of every training batch
    # (same scale convention as the featurizer). Discourages memorizing the
    # frozen per-scene noise signature; evaluation always sees the stored
    # features. Drawn from the trainer's seeded stream, so determinism and
    # resume exactness are unaffected.
    augment_noise: float = 0.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (train-mode batchnorm)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.loss not in ("softmax", "binary"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.augment_noise < 0:
            raise ValueError("augment_noise must be >= 0")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class TrainData:
    """Featurized corpus ready for batching: one feature block per scene,
    items grouped by split, and the closed answer vocabulary."""

    features: np.ndarray  # [scenes, regions, region_dim]
    scene_row: dict
    by_split: dict
    vocab: D.AnswerVocab
    num_regions: int
    visual_dim: int = 0  # leading columns of region_dim that are visual

    @property
    def region_dim(self) -> int:
        return self.features.shape[2]

    @classmethod
    def build(
        cls,
        items,
        scenes,
        vocab: D.AnswerVocab,
        feat_seed: int = 0,
        noise_sigma: float = 0.1,
        visual_dim: int = 2048,
        num_regions: int = 15,
        zero_regions: bool = False,
    ):
        """Featurize every scene once and index items by split. Training
        items whose answer is out of vocabulary are dropped; evaluation items
        keep theirs and simply score zero. `zero_regions` blanks all region
        features for the question-only baseline."""
        scene_row = {}
        feats = np.zeros(
            (len(scenes), num_regions, visual_dim + 2 * M.SPATIAL_GRID**2), dtype=np.float32
        )
        for row, sc in enumerate(scenes):
            scene_row[sc.id] = row
            if not zero_regions:
                feats[row] = D.featurize_scene(
                    sc, noise_sigma, feat_seed, visual_dim, num_regions
                ).to_matrix(np.float32)
        by_split = {s: [] for s in D.SPLITS}
        dropped = 0
        for it in items:
            if it.split == "train" and it.answer not in vocab:
                dropped += 1
                continue
            by_split[it.split].append(it)
        if dropped:
            import logging

            logging.getLogger(__name__).info(
                "dropped %d training items with out-of-vocabulary answers", dropped
            )
        return cls(
            features=feats,
            scene_row=scene_row,
            by_split=by_split,
            vocab=vocab,
            num_regions=num_regions,
            visual_dim=visual_dim,
        )


def _assemble_batch(data: TrainData, items, dtype, augment=None):
    """Stack region features and pad token rows for a list of items.

    `augment` is an optional (rng, sigma) pair adding fresh Gaussian noise to
    the visual columns, training batches only.
    """
    n = data.num_regions
    rows = np.asarray([data.scene_row[it.scene_id] for it in items], dtype=np.intp)
    feats = data.features[rows].reshape(len(items) * n, data.region_dim).astype(dtype, copy=False)
    if augment is not None and data.visual_dim > 0:
        rng, sigma = augment
        if sigma > 0:
            per_coord = sigma / np.sqrt(data.visual_dim)
            noise = rng.standard_normal((feats.shape[0], data.visual_dim))
            feats = feats.copy()
            feats[:, : data.visual_dim] += (per_coord * noise).astype(dtype)
    max_len = max(len(it.tokens) for it in items)
    token_rows = np.zeros((len(items), max_len), dtype=np.intp)  # pad id 0
    lengths = np.empty(len(items), dtype=np.intp)
    for i, it in enumerate(items):
        token_rows[i, : len(it.tokens)] = it.tokens
        lengths[i] = len(it.tokens)
    return Tensor(feats, dtype=dtype), token_rows, lengths


def _labels(data: TrainData, items) -> np.ndarray:
    return np.asarray([data.vocab.index[it.answer] for it in items], dtype=np.intp)


def evaluate(model: M.RamenModel, data: TrainData, split: str, batch_size: int = 64):
    """Accuracy and per-question records on a split, with eval-mode batchnorm
    and no gradient recording. Partial final batches are kept."""
    items = data.by_split[split]
    if not items:
        raise DataError(f"split {split!r} is empty")
    answers = data.vocab.answers
    model.eval()
    records = []
    correct = 0
    with T.no_grad():
        for lo in range(0, len(items), batch_size):
            chunk = items[lo : lo + batch_size]
            feats, token_rows, lengths = _assemble_batch(data, chunk, model.dtype)
            logits = M.forward_batch(model, feats, data.num_regions, token_rows, lengths)
            pred = np.argmax(logits.data, axis=1)  # ties break toward the lowest index
            for it, k in zip(chunk, pred):
                predicted = answers[int(k)]
                records.append(
                    PredictionRecord(
                        question_id=it.id,
                        family=it.family,
                        predicted_answer=predicted,
                        gold=it.answer,
                    )
                )
                if predicted == it.answer:
                    correct += 1
    return correct / len(items), records


# ---------------------------------------------------------------------------
# checkpointing


def _rng_state_to_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _rng_from_json(state_json: str) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = json.loads(state_json)
    return rng


def save_checkpoint(
    model: M.RamenModel,
    state: AdamaxState,
    path,
    epoch: int,
    rng: np.random.Generator,
    best_epoch: int = -1,
    best_val_acc: float = float("-inf"),
    best_params: Optional[dict] = None,
) -> None:
    """Single-file archive of everything needed to resume exactly."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "dtype": model.dtype.name,
        "model_seed": model.seed,
        "epoch": epoch,
        "adamax": {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "rng_state": _rng_state_to_json(rng),
        "best_epoch": best_epoch,
        "best_val_acc": best_val_acc,
        "has_best": best_params is not None,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, p in model.parameters():
        arrays[f"param/{name}"] = p.data
        arrays[f"adamax_m/{name}"] = state.m[name]
        arrays[f"adamax_u/{name}"] = state.u[name]
    for name, buf in model.buffers():
        arrays[f"buffer/{name}"] = buf
    if best_params is not None:
        for name, arr in best_params.items():
            arrays[f"best/{name}"] = arr
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, expect_config: Optional[M.RamenConfig] = None):
    """Rebuild (model, state, meta) from a checkpoint file.

    `expect_config`, when given, is compared field by field and a mismatch
    raises with the differing field names.
    """
    try:
        archive = np.load(path, allow_pickle=False)
        meta = json.loads(bytes(archive["meta"]).decode("utf-8"))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    config = M.RamenConfig(**meta["config"])
    if expect_config is not None and config != expect_config:
        diffs = [
            f
            for f in asdict(config)
            if getattr(config, f) != getattr(expect_config, f)
        ]
        raise DataError(f"checkpoint config mismatch on fields: {', '.join(diffs)}")
    model = M.RamenModel(config, seed=meta["model_seed"], dtype=np.dtype(meta["dtype"]))
    for name, p in model.parameters():
        p.data[...] = archive[f"param/{name}"]
    model.input_bn.running_mean = archive["buffer/input_bn.running_mean"].copy()
    model.input_bn.running_var = archive["buffer/input_bn.running_var"].copy()
    ad = meta["adamax"]
    state = AdamaxState(
        m={name: archive[f"adamax_m/{name}"].copy() for name, _ in model.parameters()},
        u={name: archive[f"adamax_u/{name}"].copy() for name, _ in model.parameters()},
        t=ad["t"],
        beta1=ad["beta1"],
        beta2=ad["beta2"],
        eps=ad["eps"],
    )
    meta["rng"] = _rng_from_json(meta["rng_state"])
    if meta["has_best"]:
        meta["best_params"] = {
            key[len("best/") :]: archive[key].copy()
            for key in archive.files
            if key.startswith("best/")
        }
    return model, state, meta


def snapshot_params(model: M.RamenModel) -> dict:
    out = {name: p.data.copy() for name, p in model.parameters()}
    for name, buf in model.buffers():
        out[name] = buf.copy()
    return out


def apply_params(model: M.RamenModel, params: dict) -> None:
    for name, p in model.parameters():
        p.data[...] = params[name]
    model.input_bn.running_mean = params["input_bn.running_mean"].copy()
    model.input_bn.running_var = params["input_bn.running_var"].copy()


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("-inf")
    best_params: Optional[dict] = None
    stopped_early: bool = False


def write_learning_curve(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,lr,train_loss,train_acc,val_acc\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['lr']:.10g},{row['train_loss']:.10g},"
                f"{row['train_acc']:.10g},{row['val_acc']:.10g}\n"
            )


def train(
    model: M.RamenModel,
    data: TrainData,
    cfg: TrainerConfig,
    schedule: Schedule = Schedule(),
    resume_from=None,
    checkpoint_path=None,
) -> TrainResult:
    """Optimize `model` on the train split with per-epoch validation.

    Each epoch shuffles with a seeded generator and walks batches of
    cfg.batch_size (the trailing partial batch is dropped in train mode).
    The best validation checkpoint is tracked by simple accuracy; training
    stops after `early_stop_patience` non-improving epochs. With
    `resume_from`, optimizer, RNG and epoch state continue exactly where the
    checkpoint left off.
    """
    train_items = data.by_split["train"]
    if cfg.max_epochs > 0 and not train_items:
        raise DataError("train split is empty")
    if cfg.max_epochs > 0 and not data.by_split["val"]:
        raise DataError("val split is empty")

    result = TrainResult()
    params = model.parameters()
    if resume_from is not None:
        loaded_model, state, meta = load_checkpoint(resume_from, expect_config=model.config)
        if loaded_model.dtype != model.dtype:
            raise DataError(
                f"checkpoint precision {loaded_model.dtype.name} != model {model.dtype.name}"
            )
        apply_params(model, snapshot_params(loaded_model))
        rng = meta["rng"]
        start_epoch = meta["epoch"]
        result.best_epoch = meta["best_epoch"]
        result.best_val_acc = meta["best_val_acc"]
        result.best_params = meta.get("best_params")
    else:
        state = AdamaxState.init(params)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 11])))
        start_epoch = 0

    n_batches = len(train_items) // cfg.batch_size
    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        lr = lr_at_epoch(schedule, epoch)
        model.train()
        order = rng.permutation(len(train_items))
        epoch_loss = 0.0
        epoch_hits = 0
        augment = (rng, cfg.augment_noise) if cfg.augment_noise > 0 else None
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            chunk = [train_items[i] for i in idx]
            feats, token_rows, lengths = _assemble_batch(data, chunk, model.dtype, augment)
            labels = _labels(data, chunk)
            with T.Tape():
                logits = M.forward_batch(model, feats, data.num_regions, token_rows, lengths)
                if cfg.loss == "softmax":
                    loss = T.softmax_cross_entropy(logits, labels)
                else:
                    targets = np.zeros(logits.shape, dtype=model.dtype)
                    targets[np.arange(len(chunk)), labels] = 1.0
                    loss = T.sigmoid_binary_cross_entropy(logits, targets)
                loss_value = float(loss.data)
                if not np.isfinite(loss_value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {b}")
                T.backward(loss)
            grads = {name: p.grad for name, p in params}
            adamax_step(state, params, grads, lr)
            model.zero_grad()
            epoch_loss += loss_value
            epoch_hits += int((np.argmax(logits.data, axis=1) == labels).sum())
        val_acc, _ = evaluate(model, data, "val", cfg.batch_size)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / max(n_batches, 1),
            "train_acc": epoch_hits / max(n_batches * cfg.batch_size, 1),
            "val_acc": val_acc,
        }
        result.history.append(row)
        if val_acc > result.best_val_acc:
            result.best_val_acc = val_acc
            result.best_epoch = epoch
            result.best_params = snapshot_params(model)
        elif epoch - result.best_epoch >= cfg.early_stop_patience:
            result.stopped_early = True
            if checkpoint_path is not None:
                save_checkpoint(
                    model, state, checkpoint_path, epoch, rng,
                    result.best_epoch, result.best_val_acc, result.best_params,
                )
            break
        if checkpoint_path is not None:
            save_checkpoint(
                model, state, checkpoint_path, epoch, rng,
                result.best_epoch, result.best_val_acc, result.best_params,
            )
    return result
