"""The recurrent-aggregation VQA model.

Three phases over a set of region features r_1..r_N and a question vector q:
fuse early (concatenate q onto every region, then batch-normalize), project
each fused vector through a shared residual MLP into a bimodal embedding,
then re-attach q and aggregate the sequence with a bidirectional GRU whose
final states feed a small classifier head. Ablation variants switch off the
early fusion, the late fusion, or replace the recurrent aggregation with a
mean over regions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

ABLATIONS = ("full", "no_early_fusion", "no_late_fusion", "mean_pool")

SPATIAL_GRID = 16  # fixed grid; 16*16 (x,y) pairs -> 512 values


def encode_spatial(box, grid: int = SPATIAL_GRID) -> np.ndarray:
    """Encode a bounding box as a grid of image-relative coordinates.

    The box (x0,y0,x1,y1) is divided into a grid x grid lattice of points
    spanning it inclusively; each point contributes its (x, y) coordinates,
    flattened row-major into a vector of 2*grid*grid values in [0, 1].
    """
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (0.0 <= x0 <= 1.0 and 0.0 <= y0 <= 1.0 and x1 <= 1.0 and y1 <= 1.0):
        raise ValueError(f"box must lie in the unit square, got {box}")
    if x0 >= x1 or y0 >= y1:
        raise ValueError(f"degenerate box (zero width or height): {box}")
    xs = np.linspace(x0, x1, grid)
    ys = np.linspace(y0, y1, grid)
    out = np.empty((grid, grid, 2))
    out[:, :, 0] = xs[np.newaxis, :]
    out[:, :, 1] = ys[:, np.newaxis]
    return out.reshape(-1)


@dataclass
class RegionSet:
    """Per-image list of region feature vectors, visual part then spatial part."""

    regions: list

    def __post_init__(self):
        if len(self.regions) < 1:
            raise ValueError("a region set needs at least one region")
        dim = len(self.regions[0])
        for r in self.regions:
            if len(r) != dim:
                raise ValueError("regions must share one feature length")

    def __len__(self):
        return len(self.regions)

    @property
    def dim(self) -> int:
        return len(self.regions[0])

    def to_matrix(self, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
        return np.stack([np.asarray(r, dtype=dtype) for r in self.regions])


@dataclass
class RamenConfig:
    num_answers: int
    vocab_size: int
    visual_dim: int = 2048
    spatial_dim: int = 512
    question_dim: int = 1024
    projector_width: int = 1024
    aggregator_hidden: int = 1024
    pre_classifier_width: int = 2048
    embed_dim: int = 300
    ablation: str = "full"

    def __post_init__(self):
        for name in (
            "num_answers",
            "vocab_size",
            "visual_dim",
            "spatial_dim",
            "question_dim",
            "projector_width",
            "aggregator_hidden",
            "pre_classifier_width",
            "embed_dim",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"config field {name} must be a positive integer, got {v!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    @property
    def region_dim(self) -> int:
        return self.visual_dim + self.spatial_dim

    @property
    def fused_dim(self) -> int:
        """Width entering the input batchnorm and the projector."""
        if self.ablation == "no_early_fusion":
            return self.region_dim
        return self.region_dim + self.question_dim

    @property
    def aggregator_in(self) -> int:
        if self.ablation == "no_late_fusion":
            return self.projector_width
        return self.projector_width + self.question_dim

    @property
    def head_in(self) -> int:
        """Width of the aggregated scene embedding feeding the classifier head."""
        if self.ablation == "mean_pool":
            return self.projector_width + self.question_dim
        return 2 * self.aggregator_hidden

    def with_ablation(self, ablation: str) -> "RamenConfig":
        return replace(self, ablation=ablation)


class RamenModel:
    """Parameter container for one configuration; see `forward`."""

    def __init__(self, config: RamenConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE,
                 embedding_init: Optional[np.ndarray] = None):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        # Construction order is fixed: it defines both the RNG stream and the
        # parameter ordering used by the optimizer and checkpoints.
        self.embedding = nn.Embedding.create(rng, config.vocab_size, config.embed_dim, dtype)
        if embedding_init is not None:
            if embedding_init.shape != (config.vocab_size, config.embed_dim):
                raise ValueError(
                    f"embedding init shape {embedding_init.shape} != "
                    f"{(config.vocab_size, config.embed_dim)}"
                )
            self.embedding.weight.data[...] = embedding_init.astype(dtype)
        self.question_gru = nn.GruCell.create(rng, config.embed_dim, config.question_dim, dtype)
        self.input_bn = nn.BatchNorm(config.fused_dim, dtype=dtype)
        self.projector = nn.ResidualMlp.create(rng, config.fused_dim, config.projector_width, dtype)
        if config.ablation == "mean_pool":
            self.aggregator_fwd = None
            self.aggregator_bwd = None
        else:
            self.aggregator_fwd = nn.GruCell.create(
                rng, config.aggregator_in, config.aggregator_hidden, dtype
            )
            self.aggregator_bwd = nn.GruCell.create(
                rng, config.aggregator_in, config.aggregator_hidden, dtype
            )
        self.pre_classifier = nn.LinearLayer.create(
            rng, config.head_in, config.pre_classifier_width, dtype
        )
        self.classifier = nn.LinearLayer.create(
            rng, config.pre_classifier_width, config.num_answers, dtype
        )
        self._check_shapes()

    def _check_shapes(self):
        cfg = self.config
        assert self.projector.in_size == cfg.fused_dim
        assert self.projector.width == cfg.projector_width
        if self.aggregator_fwd is not None:
            assert self.aggregator_fwd.in_size == cfg.aggregator_in
            assert self.aggregator_fwd.hidden == cfg.aggregator_hidden
        assert self.pre_classifier.in_size == cfg.head_in
        assert self.classifier.out_size == cfg.num_answers

    def train(self):
        self.input_bn.mode = "train"
        return self

    def eval(self):
        self.input_bn.mode = "eval"
        return self

    @staticmethod
    def _gru_params(prefix, cell):
        return [
            (f"{prefix}.{name}", getattr(cell, name))
            for name in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")
        ]

    def parameters(self):
        """Ordered (name, tensor) pairs for every learnable parameter."""
        out = [("embedding.weight", self.embedding.weight)]
        out += self._gru_params("question_gru", self.question_gru)
        out += [("input_bn.gamma", self.input_bn.gamma), ("input_bn.beta", self.input_bn.beta)]
        for i, layer in enumerate(self.projector.layers, start=1):
            out += [(f"projector.l{i}.weight", layer.weight), (f"projector.l{i}.bias", layer.bias)]
        if self.aggregator_fwd is not None:
            out += self._gru_params("aggregator_fwd", self.aggregator_fwd)
            out += self._gru_params("aggregator_bwd", self.aggregator_bwd)
        out += [
            ("pre_classifier.weight", self.pre_classifier.weight),
            ("pre_classifier.bias", self.pre_classifier.bias),
            ("classifier.weight", self.classifier.weight),
            ("classifier.bias", self.classifier.bias),
        ]
        return out

    def buffers(self):
        """Non-learnable state saved alongside parameters."""
        return [
            ("input_bn.running_mean", self.input_bn.running_mean),
            ("input_bn.running_var", self.input_bn.running_var),
        ]

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()


def parameter_count(config: RamenConfig) -> int:
    """Number of learnable scalars, as a pure function of the configuration."""

    def gru(in_size, hidden):
        return 3 * (hidden * in_size + hidden * hidden + hidden)

    n = config.vocab_size * config.embed_dim
    n += gru(config.embed_dim, config.question_dim)
    n += 2 * config.fused_dim  # batchnorm affine
    w = config.projector_width
    n += config.fused_dim * w + w + 3 * (w * w + w)
    if config.ablation != "mean_pool":
        n += 2 * gru(config.aggregator_in, config.aggregator_hidden)
    n += config.head_in * config.pre_classifier_width + config.pre_classifier_width
    n += config.pre_classifier_width * config.num_answers + config.num_answers
    return n


# ---------------------------------------------------------------------------
# forward passes


def encode_questions_batch(model: RamenModel, token_rows: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Encode a padded batch of token-id rows into [batch, question_dim].

    Each question's final GRU state is taken at its true length: updates at
    pad positions are masked out, so the pad token never contaminates q.
    """
    token_rows = np.asarray(token_rows)
    lengths = np.asarray(lengths, dtype=np.intp)
    if token_rows.ndim != 2:
        raise ValueError(f"token_rows must be [batch, max_len], got {token_rows.shape}")
    batch, max_len = token_rows.shape
    if max_len == 0 or lengths.min() < 1:
        raise ValueError("every question must have at least one token")
    if lengths.max() > max_len:
        raise ValueError("length exceeds the padded width")
    xs = []
    masks = []
    for t in range(max_len):
        xs.append(nn.embedding_lookup(model.embedding, token_rows[:, t]))
        masks.append((t < lengths).astype(model.dtype))
    h = nn.gru_sequence(model.question_gru, xs, masks)
    return h


def encode_question(model: RamenModel, tokens) -> Tensor:
    """Encode one token-id list into a question vector of length question_dim."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty question")
    rows = np.asarray([tokens], dtype=np.intp)
    h = encode_questions_batch(model, rows, np.asarray([len(tokens)]))
    return T.reshape(h, (model.config.question_dim,))


def early_fuse(model: RamenModel, regions, q: Tensor) -> Tensor:
    """Concatenate the same question vector onto every region, then
    batch-normalize over the region rows (mode follows the model state)."""
    r = regions if isinstance(regions, Tensor) else Tensor(regions.to_matrix(model.dtype))
    n = r.shape[0]
    if q.data.ndim != 1:
        raise ValueError("early_fuse takes a single question vector; see forward_batch")
    q2 = T.reshape(q, (1, q.shape[0]))
    fused = T.concat([r, T.repeat_rows(q2, n)], axis=1)
    return nn.batchnorm_forward(model.input_bn, fused)


def forward_batch(
    model: RamenModel,
    region_feats: Tensor,
    n_regions: int,
    token_rows: np.ndarray,
    lengths: np.ndarray,
) -> Tensor:
    """Full pipeline on a batch: region_feats is [batch*n_regions, region_dim]
    with each scene's regions contiguous and in dataset order. Returns logits
    [batch, num_answers]. The configured ablation picks the variant."""
    cfg = model.config
    batch = token_rows.shape[0]
    if region_feats.shape != (batch * n_regions, cfg.region_dim):
        raise ValueError(
            f"region features {region_feats.shape} != {(batch * n_regions, cfg.region_dim)}"
        )
    q = encode_questions_batch(model, token_rows, lengths)

    if cfg.ablation == "no_early_fusion":
        fused = region_feats
    else:
        fused = T.concat([region_feats, T.repeat_rows(q, n_regions)], axis=1)
    c = nn.batchnorm_forward(model.input_bn, fused)
    b = nn.residual_mlp_forward(model.projector, c)

    if cfg.ablation == "no_late_fusion":
        s = b
    else:
        s = T.concat([b, T.repeat_rows(q, n_regions)], axis=1)

    if cfg.ablation == "mean_pool":
        agg = T.group_mean_rows(s, n_regions)
    else:
        base = np.arange(batch, dtype=np.intp) * n_regions
        xs = [T.gather_rows(s, base + t) for t in range(n_regions)]
        h_fwd = nn.gru_sequence(model.aggregator_fwd, xs)
        h_bwd = nn.gru_sequence(model.aggregator_bwd, list(reversed(xs)))
        agg = T.concat([h_fwd, h_bwd], axis=1)

    z = T.swish(nn.linear_forward(model.pre_classifier, agg))
    return nn.linear_forward(model.classifier, z)


def _single_instance_logits(model: RamenModel, regions, tokens) -> Tensor:
    r = regions if isinstance(regions, Tensor) else Tensor(regions.to_matrix(model.dtype))
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty question")
    rows = np.asarray([tokens], dtype=np.intp)
    logits = forward_batch(model, r, r.shape[0], rows, np.asarray([len(tokens)]))
    return T.reshape(logits, (model.config.num_answers,))


def forward(model: RamenModel, regions, tokens) -> Tensor:
    """Logits for one (region set, question) pair; routes on the ablation flag."""
    return _single_instance_logits(model, regions, tokens)


def forward_no_early_fusion(model: RamenModel, regions, tokens) -> Tensor:
    if model.config.ablation != "no_early_fusion":
        raise ValueError("model was not built with ablation='no_early_fusion'")
    return _single_instance_logits(model, regions, tokens)


def forward_no_late_fusion(model: RamenModel, regions, tokens) -> Tensor:
    if model.config.ablation != "no_late_fusion":
        raise ValueError("model was not built with ablation='no_late_fusion'")
    return _single_instance_logits(model, regions, tokens)


def forward_mean_pool(model: RamenModel, regions, tokens) -> Tensor:
    if model.config.ablation != "mean_pool":
        raise ValueError("model was not built with ablation='mean_pool'")
    return _single_instance_logits(model, regions, tokens)
