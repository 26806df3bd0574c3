"""Training objectives: prototype cross-entropy, contrastive prototype
alignment across adjacent models, and soft-output distillation.

All losses are built from diffcore primitives so one backward pass covers
the whole objective. The alignment term treats current and previous
prototype rows of the assigned class as positives and same-batch features
of other classes as negatives; on the source stage (no previous model) it
collapses to the current-prototypes-only form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nets
from .diffcore import Tensor

DISTILL_MODES = ("logits", "representation")


@dataclass
class LossBreakdown:
    ce: float
    pca: float
    dis: float
    total: float


@dataclass
class BatchContext:
    features: Tensor  # [n, d], tape-attached
    labels: np.ndarray  # [n] int, true on source / pseudo on target
    prototypes: Tensor  # current classifier weight [classes, d]
    prev_prototypes: np.ndarray | None = None  # frozen [classes, d]
    prev_probs: np.ndarray | None = None  # frozen softmax outputs [n, classes]
    prev_features: np.ndarray | None = None  # frozen representations [n, d]
    distill_on: str = "logits"

    def __post_init__(self):
        if self.distill_on not in DISTILL_MODES:
            raise ValueError(
                f"objective: distill_on must be one of {DISTILL_MODES}, got {self.distill_on!r}")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError(
                f"objective: {n} feature rows but labels shape {self.labels.shape}")
        classes = self.prototypes.shape[0]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= classes):
            raise ValueError(f"objective: labels outside [0, {classes})")


def build_context(net, prev_net, x: np.ndarray, labels: np.ndarray,
                  distill_on: str = "logits") -> BatchContext:
    """Forward the batch and collect everything the losses need.

    Call under an active tape when training; the frozen model's outputs are
    plain arrays and never record.
    """
    feats = nets.features(net, x)
    prev_protos = prev_probs = prev_feats = None
    if prev_net is not None:
        prev_protos = prev_net.classifier.weight.values
        prev_probs = nets.predict_probs(prev_net, x)
        if distill_on == "representation":
            prev_feats = nets.feature_values(prev_net, x)
    return BatchContext(features=feats, labels=labels,
                        prototypes=net.classifier.weight,
                        prev_prototypes=prev_protos, prev_probs=prev_probs,
                        prev_features=prev_feats, distill_on=distill_on)


def _onehot(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes)[labels]


def ce_loss(ctx: BatchContext) -> Tensor:
    """Mean negative log softmax score of the assigned class (bias-free logits)."""
    scores = dc.matmul(ctx.features, dc.transpose(ctx.prototypes))
    probs = dc.softmax_rows(scores)
    onehot = Tensor(_onehot(ctx.labels, ctx.prototypes.shape[0]))
    picked = dc.reduce_sum(dc.mul(probs, onehot), axis=1)
    return dc.scale(dc.reduce_mean(dc.log(picked)), -1.0)


def _negative_pair_mask(labels: np.ndarray) -> np.ndarray:
    diff = labels[:, None] != labels[None, :]
    np.fill_diagonal(diff, False)
    return diff.astype(np.float64)


def _pair_term(ctx: BatchContext) -> Tensor:
    """Row sums of exp feature-feature scores over cross-class pairs."""
    gram = dc.matmul(ctx.features, dc.transpose(ctx.features))
    masked = dc.mul(dc.exp(gram), Tensor(_negative_pair_mask(ctx.labels)))
    return dc.reduce_sum(masked, axis=1)


def pca_loss(ctx: BatchContext) -> Tensor:
    """Alignment to current and previous prototypes of the assigned class."""
    if ctx.prev_prototypes is None:
        raise ValueError("objective: pca_loss needs previous prototypes; "
                         "use source_pca_loss on the source stage")
    onehot = Tensor(_onehot(ctx.labels, ctx.prototypes.shape[0]))
    e_cur = dc.exp(dc.matmul(ctx.features, dc.transpose(ctx.prototypes)))
    e_prev = dc.exp(dc.matmul(ctx.features, Tensor(ctx.prev_prototypes.T)))
    numerator = dc.add(dc.reduce_sum(dc.mul(e_cur, onehot), axis=1),
                       dc.reduce_sum(dc.mul(e_prev, onehot), axis=1))
    denominator = dc.add(dc.add(dc.reduce_sum(e_cur, axis=1),
                                dc.reduce_sum(e_prev, axis=1)),
                         _pair_term(ctx))
    return dc.reduce_mean(dc.sub(dc.log(denominator), dc.log(numerator)))


def source_pca_loss(ctx: BatchContext) -> Tensor:
    """Alignment with only the current prototypes (no previous model yet)."""
    onehot = Tensor(_onehot(ctx.labels, ctx.prototypes.shape[0]))
    e_cur = dc.exp(dc.matmul(ctx.features, dc.transpose(ctx.prototypes)))
    numerator = dc.reduce_sum(dc.mul(e_cur, onehot), axis=1)
    denominator = dc.add(dc.reduce_sum(e_cur, axis=1), _pair_term(ctx))
    return dc.reduce_mean(dc.sub(dc.log(denominator), dc.log(numerator)))


def distill_loss(ctx: BatchContext) -> Tensor:
    """Mean KL from the frozen model's soft outputs to the current ones."""
    if ctx.distill_on == "logits":
        if ctx.prev_probs is None:
            raise ValueError("objective: distill_loss needs previous-model outputs")
        target = ctx.prev_probs
        current = dc.softmax_rows(dc.matmul(ctx.features, dc.transpose(ctx.prototypes)))
    else:
        if ctx.prev_features is None:
            raise ValueError("objective: distill_loss needs previous-model representations")
        target = _np_softmax(ctx.prev_features)
        current = dc.softmax_rows(ctx.features)
    entropy = (target * np.log(np.maximum(target, dc.LOG_CLAMP))).sum(axis=1)
    cross = dc.reduce_sum(dc.mul(Tensor(target), dc.log(current)), axis=1)
    kl = dc.reduce_mean(dc.sub(Tensor(entropy), cross))
    # exact KL is non-negative; relu only strips float artifacts near zero
    return dc.relu(kl)


def _np_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def total_loss(ctx: BatchContext, stage_kind: str, *,
               disable_pca: bool = False,
               force_source_pca: bool = False,
               disable_distill: bool = False) -> tuple[Tensor, LossBreakdown]:
    """Stage loss and its logged decomposition (total = ce + pca + dis)."""
    if stage_kind not in ("source", "target"):
        raise ValueError(f"objective: unknown stage kind {stage_kind!r}")
    ce = ce_loss(ctx)
    total = ce

    pca_val = 0.0
    if not disable_pca:
        use_source_form = (stage_kind == "source" or force_source_pca
                           or ctx.prev_prototypes is None)
        pca = source_pca_loss(ctx) if use_source_form else pca_loss(ctx)
        total = dc.add(total, pca)
        pca_val = pca.item()

    dis_val = 0.0
    if stage_kind == "target" and not disable_distill:
        dis = distill_loss(ctx)
        total = dc.add(total, dis)
        dis_val = dis.item()

    return total, LossBreakdown(ce=ce.item(), pca=pca_val, dis=dis_val,
                                total=total.item())
