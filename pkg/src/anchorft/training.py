"""Training loops: contrastive pretraining and anchored finetuning.

The finetuning objective is a weighted sum of three pair-loss terms: the
class-prompt term, the caption-anchor term, and the retrieved-anchor term.
Retrieval assignments are computed once from the starting checkpoint and
stay fixed for the whole run. Optimization is decoupled-weight-decay Adam;
the temperature is only updated when tau_trainable is set.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .anchors import (
    AnchorBatch,
    CandidateIndex,
    CandidatePair,
    CaptionRecord,
    Sample,
    assemble_anchor_batch,
    retrieve,
)
from .contrastive import PairBatch, contrastive_loss_and_grads
from .encoders import (
    DualEncoderParams,
    EncoderParams,
    ParamGrads,
    encode_batch,
    encoder_backward_batch,
    init_params,
    param_fingerprint,
    zero_grads,
)
from .numerics import derive_seed, gaussian_stream

if TYPE_CHECKING:
    from .evaluation import PromptTable

__all__ = [
    "Checkpoint",
    "EmptyFinetuneSetError",
    "LOSS_TERMS",
    "LossBreakdown",
    "OptimizerState",
    "TrainConfig",
    "adamw_update",
    "checkpoint_id",
    "compute_total_loss_and_grads",
    "config_fingerprint",
    "init_optimizer_state",
    "make_checkpoint",
    "pretrain",
    "run_finetune",
]

LOSS_TERMS = ("cl", "cap", "ret")

_TAG_PRETRAIN_EPOCH = 31
_TAG_FINETUNE_EPOCH = 32

# Adam moment decays and the denominator floor; bias correction is applied.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class EmptyFinetuneSetError(ValueError):
    """Finetuning was started with no samples."""


@dataclass
class TrainConfig:
    """Optimizer, loss mix, and architecture settings for one run.

    Desk-scale defaults; paper_defaults() switches the optimizer settings to
    the large-scale recipe (batch 512, lr 1e-5), which is mainly useful to
    document what the full-size runs would use.
    """

    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    lambda_cl: float = 1.0
    lambda_cap: float = 1.0
    lambda_ret: float = 1.0
    enabled_losses: tuple[str, ...] = LOSS_TERMS
    anchor_layout: str = "sep"
    retrieval_mode: str = "v2t"
    retrieval_k: int = 1
    tau_trainable: bool = False
    hidden: int = 64
    embed_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        self.enabled_losses = tuple(self.enabled_losses)

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if min(self.lambda_cl, self.lambda_cap, self.lambda_ret) < 0:
            raise ValueError("loss weights must be non-negative")
        unknown = [t for t in self.enabled_losses if t not in LOSS_TERMS]
        if unknown or len(set(self.enabled_losses)) != len(self.enabled_losses):
            raise ValueError(f"enabled_losses must be distinct terms from {LOSS_TERMS}")
        if self.anchor_layout not in ("sep", "merge"):
            raise ValueError("anchor_layout must be 'sep' or 'merge'")
        if self.anchor_layout == "merge" and "ret" in self.enabled_losses and (
            "cap" not in self.enabled_losses
        ):
            raise ValueError("merge layout folds retrieved pairs into the caption term")
        from .anchors import RETRIEVAL_MODES

        if self.retrieval_mode not in RETRIEVAL_MODES:
            raise ValueError(f"retrieval_mode must be one of {RETRIEVAL_MODES}")
        if self.retrieval_k < 1:
            raise ValueError("retrieval_k must be at least 1")
        if self.hidden < 1 or self.embed_dim < 2:
            raise ValueError("hidden must be positive and embed_dim at least 2")

    def paper_defaults(self) -> "TrainConfig":
        """The large-scale optimizer recipe, keeping everything else."""
        return replace(self, batch_size=512, epochs=10, learning_rate=1e-5, weight_decay=0.1)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out


def config_fingerprint(config: TrainConfig) -> str:
    """Hash of the canonical config JSON; ties checkpoints to their recipe."""
    payload = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


@dataclass
class Checkpoint:
    """Trained parameters plus provenance and a verifiable content id."""

    params: DualEncoderParams
    config_fingerprint: str
    provenance: str  # "pretrained" or "finetuned"
    id: str


def checkpoint_id(params: DualEncoderParams, config_fp: str, provenance: str) -> str:
    """Content hash over the parameter bytes, config fingerprint, and provenance."""
    digest = hashlib.sha256()
    digest.update(param_fingerprint(params).encode())
    digest.update(config_fp.encode())
    digest.update(provenance.encode())
    return digest.hexdigest()


def make_checkpoint(
    params: DualEncoderParams, config: TrainConfig, provenance: str
) -> Checkpoint:
    fp = config_fingerprint(config)
    return Checkpoint(
        params=params,
        config_fingerprint=fp,
        provenance=provenance,
        id=checkpoint_id(params, fp, provenance),
    )


@dataclass
class LossBreakdown:
    """Per-term unweighted losses; total applies the lambda weights."""

    l_cl: float
    l_cap: float
    l_ret: float
    total: float
    skip_ret: bool


@dataclass
class OptimizerState:
    """Adam first/second moments (same layout as the grads) and step count."""

    m: ParamGrads
    v: ParamGrads
    step: int = 0


def init_optimizer_state(params: DualEncoderParams) -> OptimizerState:
    return OptimizerState(m=zero_grads(params), v=zero_grads(params), step=0)


def _pair_term(
    params: DualEncoderParams,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    grads: ParamGrads,
    weight: float,
    tau_trainable: bool,
) -> float:
    """One contrastive term over raw (image, text) pairs.

    Returns the unweighted loss; gradient work is skipped entirely when the
    weight is zero so that zero-weight runs match disabled-term runs bit for
    bit.
    """
    images = np.stack([img for img, _ in pairs])
    texts = np.stack([txt for _, txt in pairs])
    f, cache_f = encode_batch(params, "image", images)
    g, cache_g = encode_batch(params, "text", texts)
    loss, df, dg, dlog_tau = contrastive_loss_and_grads(PairBatch(f, g), params.tau)
    if weight != 0.0:
        grads.add_tower(
            "image", encoder_backward_batch(params, "image", cache_f, df), weight
        )
        grads.add_tower(
            "text", encoder_backward_batch(params, "text", cache_g, dg), weight
        )
        if tau_trainable:
            grads.log_tau += weight * dlog_tau
    return loss.total


def compute_total_loss_and_grads(
    params: DualEncoderParams,
    batch: Sequence[Sample],
    prompt_table: "PromptTable",
    anchor_batch: AnchorBatch,
    config: TrainConfig,
) -> tuple[LossBreakdown, ParamGrads]:
    """Weighted sum of the enabled pair-loss terms, with gradients.

    Accumulation order is fixed (cl, then cap, then ret) so runs are
    bit-reproducible. Disabled terms and a skipped retrieval term are
    exactly 0. Class prompts go through the text tower, so the prompt
    embeddings receive text-tower gradients like any caption would.
    """
    grads = zero_grads(params)
    enabled = set(config.enabled_losses)
    l_cl = l_cap = l_ret = 0.0

    if "cl" in enabled and batch:
        prompt_pairs = [
            (sample.feature, prompt_table.feature_for(sample.class_id)) for sample in batch
        ]
        l_cl = _pair_term(params, prompt_pairs, grads, config.lambda_cl, config.tau_trainable)

    if "cap" in enabled and anchor_batch.caption_pairs:
        if anchor_batch.layout == "sep" and len(anchor_batch.caption_pairs) != len(batch):
            raise ValueError("caption pairs must cover the batch exactly in the sep layout")
        l_cap = _pair_term(
            params, anchor_batch.caption_pairs, grads, config.lambda_cap, config.tau_trainable
        )

    if (
        "ret" in enabled
        and anchor_batch.layout == "sep"
        and not anchor_batch.skip_ret
        and anchor_batch.retrieved_pairs
    ):
        l_ret = _pair_term(
            params, anchor_batch.retrieved_pairs, grads, config.lambda_ret, config.tau_trainable
        )

    total = config.lambda_cl * l_cl + config.lambda_cap * l_cap + config.lambda_ret * l_ret
    breakdown = LossBreakdown(
        l_cl=l_cl, l_cap=l_cap, l_ret=l_ret, total=total, skip_ret=anchor_batch.skip_ret
    )
    return breakdown, grads


def adamw_update(
    params: DualEncoderParams,
    grads: ParamGrads,
    state: OptimizerState,
    lr: float,
    wd: float,
    *,
    tau_trainable: bool = False,
) -> tuple[DualEncoderParams, OptimizerState]:
    """One decoupled-weight-decay Adam step with bias correction.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    log_tau is left untouched (moments included) unless tau_trainable.
    """
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t

    def update_leaf(theta: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray):
        m_new = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v_new = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        step_dir = (m_new / bc1) / (np.sqrt(v_new / bc2) + ADAM_EPS)
        theta_new = theta - lr * (step_dir + wd * theta)
        return theta_new, m_new, v_new

    new_towers = {}
    new_m = {}
    new_v = {}
    for tower_name in ("image", "text"):
        theta_t = getattr(params, tower_name)
        g_t = getattr(grads, tower_name)
        m_t = getattr(state.m, tower_name)
        v_t = getattr(state.v, tower_name)
        updated = [
            update_leaf(theta, g, m, v)
            for (_, theta), (_, g), (_, m), (_, v) in zip(
                theta_t.leaves(), g_t.leaves(), m_t.leaves(), v_t.leaves()
            )
        ]
        new_towers[tower_name] = EncoderParams(*(u[0] for u in updated))
        new_m[tower_name] = EncoderParams(*(u[1] for u in updated))
        new_v[tower_name] = EncoderParams(*(u[2] for u in updated))

    if tau_trainable:
        m_tau = ADAM_BETA1 * state.m.log_tau + (1.0 - ADAM_BETA1) * grads.log_tau
        v_tau = ADAM_BETA2 * state.v.log_tau + (1.0 - ADAM_BETA2) * grads.log_tau**2
        step_dir = (m_tau / bc1) / (math.sqrt(v_tau / bc2) + ADAM_EPS)
        log_tau = params.log_tau - lr * (step_dir + wd * params.log_tau)
    else:
        m_tau, v_tau, log_tau = state.m.log_tau, state.v.log_tau, params.log_tau

    new_params = DualEncoderParams(new_towers["image"], new_towers["text"], log_tau)
    new_state = OptimizerState(
        m=ParamGrads(new_m["image"], new_m["text"], m_tau),
        v=ParamGrads(new_v["image"], new_v["text"], v_tau),
        step=t,
    )
    return new_params, new_state


def _epoch_batches(
    n: int, batch_size: int, seed: int, epoch: int, tag: int
) -> list[list[int]]:
    """Seeded shuffle split into batches; a trailing batch of 1 is dropped."""
    perm = gaussian_stream(derive_seed(seed, tag, epoch)).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def pretrain(
    pool: Sequence[CandidatePair], config: TrainConfig
) -> tuple[Checkpoint, list[dict]]:
    """Contrastive pretraining over an (image, text) pair pool.

    Freshly initialized towers are trained with the pair loss alone. Returns
    the checkpoint and a per-step log (same record shape as finetuning, with
    the anchor terms zero).
    """
    config.validate()
    if len(pool) < config.batch_size:
        raise ValueError(
            f"pool of {len(pool)} pairs is smaller than one batch of {config.batch_size}"
        )
    img_dim = pool[0].image_feature.shape[0]
    txt_dim = pool[0].text_feature.shape[0]
    params = init_params(config.seed, (img_dim, txt_dim), config.hidden, config.embed_dim)
    state = init_optimizer_state(params)

    log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        for batch_idx in _epoch_batches(
            len(pool), config.batch_size, config.seed, epoch, _TAG_PRETRAIN_EPOCH
        ):
            pairs = [(pool[i].image_feature, pool[i].text_feature) for i in batch_idx]
            grads = zero_grads(params)
            loss = _pair_term(params, pairs, grads, 1.0, config.tau_trainable)
            params, state = adamw_update(
                params,
                grads,
                state,
                config.learning_rate,
                config.weight_decay,
                tau_trainable=config.tau_trainable,
            )
            log.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "l_cl": loss,
                    "l_cap": 0.0,
                    "l_ret": 0.0,
                    "total": loss,
                    "skip_ret": True,
                }
            )
            step += 1
    return make_checkpoint(params, config, "pretrained"), log


def run_finetune(
    finetune_set: Sequence[Sample],
    prompt_table: "PromptTable",
    captions: Sequence[CaptionRecord],
    candidate_index: CandidateIndex | None,
    candidates: Sequence[CandidatePair] | None,
    start: Checkpoint,
    config: TrainConfig,
) -> tuple[Checkpoint, list[dict]]:
    """Anchored finetuning from a pretrained checkpoint.

    Retrieval assignments are computed here, once, with the starting
    parameters, then reused for every epoch. The log gets one record per
    step: {step, epoch, l_cl, l_cap, l_ret, total, skip_ret}.
    """
    config.validate()
    if not finetune_set:
        raise EmptyFinetuneSetError("finetune set is empty")
    if start.provenance != "pretrained":
        raise ValueError(f"finetuning must start from a pretrained checkpoint, got "
                         f"{start.provenance!r}")

    caption_map = {record.sample_id: record for record in captions}

    assignments: Mapping[int, list] | None = None
    candidate_map: dict[int, CandidatePair] = {}
    if "ret" in config.enabled_losses:
        if candidate_index is None or not candidates:
            raise ValueError("retrieval anchors need a candidate index and the pool")
        candidate_map = {c.id: c for c in candidates}
        queries = []
        for sample in finetune_set:
            if config.retrieval_mode[0] == "v":
                query_feature = sample.feature
            else:
                query_feature = prompt_table.feature_for(sample.class_id)
            queries.append((sample.id, query_feature))
        flat = retrieve(
            candidate_index, queries, start.params, config.retrieval_mode, config.retrieval_k
        )
        grouped: dict[int, list] = {}
        for assignment in flat:
            grouped.setdefault(assignment.query_sample_id, []).append(assignment)
        assignments = grouped

    params = start.params.copy()
    state = init_optimizer_state(params)
    log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        for batch_idx in _epoch_batches(
            len(finetune_set), config.batch_size, config.seed, epoch, _TAG_FINETUNE_EPOCH
        ):
            batch = [finetune_set[i] for i in batch_idx]
            anchor_batch = assemble_anchor_batch(
                batch, caption_map, assignments, candidate_map, config.anchor_layout
            )
            breakdown, grads = compute_total_loss_and_grads(
                params, batch, prompt_table, anchor_batch, config
            )
            params, state = adamw_update(
                params,
                grads,
                state,
                config.learning_rate,
                config.weight_decay,
                tau_trainable=config.tau_trainable,
            )
            log.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "l_cl": breakdown.l_cl,
                    "l_cap": breakdown.l_cap,
                    "l_ret": breakdown.l_ret,
                    "total": breakdown.total,
                    "skip_ret": breakdown.skip_ret,
                }
            )
            step += 1
    return make_checkpoint(params, config, "finetuned"), log
