"""Anchor supervision: captions, retrieved pairs, and batch assembly.

Two kinds of anchors regularize finetuning: caption pairs attached to each
finetune sample, and image-text pairs retrieved from a fixed candidate pool
by embedding similarity. Retrieval is exact brute force over the pool; the
index is computed once from a checkpoint and never refreshed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoders import DualEncoderParams, encode_batch, param_fingerprint
from .numerics import as_float_array

__all__ = [
    "AnchorBatch",
    "CandidateIndex",
    "CandidatePair",
    "CaptionRecord",
    "CheckpointMismatchError",
    "MissingAssignmentError",
    "MissingCaptionError",
    "RETRIEVAL_MODES",
    "RetrievalAssignment",
    "Sample",
    "assemble_anchor_batch",
    "attach_captions",
    "build_candidate_index",
    "retrieve",
]

# First letter: query side (v = image tower, t = text tower on the class
# prompt). Second letter: which indexed embeddings are searched.
RETRIEVAL_MODES = ("v2t", "v2v", "t2t", "t2v")

ANCHOR_LAYOUTS = ("sep", "merge")


class MissingCaptionError(KeyError):
    """A sample had no caption available."""


class MissingAssignmentError(KeyError):
    """A batch sample had no precomputed retrieval assignment."""


class CheckpointMismatchError(ValueError):
    """Index and query parameters came from different checkpoints."""


@dataclass(frozen=True)
class Sample:
    """One labeled image-side data point."""

    id: int
    feature: np.ndarray
    class_id: int
    domain_id: int


@dataclass(frozen=True)
class CaptionRecord:
    """Caption feature attached to a sample."""

    sample_id: int
    caption_feature: np.ndarray


@dataclass(frozen=True)
class CandidatePair:
    """One (image, text) pair from the retrieval pool."""

    id: int
    image_feature: np.ndarray
    text_feature: np.ndarray


@dataclass
class CandidateIndex:
    """Precomputed pool embeddings; row i belongs to candidate_ids[i]."""

    candidate_ids: list[int]
    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    source_checkpoint_id: str

    def __post_init__(self):
        n = len(self.candidate_ids)
        if len(set(self.candidate_ids)) != n:
            raise ValueError("candidate ids must be unique")
        if self.image_embeddings.shape[0] != n or self.text_embeddings.shape[0] != n:
            raise ValueError("embedding row count must match candidate_ids")

    @property
    def size(self) -> int:
        return len(self.candidate_ids)


@dataclass(frozen=True)
class RetrievalAssignment:
    """query -> retrieved candidate, with the similarity that won."""

    query_sample_id: int
    candidate_id: int
    score: float
    mode: str


@dataclass
class AnchorBatch:
    """Anchor pairs for one training step, as (image_raw, text_raw) tuples.

    In the `sep` layout caption and retrieved pairs feed two separate loss
    terms; `merge` concatenates retrieved pairs onto caption_pairs and leaves
    retrieved_pairs empty. skip_ret records that fewer than two unique
    retrieved pairs were available (a 1-pair contrastive term is degenerate).
    """

    caption_pairs: list[tuple[np.ndarray, np.ndarray]]
    retrieved_pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    layout: str = "sep"
    skip_ret: bool = True


def attach_captions(
    samples: Sequence[Sample],
    provider: Callable[[Sample], np.ndarray],
) -> list[CaptionRecord]:
    """Fetch one caption feature per sample, in sample order.

    The provider must be a deterministic function of the sample; any failure
    (or a non-finite result) is surfaced as MissingCaptionError.
    """
    records = []
    for sample in samples:
        try:
            feature = as_float_array(provider(sample), name=f"caption for sample {sample.id}")
        except (MissingCaptionError, KeyError, ValueError) as exc:
            raise MissingCaptionError(f"no caption for sample {sample.id}") from exc
        records.append(CaptionRecord(sample_id=sample.id, caption_feature=feature))
    return records


def build_candidate_index(
    params: DualEncoderParams, candidates: Sequence[CandidatePair]
) -> CandidateIndex:
    """Embed every candidate pair once; row order follows the input order."""
    if not candidates:
        raise ValueError("candidate pool is empty")
    images = np.stack([c.image_feature for c in candidates])
    texts = np.stack([c.text_feature for c in candidates])
    image_emb, _ = encode_batch(params, "image", images)
    text_emb, _ = encode_batch(params, "text", texts)
    return CandidateIndex(
        candidate_ids=[c.id for c in candidates],
        image_embeddings=image_emb,
        text_embeddings=text_emb,
        source_checkpoint_id=param_fingerprint(params),
    )


def retrieve(
    index: CandidateIndex,
    queries: Sequence[tuple[int, np.ndarray]],
    params: DualEncoderParams,
    mode: str,
    k: int = 1,
) -> list[RetrievalAssignment]:
    """Exact top-k retrieval for (sample_id, raw query feature) pairs.

    Scores are inner products between the encoded query and the indexed side
    selected by `mode`. Per query the top k candidates come back in strictly
    descending score order; equal scores are broken toward the lower
    candidate id. Results are grouped by query, in query order.
    """
    if mode not in RETRIEVAL_MODES:
        raise ValueError(f"mode must be one of {RETRIEVAL_MODES}, got {mode!r}")
    if not 1 <= k <= index.size:
        raise ValueError(f"k must be in [1, {index.size}], got {k}")
    fingerprint = param_fingerprint(params)
    if fingerprint != index.source_checkpoint_id:
        raise CheckpointMismatchError(
            "query params do not match the checkpoint that built the index"
        )
    if not queries:
        return []

    modality = "image" if mode[0] == "v" else "text"
    side = index.text_embeddings if mode[-1] == "t" else index.image_embeddings
    raw = np.stack([feature for _, feature in queries])
    query_emb, _ = encode_batch(params, modality, raw)
    scores = query_emb @ side.T

    ids = np.asarray(index.candidate_ids, dtype=np.int64)
    assignments = []
    for (sample_id, _), row in zip(queries, scores):
        # lexsort: last key is primary, so order by descending score then id.
        order = np.lexsort((ids, -row))
        for rank in range(k):
            pos = order[rank]
            assignments.append(
                RetrievalAssignment(
                    query_sample_id=sample_id,
                    candidate_id=int(ids[pos]),
                    score=float(row[pos]),
                    mode=mode,
                )
            )
    return assignments


def assemble_anchor_batch(
    batch: Sequence[Sample],
    captions: Mapping[int, CaptionRecord],
    assignments: Mapping[int, Sequence[RetrievalAssignment]] | None,
    candidates: Mapping[int, CandidatePair],
    layout: str = "sep",
) -> AnchorBatch:
    """Collect anchor pairs for one batch of samples.

    Caption pairs keep batch order, one per sample. Retrieved pairs are the
    batch's assignments (each query's top-k, rank order preserved) deduped by
    candidate id, first occurrence wins; a duplicated pair would appear as
    its own false negative in the contrastive term. Pass assignments=None
    when retrieval anchors are disabled.
    """
    if layout not in ANCHOR_LAYOUTS:
        raise ValueError(f"layout must be one of {ANCHOR_LAYOUTS}, got {layout!r}")

    caption_pairs = []
    for sample in batch:
        record = captions.get(sample.id)
        if record is None:
            raise MissingCaptionError(f"no caption for sample {sample.id}")
        caption_pairs.append((sample.feature, record.caption_feature))

    retrieved_pairs: list[tuple[np.ndarray, np.ndarray]] = []
    seen: set[int] = set()
    if assignments is not None:
        for sample in batch:
            sample_assignments = assignments.get(sample.id)
            if not sample_assignments:
                raise MissingAssignmentError(f"no retrieval assignment for sample {sample.id}")
            for assignment in sample_assignments:
                if assignment.candidate_id in seen:
                    continue
                seen.add(assignment.candidate_id)
                pair = candidates.get(assignment.candidate_id)
                if pair is None:
                    raise MissingAssignmentError(
                        f"assignment references unknown candidate {assignment.candidate_id}"
                    )
                retrieved_pairs.append((pair.image_feature, pair.text_feature))

    skip_ret = len(retrieved_pairs) < 2
    if layout == "merge":
        return AnchorBatch(
            caption_pairs=caption_pairs + retrieved_pairs,
            retrieved_pairs=[],
            layout=layout,
            skip_ret=skip_ret,
        )
    return AnchorBatch(
        caption_pairs=caption_pairs,
        retrieved_pairs=retrieved_pairs,
        layout=layout,
        skip_ret=skip_ret,
    )
