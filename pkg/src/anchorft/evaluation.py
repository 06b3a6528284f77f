"""Zero-shot prompt classification, split metrics, and weight ensembling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .encoders import DualEncoderParams, EncoderParams, encode_batch
from .numerics import as_float_array

if TYPE_CHECKING:
    from .anchors import Sample
    from .benchgen import BenchmarkBundle
    from .training import Checkpoint

__all__ = [
    "EmptySplitError",
    "EnsembleCurve",
    "Metrics",
    "PromptTable",
    "SplitResult",
    "build_prompt_classifier",
    "classify",
    "ensemble_sweep",
    "ensemble_weights",
    "evaluate_splits",
]

EVAL_SPLITS = ("id", "ds", "zsl")


class EmptySplitError(ValueError):
    """A requested evaluation split has no samples."""


@dataclass
class PromptTable:
    """Class prompts: row i of prompt_features is the prompt for class_ids[i]."""

    class_ids: list[int]
    prompt_features: np.ndarray

    def __post_init__(self):
        self.prompt_features = as_float_array(self.prompt_features, name="prompt features")
        if len(self.class_ids) != self.prompt_features.shape[0]:
            raise ValueError("one prompt row per class id required")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be unique")
        self._row_of = {c: i for i, c in enumerate(self.class_ids)}

    def feature_for(self, class_id: int) -> np.ndarray:
        return self.prompt_features[self._row_of[class_id]]


@dataclass
class SplitResult:
    split_name: str
    n: int
    correct: int
    accuracy_percent: float


@dataclass
class Metrics:
    """Per-split accuracies plus the unweighted mean over non-ID splits."""

    splits: list[SplitResult]
    avg_ood: float | None

    def accuracy(self, split_name: str) -> float:
        for result in self.splits:
            if result.split_name == split_name:
                return result.accuracy_percent
        raise KeyError(split_name)

    @property
    def split_names(self) -> list[str]:
        return [r.split_name for r in self.splits]

    def to_dict(self) -> dict:
        return {
            "splits": [
                {
                    "split": r.split_name,
                    "n": r.n,
                    "correct": r.correct,
                    "accuracy_percent": r.accuracy_percent,
                }
                for r in self.splits
            ],
            "avg_ood": self.avg_ood,
        }


def build_prompt_classifier(params: DualEncoderParams, prompts: PromptTable) -> np.ndarray:
    """Encode each class prompt; row order follows prompts.class_ids."""
    classifier, _ = encode_batch(params, "text", prompts.prompt_features)
    return classifier


def classify(
    params: DualEncoderParams,
    images: Sequence["Sample"] | np.ndarray,
    classifier: np.ndarray,
    class_ids: Sequence[int],
) -> np.ndarray:
    """Predict a class id per image by maximum embedding similarity.

    Ties go to the lowest class id: columns are ordered by ascending id
    before the argmax, which picks the first maximum.
    """
    classifier = as_float_array(classifier, name="classifier")
    ids = np.asarray(class_ids, dtype=np.int64)
    if classifier.ndim != 2 or classifier.shape[0] != ids.size:
        raise ValueError("classifier must have one row per class id")
    if len(set(ids.tolist())) != ids.size:
        raise ValueError("class ids must be unique")
    if not isinstance(images, np.ndarray):
        images = np.stack([s.feature for s in images])
    embeddings, _ = encode_batch(params, "image", images)

    order = np.argsort(ids)
    sims = embeddings @ classifier[order].T
    return ids[order][np.argmax(sims, axis=1)]


def _accuracy(params, samples, prompts: PromptTable, split_name: str) -> SplitResult:
    classifier = build_prompt_classifier(params, prompts)
    predictions = classify(params, samples, classifier, prompts.class_ids)
    labels = np.asarray([s.class_id for s in samples], dtype=np.int64)
    correct = int(np.sum(predictions == labels))
    return SplitResult(
        split_name=split_name,
        n=len(samples),
        correct=correct,
        accuracy_percent=100.0 * correct / len(samples),
    )


def evaluate_splits(
    params: DualEncoderParams,
    bundle: "BenchmarkBundle",
    splits: Iterable[str] = EVAL_SPLITS,
    *,
    zsl_strict: bool = False,
) -> Metrics:
    """Accuracy on the requested splits of a benchmark bundle.

    `id` and the per-domain `ds` splits classify over the seen-class prompts;
    `zsl` classifies over the held-out-class prompts only, unless zsl_strict
    widens the label space to the union of both prompt tables.
    """
    requested = list(splits)
    unknown = [s for s in requested if s not in EVAL_SPLITS]
    if unknown:
        raise ValueError(f"unknown splits {unknown}; choose from {EVAL_SPLITS}")

    results: list[SplitResult] = []
    for split in EVAL_SPLITS:  # fixed output order regardless of request order
        if split not in requested:
            continue
        if split == "id":
            if not bundle.id_test:
                raise EmptySplitError("id split is empty")
            results.append(_accuracy(params, bundle.id_test, bundle.prompts_id, "id"))
        elif split == "ds":
            if not bundle.ds_tests:
                raise EmptySplitError("no domain-shift splits in this bundle")
            for domain in sorted(bundle.ds_tests):
                samples = bundle.ds_tests[domain]
                if not samples:
                    raise EmptySplitError(f"ds split for domain {domain} is empty")
                results.append(_accuracy(params, samples, bundle.prompts_id, f"ds{domain}"))
        else:
            if not bundle.zsl_test:
                raise EmptySplitError("zsl split is empty")
            prompts = bundle.prompts_zsl
            if zsl_strict:
                prompts = PromptTable(
                    class_ids=bundle.prompts_id.class_ids + bundle.prompts_zsl.class_ids,
                    prompt_features=np.vstack(
                        [bundle.prompts_id.prompt_features, bundle.prompts_zsl.prompt_features]
                    ),
                )
            results.append(_accuracy(params, bundle.zsl_test, prompts, "zsl"))

    ood = [r.accuracy_percent for r in results if r.split_name != "id"]
    return Metrics(splits=results, avg_ood=float(np.mean(ood)) if ood else None)


def ensemble_weights(
    pre: "Checkpoint", ft: "Checkpoint", alpha: float
) -> DualEncoderParams:
    """Elementwise (1 - alpha) * pretrained + alpha * finetuned, log_tau included.

    The endpoints return exact copies so alpha = 0 and alpha = 1 reproduce
    the inputs bit for bit.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    p, q = pre.params, ft.params
    for tower_name in ("image", "text"):
        a, b = getattr(p, tower_name), getattr(q, tower_name)
        for (_, arr_a), (_, arr_b) in zip(a.leaves(), b.leaves()):
            if arr_a.shape != arr_b.shape:
                raise ValueError("checkpoints have incongruent parameter shapes")
    if alpha == 0.0:
        return p.copy()
    if alpha == 1.0:
        return q.copy()

    def blend_tower(a: EncoderParams, b: EncoderParams) -> EncoderParams:
        return EncoderParams(
            (1.0 - alpha) * a.w1 + alpha * b.w1,
            (1.0 - alpha) * a.b1 + alpha * b.b1,
            (1.0 - alpha) * a.w2 + alpha * b.w2,
            (1.0 - alpha) * a.b2 + alpha * b.b2,
        )

    return DualEncoderParams(
        blend_tower(p.image, q.image),
        blend_tower(p.text, q.text),
        (1.0 - alpha) * p.log_tau + alpha * q.log_tau,
    )


@dataclass
class EnsembleCurve:
    """Metrics along the interpolation path plus the ID-selected mixing weight."""

    rows: list[tuple[float, Metrics]]
    best_id_alpha: float

    @property
    def alphas(self) -> list[float]:
        return [alpha for alpha, _ in self.rows]


def ensemble_sweep(
    pre: "Checkpoint",
    ft: "Checkpoint",
    alphas: Sequence[float],
    bundle: "BenchmarkBundle",
    splits: Iterable[str] = EVAL_SPLITS,
) -> EnsembleCurve:
    """Evaluate every interpolated model; pick the best alpha by ID accuracy.

    Alphas must be strictly increasing within [0, 1]. Ties on ID accuracy go
    to the smaller alpha.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("need at least one alpha")
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be strictly increasing")
    requested = list(splits)
    if "id" not in requested:
        raise ValueError("the sweep selects by ID accuracy; include the id split")

    rows = []
    for alpha in alphas:
        params = ensemble_weights(pre, ft, alpha)
        rows.append((alpha, evaluate_splits(params, bundle, requested)))

    best_id_alpha = max(rows, key=lambda row: (row[1].accuracy("id"), -row[0]))[0]
    return EnsembleCurve(rows=rows, best_id_alpha=best_id_alpha)
