"""Many-to-many contrastive loss over token and prompt embeddings.

Every attribute token in a batch is contrasted against every prompt
embedding: a (token, prompt) pair is positive when the token's image carries
that attribute and the token's group matches the prompt's group. The total
objective sums the visual-to-text and text-to-visual directions; both use
all columns/rows of the similarity matrix as the softmax denominator, so
cross-group prompts act as negatives. A one-to-one baseline pairs each image
with a single concatenated paragraph instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .catalog import AttributeCatalog, CatalogError, Prompt, render_prompt
from .tensor import NumericError, Tensor


@dataclass(frozen=True)
class PromptIndex:
    """Column order for the text side of a batch: one entry per distinct prompt."""

    prompts: tuple[Prompt, ...]

    def __post_init__(self):
        pairs = [(p.group, p.attribute) for p in self.prompts]
        assert len(set(pairs)) == len(pairs), "duplicate prompt column"

    def __len__(self) -> int:
        return len(self.prompts)

    def column(self, group: str, attribute: str) -> int:
        for j, p in enumerate(self.prompts):
            if p.group == group and p.attribute == attribute:
                return j
        raise CatalogError(f"prompt ({group!r}, {attribute!r}) not indexed")

    @classmethod
    def from_catalog(cls, catalog: AttributeCatalog, include_unseen: bool = False):
        prompts = catalog.seen_prompts()
        if include_unseen:
            prompts = prompts + catalog.unseen_prompts()
        return cls(tuple(prompts))


def normalize_columns(embeddings: Tensor) -> Tensor:
    """Scale each column of a (D, n) matrix to unit L2 norm."""
    norms_sq = T.sum_axis(T.mul(embeddings, embeddings), axis=0, keepdims=True)
    if np.any(norms_sq.data <= 0.0) or not np.all(np.isfinite(norms_sq.data)):
        raise NumericError("cannot normalize a zero-norm embedding")
    return T.div(embeddings, T.sqrt(norms_sq))


def similarity_matrix(tokens: Tensor, prompts: Tensor) -> Tensor:
    """Cosine similarities: (D, v) x (D, t) -> (v, t).

    Row order follows the batch token order, column order the prompt index.
    """
    if tokens.shape[0] != prompts.shape[0]:
        raise T.ShapeError(
            f"embedding dims disagree: {tokens.shape[0]} vs {prompts.shape[0]}"
        )
    return T.matmul(T.transpose(normalize_columns(tokens)), normalize_columns(prompts))


def positive_mask(
    annotations: list[dict[str, list[str]]],
    catalog: AttributeCatalog,
    index: PromptIndex,
) -> np.ndarray:
    """Boolean (v, t) positives for a batch of per-image annotations.

    Token order is image-major then catalog-group order (v = B * K). A token
    is positive to a prompt exactly when the groups coincide and the image's
    annotation for that group contains the prompt's attribute word.
    """
    k = catalog.num_groups
    v = len(annotations) * k
    mask = np.zeros((v, len(index)), dtype=bool)
    for b, labels in enumerate(annotations):
        for group, attrs in labels.items():
            gi = catalog.group_index(group)  # raises for unknown group
            for attr in attrs:
                mask[b * k + gi, index.column(group, attr)] = True
    return mask


def _directional_loss(sim: Tensor, positives: np.ndarray, tau: float) -> Tensor:
    """-sum_i sum_{j in pos(i)} log softmax_j(sim[i]/tau), rows without
    positives dropped from the outer sum."""
    scaled = T.scale(sim, 1.0 / tau)
    lse = T.logsumexp(scaled, axis=-1)  # (v,)
    pos = positives.astype(np.float64)
    pos_sum = T.sum_all(T.mul(scaled, Tensor(pos)))
    counts = Tensor(pos.sum(axis=1))
    return T.sub(T.sum_all(T.mul(lse, counts)), pos_sum)


def _check_pairing(sim: Tensor, positives: np.ndarray, tau: float) -> None:
    if sim.shape != positives.shape:
        raise T.ShapeError(f"similarity {sim.shape} vs positives {positives.shape}")
    if tau <= 0.0:
        raise ValueError("temperature must be positive")


def loss_v2t(sim: Tensor, positives: np.ndarray, tau: float = 1.0) -> Tensor:
    """Visual-to-text direction: softmax over all prompt columns per token."""
    _check_pairing(sim, positives, tau)
    if not positives.any():
        warnings.warn("no positive (token, prompt) pair in batch; v2t loss is 0")
        return T.scale(T.sum_all(sim), 0.0)
    return _directional_loss(sim, positives, tau)


def loss_t2v(sim: Tensor, positives: np.ndarray, tau: float = 1.0) -> Tensor:
    """Text-to-visual direction: softmax over all token rows per prompt."""
    _check_pairing(sim, positives, tau)
    if not positives.any():
        warnings.warn("no positive (token, prompt) pair in batch; t2v loss is 0")
        return T.scale(T.sum_all(sim), 0.0)
    return _directional_loss(T.transpose(sim), positives.T, tau)


def loss_total(sim: Tensor, positives: np.ndarray, tau: float = 1.0) -> Tensor:
    """Training objective: sum of both contrastive directions.

    All token rows participate, including region-masked tokens; rows or
    columns without any positive simply contribute nothing to the outer sums
    while still serving as negatives in the denominators.
    """
    return T.add(loss_v2t(sim, positives, tau), loss_t2v(sim, positives, tau))


# ---------------------------------------------------------------------------
# one-to-one baseline


def paragraph_for(labels: dict[str, list[str]], catalog: AttributeCatalog) -> str:
    """Concatenate all of an image's rendered attribute sentences, catalog order."""
    parts = []
    for g in catalog.groups:
        for attr in labels.get(g.key, ()):
            parts.append(render_prompt(g, attr).sentence)
    if not parts:
        raise CatalogError("image with no annotated group has no paragraph")
    return " ".join(parts)


def otoc_pairing(
    annotations: list[dict[str, list[str]]], catalog: AttributeCatalog
) -> tuple[list[str], np.ndarray]:
    """Distinct paragraph sentences plus the (B, P) positive matrix.

    Images with identical paragraphs share one text column (merged positives).
    """
    paragraphs: list[str] = []
    columns = []
    for labels in annotations:
        text = paragraph_for(labels, catalog)
        if text not in paragraphs:
            paragraphs.append(text)
        columns.append(paragraphs.index(text))
    positives = np.zeros((len(annotations), len(paragraphs)), dtype=bool)
    for i, j in enumerate(columns):
        positives[i, j] = True
    return paragraphs, positives


def mean_token_embedding(tokens: Tensor, batch: int) -> Tensor:
    """(D, B*K) token embeddings -> (D, B) per-image means over the K tokens."""
    d, v = tokens.shape
    k = v // batch
    grouped = T.reshape(T.transpose(tokens), (batch, k, d))
    return T.transpose(T.mean_axis(grouped, axis=1))


def otoc_loss(
    image_embeddings: Tensor,
    paragraph_embeddings: Tensor,
    positives: np.ndarray,
    tau: float = 1.0,
) -> Tensor:
    """Symmetric one-to-one InfoNCE between images and paragraph embeddings."""
    sim = similarity_matrix(image_embeddings, paragraph_embeddings)
    return loss_total(sim, positives, tau)
