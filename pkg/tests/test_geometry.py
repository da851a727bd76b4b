"""Cosine similarity, margins and the contrastive-loss forms."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import pytest
import torch
import torch.nn.functional as F

from noboxlab.exceptions import DomainError, PreconditionError, ShapeError
from noboxlab.geometry import (
    class_margin_audit,
    clip_contrastive_loss,
    cosine_similarity,
    export_embeddings,
    margin_delta,
    margin_delta_distance,
)
from noboxlab.models import ClassAnchorSet, ContrastiveConfig, EmbeddingBatch, LabelVector


def _unit(*values: float) -> torch.Tensor:
    return F.normalize(torch.tensor(values, dtype=torch.float64), dim=0)


def test_cosine_similarity_examples() -> None:
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [-1, 0]) == -1.0
    assert cosine_similarity([3, 4], [6, 8]) == pytest.approx(1.0, abs=1e-12)


def test_cosine_similarity_rejects_zero_and_mismatched() -> None:
    with pytest.raises(DomainError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ShapeError):
        cosine_similarity([1, 0, 0], [1, 0])


def test_margin_delta_example() -> None:
    assert margin_delta([1, 0], [1, 0], [0, 1]) == pytest.approx(1.0)
    assert margin_delta_distance([1, 0], [1, 0], [0, 1]) == pytest.approx(1.0)


def test_margin_delta_needs_unit_vectors() -> None:
    with pytest.raises(PreconditionError):
        margin_delta([2, 0], [1, 0], [0, 1])


def test_margin_forms_agree_on_random_unit_triples() -> None:
    gen = torch.Generator().manual_seed(0)
    for _ in range(1000):
        f, pos, neg = F.normalize(torch.randn(3, 16, generator=gen, dtype=torch.float64), dim=1)

        assert margin_delta(f, pos, neg) == pytest.approx(
            margin_delta_distance(f, pos, neg), abs=1e-9
        )


@pytest.mark.parametrize("batch", [1, 2, 7, 32])
def test_contrastive_forms_agree(batch: int) -> None:
    gen = torch.Generator().manual_seed(batch)
    img = EmbeddingBatch.normalized(torch.randn(batch, 12, generator=gen, dtype=torch.float64))
    txt = EmbeddingBatch.normalized(torch.randn(batch, 12, generator=gen, dtype=torch.float64))
    cfg = ContrastiveConfig(tau=0.07)

    softmax = float(clip_contrastive_loss(img, txt, cfg, "softmax"))
    relative = float(clip_contrastive_loss(img, txt, cfg, "relative"))
    distance = float(clip_contrastive_loss(img, txt, cfg, "distance"))

    assert relative == pytest.approx(softmax, rel=1e-5, abs=1e-12)
    assert distance == pytest.approx(softmax, rel=1e-5, abs=1e-12)


def test_contrastive_single_pair_is_zero() -> None:
    img = EmbeddingBatch.normalized(torch.tensor([[1.0, 2.0]], dtype=torch.float64))
    txt = EmbeddingBatch.normalized(torch.tensor([[-3.0, 1.0]], dtype=torch.float64))

    assert float(clip_contrastive_loss(img, txt)) == pytest.approx(0.0, abs=1e-12)


def test_contrastive_rejects_bad_batches() -> None:
    a = EmbeddingBatch.normalized(torch.randn(3, 4))
    with pytest.raises(ShapeError):
        clip_contrastive_loss(a, EmbeddingBatch.normalized(torch.randn(2, 4)))
    with pytest.raises(ShapeError):
        clip_contrastive_loss(a, EmbeddingBatch.normalized(torch.randn(3, 5)))
    with pytest.raises(PreconditionError):
        clip_contrastive_loss(a, EmbeddingBatch(torch.randn(3, 4) * 3), form="distance")
    with pytest.raises(DomainError):
        ContrastiveConfig(tau=0.0)


def test_class_margin_audit() -> None:
    anchors = ClassAnchorSet(torch.eye(3, dtype=torch.float64), provider="explicit")
    embs = EmbeddingBatch(
        torch.stack([_unit(1, 0, 0), _unit(1, 1, 0), _unit(0, 0, 1)]), unit_norm=True
    )
    labels = LabelVector(torch.tensor([0, 0, 2]))

    audit = class_margin_audit(embs, labels, anchors)

    assert audit.per_class[0].n_samples == 2
    assert audit.per_class[0].min_margin == pytest.approx(0.0, abs=1e-12)
    assert audit.per_class[1].present is False
    assert audit.per_class[2].min_margin == pytest.approx(1.0)
    assert audit.min_margin == pytest.approx(0.0, abs=1e-12)
    assert audit.to_dict()["provider"] == "explicit"


def test_class_margin_audit_needs_two_classes() -> None:
    anchors = ClassAnchorSet(torch.ones(1, 2) / math.sqrt(2), provider="explicit")
    embs = EmbeddingBatch.normalized(torch.ones(1, 2))

    with pytest.raises(DomainError):
        class_margin_audit(embs, LabelVector(torch.tensor([0])), anchors)


def test_export_embeddings(tmp_path: Path) -> None:
    embs = EmbeddingBatch.normalized(torch.tensor([[1.0, 0.0], [0.0, 2.0]]))
    labels = LabelVector(torch.tensor([1, 0]))

    path = export_embeddings(embs, labels, ["a", "b"], tmp_path / "e.csv")

    with path.open(newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["id", "label", "e_0", "e_1"]
    assert rows[1] == ["a", "1", "1", "0"]
    assert rows[2] == ["b", "0", "0", "1"]


def test_identical_pairs_give_twice_log_n() -> None:
    rows = EmbeddingBatch.normalized(torch.ones(4, 3, dtype=torch.float64))

    for form in ("softmax", "relative", "distance"):
        loss = clip_contrastive_loss(rows, rows, ContrastiveConfig(tau=1.0), form)
        assert float(loss) == pytest.approx(2 * math.log(4), abs=1e-12), form


@pytest.mark.parametrize("tau", [0.07, 1.0])
def test_contrastive_forms_agree_over_many_batches(tau: float) -> None:
    gen = torch.Generator().manual_seed(11)
    cfg = ContrastiveConfig(tau=tau)
    for _ in range(100):
        n = int(torch.randint(1, 17, (1,), generator=gen))
        img = EmbeddingBatch.normalized(torch.randn(n, 8, generator=gen, dtype=torch.float64))
        txt = EmbeddingBatch.normalized(torch.randn(n, 8, generator=gen, dtype=torch.float64))

        softmax = float(clip_contrastive_loss(img, txt, cfg, "softmax"))

        for form in ("relative", "distance"):
            other = float(clip_contrastive_loss(img, txt, cfg, form))
            assert other == pytest.approx(softmax, rel=1e-6, abs=1e-9), (n, form)


def test_contrastive_loss_ignores_pair_order() -> None:
    gen = torch.Generator().manual_seed(5)
    img = torch.randn(9, 6, generator=gen, dtype=torch.float64)
    txt = torch.randn(9, 6, generator=gen, dtype=torch.float64)
    perm = torch.randperm(9, generator=gen)

    original = clip_contrastive_loss(EmbeddingBatch.normalized(img), EmbeddingBatch.normalized(txt))
    shuffled = clip_contrastive_loss(
        EmbeddingBatch.normalized(img[perm]), EmbeddingBatch.normalized(txt[perm])
    )

    assert float(shuffled) == pytest.approx(float(original), abs=1e-12)


def test_class_margin_audit_matches_pairwise_margins() -> None:
    gen = torch.Generator().manual_seed(2)
    n_classes = 4
    anchors = ClassAnchorSet(
        F.normalize(torch.randn(n_classes, 5, generator=gen, dtype=torch.float64), dim=1),
        provider="explicit",
    )
    embs = EmbeddingBatch.normalized(torch.randn(30, 5, generator=gen, dtype=torch.float64))
    labels = torch.randint(0, n_classes - 1, (30,), generator=gen)

    audit = class_margin_audit(embs, LabelVector(labels), anchors)

    for c in range(n_classes):
        margins = [
            margin_delta(f, anchors.anchors[c], anchors.anchors[other])
            for f, y in zip(embs.vectors, labels.tolist(), strict=True)
            if y == c
            for other in range(n_classes)
            if other != c
        ]
        stats = audit.per_class[c]
        if not margins:
            assert stats.present is False
            continue
        assert stats.n_samples * (n_classes - 1) == len(margins)
        assert stats.min_margin == pytest.approx(min(margins), abs=1e-12)
        assert stats.mean_margin == pytest.approx(sum(margins) / len(margins), abs=1e-12)
    assert audit.per_class[n_classes - 1].present is False


def test_identical_anchors_leave_no_margin() -> None:
    anchors = ClassAnchorSet(torch.full((3, 4), 0.5, dtype=torch.float64), provider="explicit")
    embs = EmbeddingBatch.normalized(
        torch.randn(6, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    )

    audit = class_margin_audit(embs, LabelVector(torch.tensor([0, 0, 1, 1, 2, 2])), anchors)

    for stats in audit.per_class.values():
        assert stats.min_margin == pytest.approx(0.0, abs=1e-12)
        assert stats.mean_margin == pytest.approx(0.0, abs=1e-12)


def test_exported_embeddings_read_back(tmp_path: Path) -> None:
    gen = torch.Generator().manual_seed(3)
    embs = EmbeddingBatch.normalized(torch.randn(12, 7, generator=gen, dtype=torch.float64))
    labels = LabelVector(torch.randint(0, 3, (12,), generator=gen))
    ids = [f"item-{k:02d}" for k in reversed(range(12))]

    path = export_embeddings(embs, labels, ids, tmp_path / "out" / "e.csv")

    with path.open(newline="") as handle:
        rows = list(csv.reader(handle))[1:]
    assert [r[0] for r in rows] == ids
    assert [int(r[1]) for r in rows] == labels.labels.tolist()
    values = torch.tensor([[float(v) for v in r[2:]] for r in rows], dtype=torch.float64)
    torch.testing.assert_close(values, embs.vectors, atol=1e-9, rtol=0.0)
