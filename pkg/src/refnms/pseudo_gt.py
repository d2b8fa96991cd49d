"""Pseudo ground truth for contextual objects.

Nouns are pulled from the expression (POS tags when available, otherwise a
function-word stoplist heuristic) and matched against region category names
by cosine similarity of word embeddings. Regions scoring at or above the
similarity threshold become pseudo ground truths; the annotated referent box
is always part of the foreground regardless of matching.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box
from .ingest import EmbeddingTable, ExpressionRecord, GroundTruthRegion

NOUN_TAGS = frozenset({"NOUN", "PROPN"})

# Tagless fallback: closed-class words plus modifiers that are common in
# referring expressions but can never name an object category. Anything not
# listed here (and not purely numeric) is treated as a candidate noun, so
# verbs like "holding" pass through; the embedding-similarity gate downstream
# absorbs such false positives.
HEURISTIC_STOPLIST = frozenset(
    """
    a an the this that these those some any each every all both few many much
    several no none such
    i me my mine you your yours he him his she her hers it its we us our ours
    they them their theirs who whom whose which what something anything
    nothing everything someone anyone one ones
    aboard about above across after against along amid among around at before
    behind below beneath beside besides between beyond by down during except
    for from in inside into near nearest next of off on onto out outside over
    past through to toward towards under underneath until up upon with within
    without
    and but or nor so yet if than as while when where
    am is are was were be been being has have had having do does did doing
    can could will would shall should may might must
    zero two three four five six seven eight nine ten first second third
    fourth fifth last
    red orange yellow green blue purple pink brown black white gray grey tan
    beige dark light
    left right top bottom middle center front back upper lower leftmost
    rightmost closest farthest furthest closer nearer far away here there
    big small large little tall short long wide narrow thin thick tiny huge
    very really quite just only also too not
    """.split()
)

_NUMERIC_RE = re.compile(r"\d+(\.\d+)?")


@dataclass(frozen=True)
class PseudoGtSet:
    """Region ids matched to an expression's nouns, plus the referent flag."""

    expression_id: str
    region_ids: frozenset[str]
    referent_included: bool


def extract_nouns(tokens: Sequence[str], pos_tags: Sequence[str] | None = None) -> list[str]:
    """Return the noun tokens, order preserved and duplicates retained.

    With POS tags, a token is a noun when tagged NOUN or PROPN. Without tags,
    every token survives unless it sits on :data:`HEURISTIC_STOPLIST` or is
    purely numeric.
    """
    if not tokens:
        raise ValueError("extract_nouns: empty token sequence")
    if pos_tags is not None:
        if len(pos_tags) != len(tokens):
            raise ValueError(
                f"extract_nouns: {len(pos_tags)} POS tags for {len(tokens)} tokens"
            )
        return [t for t, tag in zip(tokens, pos_tags) if tag.upper() in NOUN_TAGS]
    return [
        t for t in tokens if t not in HEURISTIC_STOPLIST and not _NUMERIC_RE.fullmatch(t)
    ]


def category_similarity(noun: str, category_name: str, table: EmbeddingTable) -> float:
    """Cosine similarity between a noun and a category name, in [-1, 1].

    Multi-word category names ("traffic light") embed as the mean of their
    word vectors. Returns the -1 sentinel when the noun or any category word
    is missing from the table, or when either vector has zero norm.
    """
    noun_vec = table.get(noun)
    if noun_vec is None:
        return -1.0
    word_vecs = [table.get(w) for w in category_name.split()]
    if not word_vecs or any(v is None for v in word_vecs):
        return -1.0
    cat_vec = np.mean(word_vecs, axis=0)
    nn = float(np.linalg.norm(noun_vec))
    cn = float(np.linalg.norm(cat_vec))
    if nn == 0.0 or cn == 0.0:
        return -1.0
    return float(noun_vec @ cat_vec / (nn * cn))


def generate_pseudo_gt(
    expr: ExpressionRecord,
    regions: Sequence[GroundTruthRegion],
    table: EmbeddingTable,
    similarity_threshold: float = 0.4,
) -> PseudoGtSet:
    """Match the expression's nouns against region categories.

    A region is included when the best cosine similarity over extracted nouns
    reaches `similarity_threshold` (inclusive at the boundary). The referent
    is always foreground, so `referent_included` is always True here.
    """
    for region in regions:
        if region.image_id != expr.image_id:
            raise ValueError(
                f"region {region.region_id} belongs to image {region.image_id}, "
                f"expression {expr.expression_id} to {expr.image_id}"
            )
    nouns = extract_nouns(expr.tokens, expr.pos_tags)
    matched = set()
    for region in regions:
        best = max(
            (category_similarity(n, region.category_name, table) for n in nouns),
            default=-1.0,
        )
        if best >= similarity_threshold:
            matched.add(region.region_id)
    return PseudoGtSet(expr.expression_id, frozenset(matched), referent_included=True)


def pseudo_region_boxes(pseudo: PseudoGtSet, regions: Iterable[GroundTruthRegion]) -> list[Box]:
    """Boxes of the matched regions, in the order the regions are given."""
    return [r.box for r in regions if r.region_id in pseudo.region_ids]


def foreground_boxes(
    expr: ExpressionRecord, pseudo: PseudoGtSet, regions: Iterable[GroundTruthRegion]
) -> list[Box]:
    """Referent box (when flagged) followed by the matched region boxes."""
    boxes = [expr.referent_box] if pseudo.referent_included else []
    boxes.extend(pseudo_region_boxes(pseudo, regions))
    return boxes
