"""Loading of detection dumps, expressions, region tables, and embeddings.

All on-disk formats are line-delimited UTF-8 text with tab-separated fields
and '.'-radix ASCII decimals:

detection dump
    ``#refnms-dets v1 feature_dim=<D>`` header, then one record per line:
    ``image_id<TAB>x1 y1 x2 y2<TAB>category_id<TAB>category_name<TAB>confidence<TAB>f1 ... fD``

expressions (trailing POS column optional)
    ``expression_id<TAB>image_id<TAB>split<TAB>x1 y1 x2 y2<TAB>tok1 tok2 ...<TAB>pos1 pos2 ...``

ground-truth regions
    ``region_id<TAB>image_id<TAB>x1 y1 x2 y2<TAB>category_name``

embeddings
    GloVe text format, ``word f1 ... fD`` with a constant dimension.

Vocabularies keep words seen at least twice in the training expressions,
reserve index 0 for padding and a dedicated "unk" index for everything else.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box

DUMP_HEADER_RE = re.compile(r"#refnms-dets v1 feature_dim=(\d+)$")
SPLITS = frozenset({"train", "val", "testA", "testB", "test"})
PAD_TOKEN = "<pad>"
UNK_TOKEN = "unk"


class DataFormatError(ValueError):
    """A file violated its declared on-disk format or schema."""


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    """One detected box with its classification confidence and region feature."""

    box: Box
    category_id: int
    category_name: str
    confidence: float
    feature: np.ndarray

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class ImageDetections:
    image_id: str
    records: tuple[DetectionRecord, ...]

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValueError("image_id must be non-empty")


@dataclass(frozen=True, eq=False)
class ExpressionRecord:
    """A tokenized referring expression with its annotated referent box."""

    expression_id: str
    image_id: str
    tokens: tuple[str, ...]
    pos_tags: tuple[str, ...] | None
    referent_box: Box
    split: str

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError(f"expression {self.expression_id}: no tokens")
        if self.pos_tags is not None and len(self.pos_tags) != len(self.tokens):
            raise ValueError(
                f"expression {self.expression_id}: {len(self.pos_tags)} POS tags "
                f"for {len(self.tokens)} tokens"
            )
        if self.split not in SPLITS:
            raise ValueError(f"expression {self.expression_id}: unknown split '{self.split}'")


@dataclass(frozen=True, eq=False)
class GroundTruthRegion:
    region_id: str
    image_id: str
    box: Box
    category_name: str


@dataclass(eq=False)
class EmbeddingTable:
    """Word -> vector map with a fixed dimension.

    Lookups signal absence with ``None``; no zero vector is fabricated.
    """

    dimension: int
    entries: dict[str, np.ndarray]

    def get(self, word: str) -> np.ndarray | None:
        return self.entries.get(word)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)


class DetectionDump(list):
    """Sequence of :class:`ImageDetections` that remembers its feature dimension."""

    def __init__(self, images: Iterable[ImageDetections], feature_dim: int):
        super().__init__(images)
        self.feature_dim = feature_dim


def _parse_box(field: str, path, lineno: int) -> Box:
    parts = field.split()
    if len(parts) != 4:
        raise DataFormatError(f"{path}:{lineno}: expected 4 box coordinates, got {len(parts)}")
    try:
        x1, y1, x2, y2 = (float(p) for p in parts)
        return Box(x1, y1, x2, y2)
    except ValueError as exc:
        raise DataFormatError(f"{path}:{lineno}: bad box '{field}' ({exc})") from None


def load_detection_dump(path) -> DetectionDump:
    """Parse a detection dump, grouping records by image in file order."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        m = DUMP_HEADER_RE.match(header)
        if m is None:
            raise DataFormatError(f"{path}:1: bad dump header '{header}'")
        dim = int(m.group(1))
        grouped: dict[str, list[DetectionRecord]] = {}
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            fields = line.split("\t")
            if len(fields) != 6:
                raise DataFormatError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
            image_id, box_field, cat_id, cat_name, conf_field, feat_field = fields
            if not image_id:
                raise DataFormatError(f"{path}:{lineno}: empty image_id")
            box = _parse_box(box_field, path, lineno)
            try:
                category_id = int(cat_id)
                confidence = float(conf_field)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not 0.0 <= confidence <= 1.0:
                raise DataFormatError(
                    f"{path}:{lineno}: confidence {confidence} outside [0, 1]"
                )
            try:
                feature = np.array([float(t) for t in feat_field.split()], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad feature value ({exc})") from None
            if feature.shape != (dim,):
                raise DataFormatError(
                    f"{path}:{lineno}: feature has {feature.size} values, header declares {dim}"
                )
            feature.setflags(write=False)
            grouped.setdefault(image_id, []).append(
                DetectionRecord(box, category_id, cat_name, confidence, feature)
            )
    images = [ImageDetections(i, tuple(recs)) for i, recs in grouped.items()]
    return DetectionDump(images, dim)


def write_detection_dump(path, images: Sequence[ImageDetections], feature_dim: int | None = None) -> None:
    if feature_dim is None:
        feature_dim = getattr(images, "feature_dim", None)
    if feature_dim is None:
        for img in images:
            if img.records:
                feature_dim = img.records[0].feature.size
                break
    if feature_dim is None:
        raise ValueError("write_detection_dump: feature_dim required for an empty dump")
    lines = [f"#refnms-dets v1 feature_dim={feature_dim}"]
    for img in images:
        for rec in img.records:
            feats = " ".join(repr(float(v)) for v in rec.feature)
            lines.append(
                "\t".join(
                    (
                        img.image_id,
                        _format_box(rec.box),
                        str(rec.category_id),
                        rec.category_name,
                        repr(float(rec.confidence)),
                        feats,
                    )
                )
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _format_box(box: Box) -> str:
    return " ".join(repr(float(v)) for v in (box.x1, box.y1, box.x2, box.y2))


def load_expressions(path) -> list[ExpressionRecord]:
    """Parse an expressions file; tokens are lowercased on load."""
    path = Path(path)
    out: list[ExpressionRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            fields = raw.rstrip("\n").split("\t")
            if len(fields) not in (5, 6):
                raise DataFormatError(f"{path}:{lineno}: expected 5 or 6 fields, got {len(fields)}")
            expr_id, image_id, split, box_field, tok_field = fields[:5]
            if split not in SPLITS:
                raise DataFormatError(f"{path}:{lineno}: unknown split '{split}'")
            tokens = tuple(t.lower() for t in tok_field.split())
            if not tokens:
                raise DataFormatError(f"{path}:{lineno}: empty token list")
            pos_tags: tuple[str, ...] | None = None
            if len(fields) == 6 and fields[5]:
                pos_tags = tuple(fields[5].split())
                if len(pos_tags) != len(tokens):
                    raise DataFormatError(
                        f"{path}:{lineno}: {len(pos_tags)} POS tags for {len(tokens)} tokens"
                    )
            box = _parse_box(box_field, path, lineno)
            out.append(ExpressionRecord(expr_id, image_id, tokens, pos_tags, box, split))
    return out


def write_expressions(path, records: Sequence[ExpressionRecord]) -> None:
    lines = []
    for rec in records:
        fields = [
            rec.expression_id,
            rec.image_id,
            rec.split,
            _format_box(rec.referent_box),
            " ".join(rec.tokens),
        ]
        if rec.pos_tags is not None:
            fields.append(" ".join(rec.pos_tags))
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_regions(path) -> list[GroundTruthRegion]:
    path = Path(path)
    out: list[GroundTruthRegion] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            fields = raw.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            region_id, image_id, box_field, category = fields
            box = _parse_box(box_field, path, lineno)
            out.append(GroundTruthRegion(region_id, image_id, box, category))
    return out


def write_regions(path, regions: Sequence[GroundTruthRegion]) -> None:
    lines = [
        "\t".join((r.region_id, r.image_id, _format_box(r.box), r.category_name))
        for r in regions
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_embeddings(path) -> EmbeddingTable:
    """Parse a GloVe-format text table; duplicate words keep the last vector."""
    path = Path(path)
    entries: dict[str, np.ndarray] = {}
    dim: int | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.rstrip("\n").split()
            if not parts:
                continue
            word = parts[0]
            try:
                vec = np.array([float(t) for t in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad embedding value ({exc})") from None
            if dim is None:
                dim = vec.size
                if dim == 0:
                    raise DataFormatError(f"{path}:{lineno}: embedding line has no values")
            elif vec.size != dim:
                raise DataFormatError(
                    f"{path}:{lineno}: embedding has {vec.size} values, expected {dim}"
                )
            if word in entries:
                warnings.warn(f"duplicate embedding for '{word}' at {path}:{lineno}; keeping last")
            vec.setflags(write=False)
            entries[word] = vec
    if dim is None:
        raise DataFormatError(f"{path}: empty embedding table")
    return EmbeddingTable(dim, entries)


@dataclass(frozen=True)
class Vocabulary:
    """Word -> dense index map; 0 is padding, OOV words map to the unk index."""

    word_to_index: Mapping[str, int]
    max_sentence_length: int

    @property
    def unk_index(self) -> int:
        return self.word_to_index[UNK_TOKEN]

    def __len__(self) -> int:
        return len(self.word_to_index)

    def index_of(self, word: str) -> int:
        return self.word_to_index.get(word, self.unk_index)

    def words_by_index(self) -> list[str]:
        ordered = sorted(self.word_to_index.items(), key=lambda kv: kv[1])
        return [w for w, _ in ordered]


def build_vocabulary(train_expressions: Sequence[ExpressionRecord], max_len: int) -> Vocabulary:
    """Count words over the given expressions and keep those seen >= 2 times.

    Indices are deterministic: padding, then unk, then retained words ordered
    by descending count with lexicographic tie-breaks.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if not train_expressions:
        raise ValueError("build_vocabulary: empty training set")
    counts = Counter(t for expr in train_expressions for t in expr.tokens)
    retained = sorted(
        (w for w, c in counts.items() if c >= 2 and w != UNK_TOKEN),
        key=lambda w: (-counts[w], w),
    )
    word_to_index = {PAD_TOKEN: 0, UNK_TOKEN: 1}
    for w in retained:
        word_to_index[w] = len(word_to_index)
    return Vocabulary(word_to_index, max_len)


def vocabulary_from_words(words: Sequence[str], max_len: int) -> Vocabulary:
    """Rebuild a vocabulary from its index-ordered word list (checkpoints)."""
    if len(words) < 2 or words[0] != PAD_TOKEN or words[1] != UNK_TOKEN:
        raise DataFormatError("vocabulary word list must start with the pad and unk tokens")
    return Vocabulary({w: i for i, w in enumerate(words)}, max_len)


def encode_tokens(tokens: Sequence[str], vocab: Vocabulary) -> list[int]:
    """Map tokens to indices, truncating to the vocabulary's sentence limit."""
    if not tokens:
        raise ValueError("encode_tokens: empty token sequence")
    return [vocab.index_of(t) for t in tokens[: vocab.max_sentence_length]]


def group_detections(images: Iterable[ImageDetections]) -> dict[str, ImageDetections]:
    return {img.image_id: img for img in images}


def group_regions(regions: Iterable[GroundTruthRegion]) -> dict[str, list[GroundTruthRegion]]:
    grouped: dict[str, list[GroundTruthRegion]] = {}
    for r in regions:
        grouped.setdefault(r.image_id, []).append(r)
    return grouped
