"""Dataset standardization: image geometry, report text, tokens and the index file."""

from __future__ import annotations

import csv
import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable, Sequence

import numpy as np

from cheff.errors import DataIOError
from cheff.io import atomic_write, read_pgm, to_model_range
from cheff.resize import resize_array

INDEX_VERSION = 1
FRONTAL_VIEWS = frozenset({"AP", "PA"})


# -- images ------------------------------------------------------------
def _round_half_up(num: int, den: int) -> int:
    return (2 * num + den) // (2 * den)


def standardize_image(img, target: int) -> np.ndarray:
    """Resize so the short edge equals ``target``, then centre-crop a square.

    Accepts ``[H, W]`` or ``[1, H, W]`` and returns ``[1, target, target]``.
    An odd crop surplus drops the extra row/column from the trailing side.
    """
    arr = np.asarray(img.data if hasattr(img, "data") and not isinstance(img, np.ndarray) else img,
                     dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    h, w = arr.shape
    short = min(h, w)
    new_h = target if h == short else _round_half_up(h * target, short)
    new_w = target if w == short else _round_half_up(w * target, short)
    resized = resize_array(arr, new_h, new_w)
    top = (new_h - target) // 2
    left = (new_w - target) // 2
    return resized[top:top + target, left:left + target][None].copy()


# -- reports -----------------------------------------------------------
_NAMED = re.compile(r"\b(?:findings|impressions?)[ \t]*:", re.IGNORECASE)
_OTHER = re.compile(r"^[ \t]*[A-Z][A-Z0-9 /&()\-]*:", re.MULTILINE)


def _headers(text: str) -> list[tuple[int, int, str]]:
    named = [(m.start(), m.end(), m.group(0)) for m in _NAMED.finditer(text)]
    other = [(m.start(), m.end(), m.group(0)) for m in _OTHER.finditer(text)
             if not any(s < m.end() and m.start() < e for s, e, _ in named)]
    return sorted(named + other)


def _section_kind(header: str) -> str | None:
    word = header.rstrip(": \t").strip().lower()
    if word == "findings":
        return "findings"
    if word in ("impression", "impressions"):
        return "impression"
    return None


def extract_report_sections(text: str) -> str:
    """Findings and impression sections joined by a newline.

    Headers are ``FINDINGS:`` and ``IMPRESSION:``/``IMPRESSIONS:`` in any
    case and may appear mid-line; a section runs until the next header,
    which includes any all-caps ``HEADER:`` opening a line, or the end of
    the text.  Whitespace inside a section is collapsed.
    """
    if not text:
        return ""
    heads = _headers(text)
    sections: dict[str, str] = {}
    for i, (_, stop, label) in enumerate(heads):
        kind = _section_kind(label)
        if kind is None or kind in sections:
            continue
        end = heads[i + 1][0] if i + 1 < len(heads) else len(text)
        sections[kind] = " ".join(text[stop:end].split())
    return (sections.get("findings", "") + "\n" + sections.get("impression", "")).strip()


# -- tokens ------------------------------------------------------------
PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[BOS]", "[EOS]")
_TOKEN = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
        counts = Counter(w for text in corpus for w in split_words(text))
        words = sorted(w for w, c in counts.items() if c >= min_freq and w not in RESERVED)
        return cls(list(RESERVED) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]


def tokenize(vocab: Vocabulary, text: str, max_len: int = 150) -> list[int]:
    """``[BOS, ids..., EOS]`` truncated to ``max_len`` (EOS always kept)."""
    if max_len < 2:
        raise ValueError("max_len must leave room for BOS and EOS")
    ids = [vocab.id(w) for w in split_words(text)]
    return [BOS] + ids[:max_len - 2] + [EOS]


def detokenize(vocab: Vocabulary, ids: Sequence[int]) -> str:
    return " ".join(vocab.token(i) for i in ids if i not in (PAD, BOS, EOS))


# -- index -------------------------------------------------------------
@dataclass
class SampleRecord:
    path: str
    source: str
    labels: list[str] | None = None
    report: str | None = None

    def __post_init__(self):
        if not self.path or PurePosixPath(self.path).is_absolute():
            raise ValueError(f"record path must be relative and non-empty: {self.path!r}")
        if not self.source:
            raise ValueError("record source must be non-empty")

    def to_json(self) -> dict:
        return {"path": self.path, "source": self.source, "labels": self.labels, "report": self.report}


@dataclass
class IndexFile:
    records: list[SampleRecord] = field(default_factory=list)
    version: int = INDEX_VERSION

    @property
    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(r.source for r in self.records).items()))

    def dumps(self) -> str:
        doc = {"version": self.version, "counts": self.counts,
               "records": [r.to_json() for r in self.records]}
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        atomic_write(path, self.dumps())

    @classmethod
    def loads(cls, text: str) -> IndexFile:
        doc = json.loads(text)
        if doc.get("version") != INDEX_VERSION:
            raise DataIOError(f"unsupported index version {doc.get('version')!r}")
        records = [SampleRecord(**r) for r in doc["records"]]
        index = cls(records, doc["version"])
        if doc.get("counts", {}) != index.counts:
            raise DataIOError("index counts disagree with its records")
        return index

    @classmethod
    def load(cls, path) -> IndexFile:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot read index {path}: {exc}") from exc
        try:
            return cls.loads(text)
        except (ValueError, KeyError, TypeError) as exc:
            raise DataIOError(f"malformed index {path}: {exc}") from exc


@dataclass
class SourceDescriptor:
    """One dataset root.

    A root may hold a ``manifest.csv`` with columns ``path,view,labels,report``
    (labels ``|``-separated, report a relative text file); otherwise every
    ``*.pgm`` below it is taken, with optional ``<stem>.txt`` report and
    ``<stem>.labels`` sidecars.  ``include`` filters manifest rows; the default
    keeps frontal AP/PA views (rows without a view count as frontal).
    """

    name: str
    root: Path
    include: Callable[[dict], bool] | None = None

    def __post_init__(self):
        self.root = Path(self.root)

    @classmethod
    def parse(cls, text: str) -> SourceDescriptor:
        name, sep, root = text.partition("=")
        if not sep or not name or not root:
            raise ValueError(f"source must be NAME=DIR, got {text!r}")
        return cls(name, Path(root))


def _frontal(row: dict) -> bool:
    view = (row.get("view") or "").strip().upper()
    return view == "" or view in FRONTAL_VIEWS


def _read_report(path: Path) -> str | None:
    if not path.is_file():
        return None
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read report {path}: {exc}") from exc
    return extract_report_sections(raw) or None


def _scan_source(src: SourceDescriptor) -> list[tuple[Path, list[str] | None, str | None]]:
    root = src.root
    if not root.is_dir():
        raise DataIOError(f"source {src.name!r}: unreadable root {root}")
    manifest = root / "manifest.csv"
    items = []
    if manifest.is_file():
        keep = src.include or _frontal
        try:
            with manifest.open(newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataIOError(f"source {src.name!r}: cannot read {manifest}: {exc}") from exc
        for row in rows:
            if not keep(row):
                continue
            labels = [l for l in (row.get("labels") or "").split("|") if l] or None
            report = _read_report(root / row["report"]) if row.get("report") else None
            items.append((root / row["path"], labels, report))
    else:
        for img in sorted(root.rglob("*.pgm")):
            label_file = img.with_suffix(".labels")
            labels = None
            if label_file.is_file():
                labels = [l.strip() for l in label_file.read_text(encoding="utf-8").splitlines() if l.strip()] or None
            items.append((img, labels, _read_report(img.with_suffix(".txt"))))
    return items


def build_index(sources: Sequence[SourceDescriptor], output_path) -> IndexFile:
    """Scan every source, sort by (source, path) and write the JSON index.

    Record paths are stored relative to the index file's directory.
    """
    output_path = Path(output_path)
    base = output_path.parent.resolve()
    records: list[SampleRecord] = []
    for src in sources:
        seen: set[str] = set()
        for img, labels, report in _scan_source(src):
            rel = Path(_relpath(img.resolve(), base)).as_posix()
            if rel in seen:
                raise DataIOError(f"source {src.name!r}: duplicate path {rel}")
            seen.add(rel)
            records.append(SampleRecord(rel, src.name, labels, report))
    records.sort(key=lambda r: (r.source, r.path))
    index = IndexFile(records)
    index.save(output_path)
    return index


def _relpath(path: Path, base: Path) -> str:
    return os.path.relpath(path, base)


def load_index_images(index: IndexFile, index_path, size: int) -> np.ndarray:
    """Read and standardize every indexed image to ``[N, 1, size, size]`` in [-1, 1]."""
    base = Path(index_path).parent
    out = np.empty((len(index.records), 1, size, size), dtype=np.float32)
    for i, rec in enumerate(index.records):
        out[i] = to_model_range(standardize_image(read_pgm(base / rec.path), size))
    return out
