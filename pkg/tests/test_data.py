from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cheff.data import (BOS, EOS, UNK, IndexFile, SampleRecord, SourceDescriptor, Vocabulary, build_index,
                        detokenize, extract_report_sections, load_index_images, split_words, standardize_image,
                        tokenize)
from cheff.errors import DataIOError
from cheff.io import write_pgm
from cheff.resize import resize_array
from cheff.synthetic import make_corpus
from report_fixtures import REPORT_FIXTURES


# -- geometry ------------------------------------------------------------
def reference_standardize(img, target):
    """Independent route: exact fractions for the resized edge, explicit crop offsets."""
    h, w = img.shape
    short = min(h, w)

    def edge(n):
        if n == short:
            return target
        exact = Fraction(n * target, short)
        return int(exact) + (1 if exact - int(exact) >= Fraction(1, 2) else 0)

    nh, nw = edge(h), edge(w)
    r = resize_array(img.astype(np.float64), nh, nw)
    top, left = (nh - target) // 2, (nw - target) // 2
    return r[top:top + target, left:left + target], (nh, nw)


def test_square_target_is_identity():
    img = np.random.default_rng(0).random((16, 16))
    np.testing.assert_allclose(standardize_image(img, 16)[0], img, atol=1e-6)


def test_landscape_example_crop_rows():
    img = np.random.default_rng(1).random((1536, 1024))
    out = standardize_image(img, 512)
    assert out.shape == (1, 512, 512)
    np.testing.assert_array_equal(out[0], resize_array(img, 768, 512)[128:640])


def test_constant_image_stays_constant():
    out = standardize_image(np.full((37, 91), 0.3), 20)
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


def test_standardize_validation():
    with pytest.raises(ValueError):
        standardize_image(np.zeros((2, 3, 3)), 4)
    with pytest.raises(ValueError):
        standardize_image(np.zeros((3, 3)), 0)


@settings(max_examples=500, deadline=None)
@given(st.integers(1, 200), st.integers(1, 200), st.integers(1, 64))
def test_standardize_geometry(h, w, target):
    img = np.random.default_rng(h * 1000 + w).random((h, w))
    out = standardize_image(img, target)
    assert out.shape == (1, target, target)
    ref, (nh, nw) = reference_standardize(img, target)
    np.testing.assert_array_equal(out[0], ref)
    # aspect ratio of the intermediate within one pixel of rounding
    assert abs(nh * w - nw * h) <= max(h, w)


# -- reports -------------------------------------------------------------
@pytest.mark.parametrize("text,expected", REPORT_FIXTURES)
def test_report_fixture(text, expected):
    assert extract_report_sections(text) == expected


def test_report_fixture_count():
    assert len(REPORT_FIXTURES) == 20


# -- tokens --------------------------------------------------------------
def test_tokenize_examples():
    vocab = Vocabulary.build(["pleural effusion."])
    assert tokenize(vocab, "") == [BOS, EOS]
    ids = tokenize(vocab, "Pleural effusion.")
    assert ids == [BOS, vocab.id("pleural"), vocab.id("effusion"), vocab.id("."), EOS]
    assert tokenize(vocab, "pneumothorax") == [BOS, UNK, EOS]
    long = tokenize(vocab, " ".join(["effusion"] * 200))
    assert len(long) == 150 and long[0] == BOS and long[-1] == EOS
    with pytest.raises(ValueError):
        tokenize(vocab, "x", max_len=1)


def test_vocabulary_layout():
    vocab = Vocabulary.build(["b a a", "c"], min_freq=2)
    assert vocab.tokens == ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "a"]
    assert vocab.id("b") == UNK and vocab.token(4) == "a" and len(vocab) == 5
    with pytest.raises(ValueError):
        Vocabulary(["a"])
    with pytest.raises(ValueError):
        Vocabulary(["[PAD]", "[UNK]", "[BOS]", "[EOS]", "x", "x"])


def test_split_words_keeps_punctuation():
    assert split_words("No focal consolidation, effusion; or PTX.") == \
        ["no", "focal", "consolidation", ",", "effusion", ";", "or", "ptx", "."]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["lung", "clear", "heart", ".", ",", "size", "normal", "(", ")"]), max_size=60))
def test_tokenize_round_trip(words):
    vocab = Vocabulary.build(["lung clear heart . , size normal ( )"])
    ids = tokenize(vocab, " ".join(words))
    assert tokenize(vocab, detokenize(vocab, ids)) == ids


# -- index ---------------------------------------------------------------
def test_index_from_synthetic_corpus(tmp_path):
    roots = make_corpus(tmp_path / "corpus", n=10, size=16, seed=3)
    sources = [SourceDescriptor(name, root) for name, root in roots.items()]
    index = build_index(sources, tmp_path / "index.json")
    assert index.counts == {"a": 6, "b": 4}
    keys = [(r.source, r.path) for r in index.records]
    assert keys == sorted(keys) and len(keys) == 10
    assert index.records[0].path == "corpus/a/img_0000.pgm"
    assert index.records[0].report and "\n" in index.records[0].report
    first = (tmp_path / "index.json").read_bytes()
    build_index(list(reversed(sources)), tmp_path / "index.json")
    assert (tmp_path / "index.json").read_bytes() == first
    loaded = IndexFile.load(tmp_path / "index.json")
    assert loaded.dumps().encode() == first
    images = load_index_images(loaded, tmp_path / "index.json", 8)
    assert images.shape == (10, 1, 8, 8) and images.dtype == np.float32
    assert images.min() >= -1 and images.max() <= 1


def test_index_json_layout(tmp_path):
    index = IndexFile([SampleRecord("x/1.pgm", "s")])
    assert index.dumps() == ('{\n  "version": 1,\n  "counts": {\n    "s": 1\n  },\n  "records": [\n    {\n'
                             '      "path": "x/1.pgm",\n      "source": "s",\n      "labels": null,\n'
                             '      "report": null\n    }\n  ]\n}\n')


def test_empty_sources_give_empty_index(tmp_path):
    index = build_index([], tmp_path / "i.json")
    assert index.records == [] and index.counts == {}


def test_manifest_source_filters_and_duplicates(tmp_path):
    root = tmp_path / "src"
    root.mkdir()
    for name in ("p.pgm", "q.pgm", "r.pgm"):
        write_pgm(root / name, np.zeros((4, 4)))
    (root / "p.txt").write_text("FINDINGS: x. IMPRESSION: y.")
    (root / "manifest.csv").write_text("path,view,labels,report\np.pgm,PA,Effusion|Edema,p.txt\n"
                                       "q.pgm,LATERAL,,\nr.pgm,,,\n")
    index = build_index([SourceDescriptor("m", root)], tmp_path / "i.json")
    assert [r.path for r in index.records] == ["src/p.pgm", "src/r.pgm"]
    assert index.records[0].labels == ["Effusion", "Edema"] and index.records[0].report == "x.\ny."
    everything = build_index([SourceDescriptor("m", root, include=lambda row: True)], tmp_path / "i.json")
    assert len(everything.records) == 3
    (root / "manifest.csv").write_text("path,view,labels,report\np.pgm,PA,,\np.pgm,AP,,\n")
    with pytest.raises(DataIOError, match="duplicate"):
        build_index([SourceDescriptor("m", root)], tmp_path / "i.json")


def test_sidecar_labels(tmp_path):
    root = tmp_path / "s"
    root.mkdir()
    write_pgm(root / "a.pgm", np.zeros((4, 4)))
    (root / "a.labels").write_text("Cardiomegaly\n\nEffusion\n")
    index = build_index([SourceDescriptor("s", root)], tmp_path / "i.json")
    assert index.records[0].labels == ["Cardiomegaly", "Effusion"] and index.records[0].report is None


def test_index_errors(tmp_path):
    with pytest.raises(DataIOError, match="missing"):
        build_index([SourceDescriptor("x", tmp_path / "missing")], tmp_path / "i.json")
    with pytest.raises(ValueError):
        SampleRecord("/abs/path.pgm", "s")
    with pytest.raises(ValueError):
        SampleRecord("a.pgm", "")
    bad = '{"version": 1, "counts": {"s": 2}, "records": [{"path": "a", "source": "s", "labels": null, "report": null}]}'
    with pytest.raises(DataIOError, match="counts"):
        IndexFile.loads(bad)
    with pytest.raises(DataIOError):
        IndexFile.loads('{"version": 2, "counts": {}, "records": []}')
    (tmp_path / "broken.json").write_text("{not json")
    with pytest.raises(DataIOError):
        IndexFile.load(tmp_path / "broken.json")
    with pytest.raises(ValueError):
        SourceDescriptor.parse("no-equals-sign")
    assert SourceDescriptor.parse("a=/data/x").name == "a"
