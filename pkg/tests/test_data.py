import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from inkdiff.data import (
    PROMPTS,
    DatasetManifest,
    batch_iter,
    contact_sheet,
    denormalize,
    normalize,
    style_split,
    read_pgm,
    synth_generate,
    write_pgm,
)
from inkdiff.rng import RandomStream


def test_style_split_of_800():
    # 800 * 1973 / 8308 = 189.96
    assert style_split(800) == (190, 610)
    assert sum(style_split(8308)) == 8308 and style_split(8308)[0] == 1973


def test_normalize_endpoints_and_midpoint():
    assert normalize(0) == -1.0
    assert normalize(255) == 1.0
    assert normalize(127.5) == 0.0
    with pytest.raises(ValueError):
        normalize(-1)
    with pytest.raises(ValueError):
        normalize(256)


def test_round_trip_all_byte_values():
    x = np.arange(256, dtype=np.uint8)
    assert np.array_equal(denormalize(normalize(x)), x)


@given(hnp.arrays(np.float64, 10, elements=st.floats(-5, 5)))
@settings(max_examples=50, deadline=None)
def test_denormalize_clamps(x):
    p = denormalize(x)
    assert p.dtype == np.uint8


def test_pgm_round_trip_and_magic(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes()[:2] == b"P5"
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_header_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0, 255]]


@pytest.mark.parametrize(
    "raw", [b"P2\n2 2\n255\n0000", b"P5\n2 x\n255\n0000", b"P5\n2 2\n65535\n0000", b"P5\n2 2\n255\n\x00", b"P5\n2"]
)
def test_pgm_malformed(tmp_path, raw):
    (tmp_path / "bad.pgm").write_bytes(raw)
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "bad.pgm")


def test_write_pgm_rejects_non_uint8(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2)))


def test_contact_sheet_dims():
    tiles = [np.full((3, 4), i, np.uint8) for i in range(4)]
    sheet = contact_sheet(tiles, 2)
    assert sheet.shape == (2 * 3 + 2, 2 * 4 + 2)
    assert sheet[0, 0] == 0 and sheet[0, 6] == 1 and sheet[5, 0] == 2 and sheet[5, 6] == 3
    assert np.all(sheet[3:5, :] == 255)


@given(st.integers(1, 10), st.integers(1, 4))
@settings(max_examples=20, deadline=None)
def test_contact_sheet_row_major_layout(n, cols):
    sheet = contact_sheet([np.zeros((2, 2), np.uint8)] * n, cols)
    rows = -(-n // cols)
    assert sheet.shape == (rows * 2 + (rows - 1) * 2, cols * 2 + (cols - 1) * 2)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return synth_generate(6, 10, 16, 4, tmp_path_factory.mktemp("data"))


def test_generate_is_deterministic(dataset, tmp_path):
    again = synth_generate(6, 10, 16, 4, tmp_path)
    for a, b in zip(dataset.records, again.records):
        assert a["sha256"] == b["sha256"]


def test_manifest_contents(dataset):
    assert len(dataset.records) == 16
    assert {r["prompt"] for r in dataset.records} == set(PROMPTS.values())
    assert sum(r["style"] == "chinese" for r in dataset.records) == 6
    loaded = DatasetManifest.load(dataset.root)
    assert loaded.records == dataset.records
    images, prompts = loaded.load_images()
    assert images.shape == (16, 1, 16, 16)
    assert images.min() >= -1 and images.max() <= 1
    assert loaded.verify() == []


def test_styles_differ_in_contrast(dataset):
    a, _ = dataset.load_images("chinese")
    b, _ = dataset.load_images("modern")
    assert a.std(axis=(1, 2, 3)).mean() < b.std(axis=(1, 2, 3)).mean()


def test_verify_detects_tampering(tmp_path):
    m = synth_generate(1, 1, 16, 0, tmp_path)
    path = tmp_path / m.records[0]["file"]
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    (tmp_path / m.records[1]["file"]).unlink()
    problems = m.verify()
    assert len(problems) == 2


def test_generate_validation(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(0, 5, 16, 0, tmp_path)
    with pytest.raises(ValueError):
        synth_generate(5, 5, 20, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synth_generate(1, 1, 16, 0, blocker / "sub")


def test_batch_iter_partition_and_determinism(dataset):
    sizes = [len(p) for _, p in batch_iter(dataset, 5, RandomStream(1))]
    assert sizes == [5, 5, 5, 1]
    first = [p for _, p in batch_iter(dataset, 5, RandomStream(1))]
    second = [p for _, p in batch_iter(dataset, 5, RandomStream(1))]
    assert first == second


def test_batch_iter_class_filter(dataset):
    prompts = [p for _, ps in batch_iter(dataset, 4, RandomStream(0), "chinese") for p in ps]
    assert len(prompts) == 6 and set(prompts) == {PROMPTS["chinese"]}
    with pytest.raises(ValueError):
        list(batch_iter(dataset, 4, RandomStream(0), "baroque"))
