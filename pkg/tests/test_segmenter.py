import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from leafbg.corpus import derive_seed, read_split_manifest
from leafbg.errors import ConfigError, DataError, ModelError
from leafbg.segmenter import (BASELINE, ForegroundMask, GateReason, SegmenterBackendId, apply_mask, gate,
                              load_mask, mask_path, read_manual_rejects, read_verdicts, rejected_per_class,
                              save_mask, segment, segment_records)
from leafbg.synthetic import render_sample


def iou(a, b):
    a, b = a.astype(bool), b.astype(bool)
    return (a & b).sum() / (a | b).sum()


def fmask(values, image_id="img"):
    return ForegroundMask(np.asarray(values, dtype=np.uint8), image_id)


def test_uniform_image_is_rejected():
    mask = segment(np.full((40, 50, 3), 120, np.uint8))
    assert mask.foreground_fraction in (0.0, 1.0)
    assert not gate(mask).accepted


def test_baseline_recovers_leaf_ellipse():
    for label in ("healthy", "rust", "scab"):
        for i in range(5):
            s = render_sample(label, derive_seed(i, f"iou-{label}"))
            assert iou(segment(s.image).values, s.leaf_mask) >= 0.9


def test_mask_shape_and_fraction():
    s = render_sample("scab", derive_seed(0, "x"))
    m = segment(s.image, image_id="x")
    assert (m.height, m.width) == s.image.shape[:2]
    assert set(np.unique(m.values)) <= {0, 1}
    assert m.foreground_fraction == m.values.sum() / m.values.size
    assert m.source_image_id == "x"


def test_baseline_is_deterministic():
    s = render_sample("rust", derive_seed(2, "d"))
    assert segment(s.image).values.tobytes() == segment(s.image.copy()).values.tobytes()


def test_segment_input_errors():
    with pytest.raises(DataError):
        segment(np.zeros((7, 30, 3), np.uint8))
    with pytest.raises(DataError):
        segment(Image.new("L", (20, 20)))
    with pytest.raises(ConfigError):
        segment(np.zeros((20, 20, 3), np.uint8), threshold=1.0)


def test_salient_backend_requires_model(tmp_path):
    with pytest.raises((ConfigError, DataError, ModelError, ValueError)):
        SegmenterBackendId("salient_model")
    backend = SegmenterBackendId("salient_model", str(tmp_path / "missing.onnx"))
    with pytest.raises(ModelError):
        segment(np.zeros((20, 20, 3), np.uint8), backend)
    bad = tmp_path / "bad.onnx"
    bad.write_bytes(b"not a model")
    with pytest.raises(ModelError):
        segment(np.zeros((20, 20, 3), np.uint8), SegmenterBackendId("salient_model", str(bad)))


@pytest.fixture(scope="module")
def green_minus_red_onnx(tmp_path_factory):
    """1x1 convolution computing G - R on the normalized input; static 32 x 32 input."""
    onnx = pytest.importorskip("onnx")
    pytest.importorskip("onnxruntime")
    from onnx import TensorProto, helper, numpy_helper

    weight = np.array([-1.0, 1.0, 0.0], np.float32).reshape(1, 3, 1, 1)
    graph = helper.make_graph(
        [helper.make_node("Conv", ["img", "w"], ["sal"])],
        "saliency",
        [helper.make_tensor_value_info("img", TensorProto.FLOAT, [1, 3, 32, 32])],
        [helper.make_tensor_value_info("sal", TensorProto.FLOAT, [1, 1, 32, 32])],
        [numpy_helper.from_array(weight, "w")],
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)])
    model.ir_version = 8
    path = tmp_path_factory.mktemp("onnx") / "toy.onnx"
    onnx.save(model, path)
    return path


def test_salient_adapter_resizes_back(green_minus_red_onnx):
    img = np.zeros((60, 90, 3), np.uint8)
    img[:, :] = (200, 40, 40)
    img[15:45, 20:70] = (30, 220, 30)
    mask = segment(img, SegmenterBackendId("salient_model", str(green_minus_red_onnx)), threshold=0.5)
    assert mask.values.shape == (60, 90)
    truth = np.zeros((60, 90), np.uint8)
    truth[15:45, 20:70] = 1
    assert iou(mask.values, truth) > 0.85


def test_apply_mask_examples():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (9, 11, 3), dtype=np.uint8)
    assert np.array_equal(apply_mask(img, fmask(np.ones((9, 11)))), img)
    assert not apply_mask(img, fmask(np.zeros((9, 11)))).any()
    checker = (np.add.outer(np.arange(9), np.arange(11)) % 2).astype(np.uint8)
    out = apply_mask(img, fmask(checker), fill=(7, 8, 9))
    for y in range(9):
        for x in range(11):
            expected = img[y, x] if checker[y, x] else (7, 8, 9)
            assert tuple(out[y, x]) == tuple(expected)


def test_apply_mask_size_mismatch():
    with pytest.raises(DataError):
        apply_mask(np.zeros((4, 4, 3), np.uint8), fmask(np.ones((4, 5))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**32 - 1),
       st.tuples(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255)))
def test_apply_mask_idempotent(h, w, seed, fill):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    m = fmask(rng.integers(0, 2, (h, w)))
    once = apply_mask(img, m, fill)
    assert np.array_equal(apply_mask(once, m, fill), once)


def test_gate_examples():
    empty = gate(fmask(np.zeros((10, 10))))
    assert not empty.accepted
    assert set(empty.reasons) == {GateReason.EMPTY_FOREGROUND, GateReason.FRACTION_OUT_OF_BOUNDS}
    full = gate(fmask(np.ones((10, 10))))
    assert set(full.reasons) == {GateReason.FULL_FOREGROUND, GateReason.FRACTION_OUT_OF_BOUNDS}
    forty = np.zeros((10, 10))
    forty[:4] = 1
    assert gate(fmask(forty), (0.05, 0.95)).accepted
    half = np.zeros((10, 10))
    half[:5] = 1
    verdict = gate(fmask(half, "Train_7"), (0.05, 0.95), {"Train_7"})
    assert verdict.reasons == (GateReason.MANUAL_REJECT,)
    with pytest.raises(ConfigError):
        gate(fmask(half), (0.5, 0.5))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5), st.floats(0.5, 1.0, exclude_min=True))
def test_gate_pure_and_consistent(seed, lo, hi):
    rng = np.random.default_rng(seed)
    m = fmask(rng.random((6, 7)) < rng.random())
    a, b = gate(m, (lo, hi)), gate(m, (lo, hi))
    assert a == b
    assert a.accepted == (not a.reasons)
    assert a.accepted == (0 < m.foreground_fraction < 1 and lo <= m.foreground_fraction <= hi)


def test_mask_file_round_trip(tmp_path):
    m = fmask(np.eye(12), "leaf")
    path = mask_path(tmp_path, "leaf")
    save_mask(m, path)
    assert path.name == "leaf_mask.png"
    with Image.open(path) as im:
        assert im.mode == "L" and set(np.unique(np.asarray(im))) == {0, 255}
    assert np.array_equal(load_mask(path, "leaf").values, m.values)


def test_manual_rejects_file(tmp_path):
    p = tmp_path / "rejects.txt"
    p.write_text("Train_1\n\n# comment\n  Train_9  \n")
    assert read_manual_rejects(p) == {"Train_1", "Train_9"}


def test_segment_records_skips_existing(tmp_path, small_corpus):
    from leafbg.corpus import ingest, split
    _, recs = ingest(small_corpus / "labels.csv", small_corpus / "images")
    train = split(recs, seed=0).train
    rows = segment_records(train, tmp_path, BASELINE)
    assert len(rows) == len(train) == len(read_verdicts(tmp_path / "verdicts.csv"))
    assert (tmp_path / "verdicts.csv").read_text().splitlines()[0] == "image_id,fraction,accepted,reasons"
    target = mask_path(tmp_path / "masks", rows[0].image_id)
    save_mask(fmask(np.zeros((240, 320)), rows[0].image_id), target)
    again = segment_records(train, tmp_path, BASELINE)
    assert not again[0].verdict.accepted
    forced = segment_records(train, tmp_path, BASELINE, force=True)
    assert forced[0].verdict.accepted
    table = rejected_per_class(forced, {r.image_id: r.label for r in train})
    assert sum(n for n, _ in table.values()) == len(train)
