import csv
import io
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moca_lab.dataio import (SyntheticSpec, build_split_stream, contiguous_partition, encode_idx,
                             generate_synthetic, load_idx, parse_idx, read_result, result_to_csv,
                             result_to_json, write_result)
from moca_lab.engine import ExperimentResult
from moca_lab.errors import (BadMagic, ConfigError, IdxError, LabelOutOfRange, SchemaMismatch,
                             SizeOverflow, TruncatedPayload)
from moca_lab.randkit import RngStream
from moca_lab.runner import RunConfig, run_experiment

IMAGE_2X2 = bytes([0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,
                   1, 2, 3, 4, 250, 251, 252, 255])
LABELS_3 = bytes([0x00, 0x00, 0x08, 0x01, 0, 0, 0, 3, 9, 0, 4])


def test_image_fixture_round_trip():
    a = parse_idx(IMAGE_2X2)
    assert a.dtype == np.uint8 and a.shape == (2, 2, 2)
    assert a.ravel().tolist() == [1, 2, 3, 4, 250, 251, 252, 255]
    assert a[1, 0, 1] == 251
    assert encode_idx(a) == IMAGE_2X2


def test_label_fixture_round_trip(tmp_path):
    (tmp_path / "l").write_bytes(LABELS_3)
    a = load_idx(tmp_path / "l")
    assert a.tolist() == [9, 0, 4]
    assert encode_idx(a) == LABELS_3


def test_bad_magic():
    with pytest.raises(BadMagic):
        parse_idx(struct.pack(">II", 0x00000802, 1) + b"\x00")


def test_truncated_payload():
    with pytest.raises(TruncatedPayload):
        parse_idx(struct.pack(">II", 0x00000801, 10) + bytes(9))


def test_truncated_header():
    with pytest.raises(TruncatedPayload):
        parse_idx(b"\x00\x00\x08")
    with pytest.raises(TruncatedPayload):
        parse_idx(struct.pack(">II", 0x00000803, 2))


def test_size_overflow():
    with pytest.raises(SizeOverflow):
        parse_idx(struct.pack(">IIII", 0x00000803, 0xFFFFFFFF, 0xFFFFFFFF, 0xFFFFFFFF))


def test_trailing_bytes_rejected():
    with pytest.raises(IdxError):
        parse_idx(LABELS_3 + b"\x01")


def test_empty_label_file():
    assert parse_idx(struct.pack(">II", 0x00000801, 0)).shape == (0,)


@settings(max_examples=500)
@given(st.binary(max_size=64))
def test_fuzz_random_bytes(data):
    try:
        parse_idx(data)
    except IdxError:
        pass


@settings(max_examples=300)
@given(st.integers(0, len(IMAGE_2X2) - 1), st.integers(0, 255), st.integers(0, len(IMAGE_2X2)))
def test_fuzz_mutated_fixture(pos, value, cut):
    data = bytearray(IMAGE_2X2)
    data[pos] = value
    try:
        out = parse_idx(bytes(data[:cut]))
    except IdxError:
        return
    assert out.size == cut - 16


def _images(labels, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (len(labels), 2, 2), dtype=np.uint8)


def test_split_stream_partition_and_histograms():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 10, 500)
    labels[:10] = np.arange(10)
    images = _images(labels)
    stream = build_split_stream(images, labels, 5, 2)
    assert [t.classes.tolist() for t in stream.tasks] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    assert sum(t.train_x.shape[0] for t in stream.tasks) == 500
    source = np.bincount(labels, minlength=10)
    for t in stream.tasks:
        hist = np.bincount(t.train_y, minlength=10)
        expected = np.zeros(10, int)
        expected[t.classes] = source[t.classes]
        assert np.array_equal(hist, expected)


def test_split_stream_scaling_and_order():
    labels = np.array([1, 0, 1, 0, 1])
    images = _images(labels, 2)
    stream = build_split_stream(images, labels, 1, 2)
    t = stream.tasks[0]
    np.testing.assert_array_equal(t.train_x, images.reshape(5, -1) / 255.0)
    assert t.train_x.min() >= 0.0 and t.train_x.max() <= 1.0
    # per-class order is the source order
    assert t.train_y.tolist() == labels.tolist()


def test_split_stream_label_errors():
    with pytest.raises(LabelOutOfRange):
        build_split_stream(_images([0, 1, 12]), np.array([0, 1, 12]), 1, 2)
    with pytest.raises(LabelOutOfRange):
        build_split_stream(_images([0, 0]), np.array([0, 0]), 1, 2)


def test_synthetic_partition():
    assert [p.tolist() for p in contiguous_partition(10, 5)] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    stream = generate_synthetic(SyntheticSpec())
    assert [t.classes.tolist() for t in stream.tasks] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    assert stream.tasks[0].train_x.shape == (400, 32)
    assert stream.tasks[0].test_x.shape == (400, 32)


def test_synthetic_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=5))
    b = generate_synthetic(SyntheticSpec(seed=5))
    c = generate_synthetic(SyntheticSpec(seed=6))
    assert all(np.array_equal(x.train_x, y.train_x) for x, y in zip(a.tasks, b.tasks))
    assert not np.array_equal(a.tasks[0].train_x, c.tasks[0].train_x)


def test_synthetic_means_on_sphere_and_small_sigma_collapse():
    spec = SyntheticSpec(num_classes=4, num_tasks=2, train_per_class=50, test_per_class=50,
                         radius=4.0, sigma=1e-9, seed=7)
    stream = generate_synthetic(spec, RngStream(7))
    for t in stream.tasks:
        for c in t.classes:
            rows = np.concatenate([t.train_x[t.train_y == c], t.test_x[t.test_y == c]])
            assert np.ptp(rows, axis=0).max() < 1e-7
            assert np.linalg.norm(rows.mean(axis=0)) == pytest.approx(4.0, abs=1e-7)


def test_synthetic_train_test_disjoint():
    stream = generate_synthetic(SyntheticSpec(seed=8))
    for t in stream.tasks:
        train = {r.tobytes() for r in t.train_x}
        assert not any(r.tobytes() in train for r in t.test_x)


def test_synthetic_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(num_classes=10, num_tasks=3).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(sigma=0.0).validate()


def test_separable_limit_reaches_full_accuracy():
    res = run_experiment(RunConfig.from_dict({
        "num_classes": 4, "num_tasks": 1, "sigma": 1e-6, "radius": 4.0, "input_dim": 8,
        "train_per_class": 30, "test_per_class": 30, "hidden": [32], "feature_dim": 8,
        "epochs": 3, "seed": 9}))
    assert res.final_accuracy == 100.0


@pytest.fixture(scope="module")
def result():
    return run_experiment(RunConfig.from_dict({
        "variant": "gaussian", "hidden": [16], "feature_dim": 8, "input_dim": 6,
        "train_per_class": 20, "test_per_class": 10, "epochs": 1, "seed": 10}))


def test_write_read_round_trip(tmp_path, result):
    jpath, cpath = write_result(result, tmp_path / "r")
    again = read_result(jpath)
    assert again.to_dict() == result.to_dict()
    assert result_to_json(again) == jpath.read_text()


def test_floats_survive_exactly(tmp_path, result):
    write_result(result, tmp_path / "r")
    again = read_result(tmp_path / "r.json")
    a = np.array(result.diagnostics["old_class_gradients"])
    b = np.array(again.diagnostics["old_class_gradients"])
    assert np.array_equal(a, b)


def test_csv_layout(result):
    text = result_to_csv(result)
    assert "\r" not in text
    rows = list(csv.reader(io.StringIO(text)))
    assert len(rows) == len(result.boundaries) + 1
    assert rows[0][:2] == ["step", "task"]
    assert float(rows[-1][2]) == result.accuracy_matrix[-1][0]


def test_identical_runs_identical_json(tmp_path, result):
    cfg = RunConfig.from_dict({
        "variant": "gaussian", "hidden": [16], "feature_dim": 8, "input_dim": 6,
        "train_per_class": 20, "test_per_class": 10, "epochs": 1, "seed": 10})
    write_result(run_experiment(cfg), tmp_path / "a")
    write_result(run_experiment(cfg), tmp_path / "b")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_schema_mismatch(tmp_path, result):
    doc = result.to_dict()
    doc["schema_version"] = 99
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaMismatch):
        read_result(tmp_path / "bad.json")


def test_result_has_resolved_perturber(result):
    p = result.config["perturber"]
    assert p["variant"] == "gaussian" and p["lambda"] == 2.0 and p["ball_radius"] == 1.0
    assert isinstance(result, ExperimentResult)
