import json
from pathlib import Path

import numpy as np
import pytest

from slv.datasets import (
    Dataset,
    DatasetRecord,
    load_dataset,
    load_detections,
    load_pseudo_labels,
    save_dataset,
    save_detections,
    save_pseudo_labels,
)
from slv.errors import DatasetFormatError
from slv.evaluation import Detection
from slv.geometry import Box
from slv.voting import Supervision

FIXTURES = Path(__file__).parent / "fixtures"


def small_dataset():
    records = [
        DatasetRecord(
            image_id="a",
            height=20,
            width=30,
            labels=np.array([1, 0]),
            proposals=[Box(0, 0, 10, 10), Box(5, 5, 20, 15)],
            features=np.array([[0.1, 0.2], [0.3, 0.4]]),
            scores=np.array([[0.5, 0.25], [0.0, 0.125]]),
            gt_boxes={0: [Box(1, 1, 9, 9)]},
        ),
        DatasetRecord(
            image_id="b",
            height=20,
            width=30,
            labels=np.array([0, 1]),
            proposals=[Box(2, 3, 7, 9)],
            features=np.array([[0.9, -0.5]]),
            scores=None,
            gt_boxes=None,
        ),
    ]
    return Dataset(records=records, num_classes=2, feature_dim=2)


class TestDatasetRoundTrip:
    def test_lossless(self, tmp_path):
        dataset = small_dataset()
        target = tmp_path / "ds.jsonl"
        save_dataset(dataset, target)
        loaded = load_dataset(target)
        assert loaded.num_classes == 2
        assert loaded.feature_dim == 2
        assert len(loaded) == 2
        for original, parsed in zip(dataset.records, loaded.records):
            assert parsed.image_id == original.image_id
            assert parsed.height == original.height and parsed.width == original.width
            assert np.array_equal(parsed.labels, original.labels)
            assert parsed.proposals == original.proposals
            if original.features is None:
                assert parsed.features is None
            else:
                assert np.array_equal(parsed.features, original.features)
            if original.scores is None:
                assert parsed.scores is None
            else:
                assert np.array_equal(parsed.scores, original.scores)
            assert parsed.gt_boxes == original.gt_boxes

    def test_save_load_save_is_byte_identical(self, tmp_path):
        first = tmp_path / "one.jsonl"
        second = tmp_path / "two.jsonl"
        save_dataset(small_dataset(), first)
        save_dataset(load_dataset(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_empty_dataset_file(self, tmp_path):
        target = tmp_path / "empty.jsonl"
        save_dataset(Dataset(records=[], num_classes=3), target)
        loaded = load_dataset(target)
        assert len(loaded) == 0
        assert loaded.num_classes == 3


class TestDatasetValidation:
    def _write(self, tmp_path, lines):
        target = tmp_path / "ds.jsonl"
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return target

    def test_out_of_bounds_proposal_clipped_with_warning(self, tmp_path, caplog):
        header = json.dumps({"schema": "slv/dataset", "version": 1, "num_classes": 1})
        record = json.dumps(
            {"id": "x", "height": 10, "width": 10, "labels": [1], "proposals": [[5, 5, 20, 20]]}
        )
        target = self._write(tmp_path, [header, record])
        with caplog.at_level("WARNING"):
            loaded = load_dataset(target)
        assert loaded.records[0].proposals == [Box(5, 5, 10, 10)]
        assert "clipped" in caplog.text

    def test_bad_labels_length_names_line_and_field(self, tmp_path):
        header = json.dumps({"schema": "slv/dataset", "version": 1, "num_classes": 2})
        record = json.dumps(
            {"id": "x", "height": 10, "width": 10, "labels": [1], "proposals": []}
        )
        target = self._write(tmp_path, [header, record])
        with pytest.raises(DatasetFormatError, match=r":2: field 'labels'"):
            load_dataset(target)

    def test_invalid_json_names_line(self, tmp_path):
        header = json.dumps({"schema": "slv/dataset", "version": 1, "num_classes": 1})
        target = self._write(tmp_path, [header, "{not json"])
        with pytest.raises(DatasetFormatError, match=r":2: invalid JSON"):
            load_dataset(target)

    def test_wrong_schema_rejected(self, tmp_path):
        target = self._write(tmp_path, [json.dumps({"schema": "other", "version": 1})])
        with pytest.raises(DatasetFormatError, match="expected schema"):
            load_dataset(target)

    def test_missing_header_rejected(self, tmp_path):
        target = tmp_path / "ds.jsonl"
        target.write_text("", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="header"):
            load_dataset(target)

    def test_duplicate_image_id_rejected(self, tmp_path):
        header = json.dumps({"schema": "slv/dataset", "version": 1, "num_classes": 1})
        record = json.dumps(
            {"id": "x", "height": 10, "width": 10, "labels": [1], "proposals": []}
        )
        target = self._write(tmp_path, [header, record, record])
        with pytest.raises(DatasetFormatError, match="duplicate image id"):
            load_dataset(target)

    def test_gt_outside_bounds_rejected(self, tmp_path):
        header = json.dumps({"schema": "slv/dataset", "version": 1, "num_classes": 1})
        record = json.dumps(
            {
                "id": "x",
                "height": 10,
                "width": 10,
                "labels": [1],
                "proposals": [],
                "gt": [{"class": 0, "box": [0, 0, 11, 5]}],
            }
        )
        target = self._write(tmp_path, [header, record])
        with pytest.raises(DatasetFormatError, match="gt"):
            load_dataset(target)

    def test_golden_fixture_roundtrips_byte_identical(self, tmp_path):
        src = FIXTURES / "eval_dataset.jsonl"
        loaded = load_dataset(src)
        assert len(loaded) == 3
        out = tmp_path / "copy.jsonl"
        save_dataset(loaded, out)
        assert out.read_bytes() == src.read_bytes()


class TestPseudoLabels:
    def test_roundtrip(self, tmp_path):
        items = [
            ("a", Supervision({0: [Box(1, 1, 5, 5)], 2: [Box(3, 3, 9, 9), Box(0, 0, 2, 2)]})),
            ("b", Supervision()),
        ]
        target = tmp_path / "labels.jsonl"
        save_pseudo_labels(items, target)
        loaded = load_pseudo_labels(target)
        assert [(i, s.boxes_by_class) for i, s in loaded] == [
            (i, s.boxes_by_class) for i, s in items
        ]

    def test_empty_supervision_keeps_record(self, tmp_path):
        target = tmp_path / "labels.jsonl"
        save_pseudo_labels([("only", Supervision())], target)
        lines = target.read_text().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[1]) == {"id": "only", "boxes": []}


class TestDetectionsFile:
    def test_roundtrip(self, tmp_path):
        dets = [
            Detection("a", 0, Box(0, 0, 5, 5), 0.75),
            Detection("b", 3, Box(1, 2, 3, 4), 0.125),
        ]
        target = tmp_path / "dets.jsonl"
        save_detections(dets, target)
        assert load_detections(target) == dets

    def test_missing_field_names_line(self, tmp_path):
        target = tmp_path / "dets.jsonl"
        target.write_text(
            json.dumps({"schema": "slv/detections", "version": 1})
            + "\n"
            + json.dumps({"id": "a", "class": 0, "box": [0, 0, 5, 5]})
            + "\n",
            encoding="utf-8",
        )
        with pytest.raises(DatasetFormatError, match=r":2: missing field 'score'"):
            load_detections(target)
