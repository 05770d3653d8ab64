import json
import logging

import numpy as np
import pytest

from app.errors import ConfigurationError, FormatError, StorageError, TruncationError
from app.logger import setup_logging
from app.schemas import MetricsRecord, TrainConfig
from app.utils import (
    BinaryReader,
    BinaryWriter,
    append_json_line,
    apply_overrides,
    config_from_text,
    config_to_text,
    parse_config_text,
    write_bytes,
)


class TestConfigText:
    def test_sorted_and_newline_terminated(self):
        text = config_to_text(TrainConfig())
        lines = text.splitlines()
        assert lines == sorted(lines)
        assert text.endswith("\n")
        assert "loss.sinkhorn.epsilon=0.05" in lines
        assert "encoder.hidden_dims=64" in lines
        assert "prototype_freeze_iterations=" in lines

    def test_round_trip(self):
        config = TrainConfig(base_lr=0.1 + 0.2, prototype_freeze_iterations=7)
        assert config_from_text(config_to_text(config), TrainConfig) == config

    def test_comments_and_blank_lines(self):
        assert parse_config_text("# note\n\n epochs = 3 \n") == {"epochs": "3"}

    def test_line_without_equals(self):
        with pytest.raises(ConfigurationError):
            parse_config_text("epochs 3\n")

    def test_unknown_key_in_file(self):
        with pytest.raises(ConfigurationError):
            config_from_text("no_such_key=1\n", TrainConfig)

    def test_overrides(self):
        config = apply_overrides(TrainConfig(), {"k_prototypes": "8", "loss.temperature": "0.2"})
        assert config.k_prototypes == 8
        assert config.loss.temperature == 0.2

    def test_unknown_override(self):
        with pytest.raises(ConfigurationError):
            apply_overrides(TrainConfig(), {"loss.tau": "0.2"})

    def test_invalid_value(self):
        with pytest.raises(ConfigurationError):
            apply_overrides(TrainConfig(), {"momentum": "1.5"})


class TestBinary:
    def test_round_trip(self):
        writer = BinaryWriter()
        writer.raw(b"ABCD")
        writer.u32(7)
        writer.u8(1)
        writer.f64_array(np.array([1.5, -2.25]))
        writer.u32_array(np.array([3, 4]))
        reader = BinaryReader(writer.getvalue())
        reader.magic(b"ABCD")
        assert reader.u32() == 7
        assert reader.u8() == 1
        np.testing.assert_array_equal(reader.f64_array(2), [1.5, -2.25])
        np.testing.assert_array_equal(reader.u32_array(2), [3, 4])
        reader.expect_end()

    def test_truncation_reports_offset(self):
        reader = BinaryReader(b"ABCD\x01\x00")
        reader.magic(b"ABCD")
        with pytest.raises(TruncationError) as err:
            reader.u32("version")
        assert err.value.offset == 4
        assert "byte offset 4" in str(err.value)

    def test_trailing_bytes(self):
        reader = BinaryReader(b"\x00\x00")
        reader.u8()
        with pytest.raises(FormatError):
            reader.expect_end()

    def test_remaining(self):
        reader = BinaryReader(b"\x01\x00\x00\x00\xff")
        reader.u32("n")
        assert reader.remaining == 1


class TestWriteBytes:
    def test_overwrite_leaves_no_temporary_file(self, tmp_path):
        path = tmp_path / "out" / "model.mmck"
        write_bytes(path, b"first")
        write_bytes(path, b"second")
        assert path.read_bytes() == b"second"
        assert [p.name for p in path.parent.iterdir()] == ["model.mmck"]

    def test_failed_write_keeps_directory_clean(self, tmp_path):
        target = tmp_path / "work" / "taken"
        target.mkdir(parents=True)
        (target / "inside").write_text("x")
        with pytest.raises(StorageError):
            write_bytes(target, b"data")
        assert sorted(p.name for p in target.parent.iterdir()) == ["taken"]
        assert (target / "inside").read_text() == "x"


def test_append_json_line(tmp_path):
    path = tmp_path / "nested" / "metrics.jsonl"
    for i in range(2):
        append_json_line(path, MetricsRecord(iter=i, epoch=0, loss=1.0, lr=0.1, code_entropy=2.0, queue_fill=0))
    assert [json.loads(line)["iter"] for line in path.read_text().splitlines()] == [0, 1]


def test_append_to_directory_fails(tmp_path):
    with pytest.raises(StorageError):
        append_json_line(tmp_path, MetricsRecord(iter=0, epoch=0, loss=1.0, lr=0.1, code_entropy=2.0, queue_fill=0))


def test_setup_logging_writes_error_mirror(tmp_path):
    logger = setup_logging("unit", str(tmp_path))
    logging.getLogger("app.test").error("boom")
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert logger.name == "unit"
    assert "boom" in (tmp_path / "errors_unit.log").read_text(encoding="utf-8")
