import math
import struct

import numpy as np
import pytest

from app.errors import ConfigurationError, FormatError, NumericalAbortError, TruncationError, UnsupportedVersionError
from app.model import PROTOTYPES
from app.schemas import EncoderConfig, TrainConfig
from app.trainer import (
    CHECKPOINT_MAGIC,
    cosine_lr,
    epoch_seed,
    initial_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
)
from app.utils import config_to_text

STEPS_PER_EPOCH = 8


def _assert_same_state(a, b):
    ta, tb = a.tensors(), b.tensors()
    assert list(ta) == list(tb)
    for name in ta:
        np.testing.assert_array_equal(ta[name], tb[name], err_msg=name)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 0.1) == pytest.approx(0.1)
        assert cosine_lr(99, 100, 0.1) == pytest.approx(1e-4)

    def test_monotone(self):
        values = [cosine_lr(s, 50, 0.2) for s in range(50)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_single_step_run(self):
        assert cosine_lr(0, 1, 0.1) == 0.1

    def test_epoch_seed_is_stable(self):
        assert epoch_seed(3, 4) == epoch_seed(3, 4)
        assert epoch_seed(3, 4) != epoch_seed(3, 5)


class TestTrain:
    def test_metrics_per_step(self, small_corpus, small_config):
        seen = []
        result = train(small_corpus, small_config, metrics_sink=seen.append)
        assert len(result.metrics) == 2 * STEPS_PER_EPOCH
        assert seen == result.metrics
        assert [r.iter for r in result.metrics] == list(range(16))
        assert [r.epoch for r in result.metrics] == [0] * 8 + [1] * 8
        assert result.checkpoint.iteration == 16
        for record in result.metrics:
            assert math.isfinite(record.loss)
            assert 0.0 <= record.code_entropy <= math.log(small_config.k_prototypes) + 1e-9

    def test_queue_fill_reported_before_step(self, small_corpus, small_config):
        fills = [r.queue_fill for r in train(small_corpus, small_config, max_steps=4).metrics]
        assert fills == [0, 16, 32, 32]

    def test_identical_runs_are_bit_identical(self, small_corpus, small_config):
        a = train(small_corpus, small_config)
        b = train(small_corpus, small_config)
        _assert_same_state(a.checkpoint, b.checkpoint)
        assert [r.loss for r in a.metrics] == [r.loss for r in b.metrics]

    def test_prototypes_frozen_for_first_epoch(self, small_corpus, small_config):
        init = initial_checkpoint(small_config)
        frozen = train(small_corpus, small_config, max_steps=STEPS_PER_EPOCH)
        np.testing.assert_array_equal(frozen.checkpoint.bank.c, init.bank.c)
        assert not np.array_equal(frozen.checkpoint.encoder.params["head.1.weight"], init.encoder.params["head.1.weight"])
        moved = train(small_corpus, small_config, max_steps=STEPS_PER_EPOCH + 1)
        assert not np.array_equal(moved.checkpoint.bank.c, init.bank.c)
        np.testing.assert_allclose(np.linalg.norm(moved.checkpoint.bank.c, axis=1), 1.0, atol=1e-12)

    def test_no_freeze(self, small_corpus, small_config):
        config = small_config.model_copy(update={"prototype_freeze_iterations": 0})
        init = initial_checkpoint(config)
        result = train(small_corpus, config, max_steps=1)
        assert not np.array_equal(result.checkpoint.bank.c, init.bank.c)

    def test_zero_learning_rate_keeps_parameters(self, small_corpus, small_config):
        config = small_config.model_copy(update={"base_lr": 0.0})
        init = initial_checkpoint(config)
        result = train(small_corpus, config, max_steps=10)
        for name, value in init.encoder.params.items():
            np.testing.assert_array_equal(result.checkpoint.encoder.params[name], value)
        # перенормировка уже единичных строк может сдвинуть последний бит
        np.testing.assert_allclose(result.checkpoint.bank.c, init.bank.c, rtol=0, atol=1e-15)

    def test_input_dims_must_match_corpus(self, small_corpus, small_config):
        config = small_config.model_copy(update={"encoder": EncoderConfig(input_dims=(7, 5), hidden_dims=[12], embed_dim=6)})
        with pytest.raises(ConfigurationError):
            train(small_corpus, config)

    def test_needs_config_or_checkpoint(self, small_corpus):
        with pytest.raises(ConfigurationError):
            train(small_corpus)


class TestResume:
    def test_resume_matches_uninterrupted_run(self, small_corpus, small_config, tmp_path):
        full = train(small_corpus, small_config)
        partial = train(small_corpus, small_config, max_steps=11)
        path = tmp_path / "mid.mmck"
        save_checkpoint(partial.checkpoint, path)
        resumed = train(small_corpus, resume_from=load_checkpoint(path))
        assert [r.model_dump() for r in partial.metrics + resumed.metrics] == [r.model_dump() for r in full.metrics]
        _assert_same_state(resumed.checkpoint, full.checkpoint)

    def test_resume_does_not_mutate_source(self, small_corpus, small_config):
        partial = train(small_corpus, small_config, max_steps=3)
        before = partial.checkpoint.copy()
        train(small_corpus, resume_from=partial.checkpoint, max_steps=2)
        _assert_same_state(partial.checkpoint, before)


class TestCheckpointFile:
    def test_round_trip_is_bit_exact(self, small_corpus, small_config, tmp_path):
        result = train(small_corpus, small_config, max_steps=5)
        first, second = tmp_path / "a.mmck", tmp_path / "b.mmck"
        save_checkpoint(result.checkpoint, first)
        loaded = load_checkpoint(first)
        _assert_same_state(loaded, result.checkpoint)
        assert loaded.config == small_config
        save_checkpoint(loaded, second)
        assert first.read_bytes() == second.read_bytes()

    def test_header(self, small_config, tmp_path):
        path = tmp_path / "init.mmck"
        save_checkpoint(initial_checkpoint(small_config), path)
        data = path.read_bytes()
        assert data[:4] == CHECKPOINT_MAGIC
        assert int.from_bytes(data[4:8], "little") == 1

    def test_unsupported_version(self, small_config, tmp_path):
        path = tmp_path / "init.mmck"
        save_checkpoint(initial_checkpoint(small_config), path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(UnsupportedVersionError) as err:
            load_checkpoint(path)
        assert err.value.offset == 4

    def test_truncated(self, small_config, tmp_path):
        path = tmp_path / "init.mmck"
        save_checkpoint(initial_checkpoint(small_config), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncationError):
            load_checkpoint(path)

    def test_tensor_names(self, small_config):
        names = set(initial_checkpoint(small_config).tensors())
        assert {PROTOTYPES, "queue.rows", "state.queue", "state.iteration", "momentum.prototypes"} <= names
        assert "encoder.adapter.0.weight" in names and "momentum.head.1.bias" in names

    def test_oversized_shape_is_format_error(self, tmp_path):
        text = config_to_text(TrainConfig()).encode("utf-8")
        name = b"prototypes"
        header = CHECKPOINT_MAGIC + struct.pack("<II", 1, len(text)) + text + struct.pack("<II", 1, len(name)) + name
        path = tmp_path / "huge.mmck"
        path.write_bytes(header + struct.pack("<IIII", 3, 2**31, 2**31, 2**31))
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert err.value.offset == len(header) + 4
        assert "prototypes" in str(err.value)
        assert err.value.exit_code == 1


def test_non_finite_parameters_abort(small_corpus, small_config):
    ckpt = train(small_corpus, small_config, max_steps=2).checkpoint
    ckpt.encoder.params["head.0.weight"][0, 0] = np.nan
    with pytest.raises(NumericalAbortError) as err:
        train(small_corpus, resume_from=ckpt)
    assert err.value.iteration == 2
    assert err.value.exit_code == 3
    assert len(err.value.batch_indices) == small_config.batch_size


def test_presets():
    assert TrainConfig.preset("desk") == TrainConfig()
    video = TrainConfig.preset("video")
    assert (video.k_prototypes, video.loss.queue_length, video.batch_size, video.epochs) == (3000, 1920, 24, 350)
    segmentation = TrainConfig.preset("segmentation")
    assert (segmentation.k_prototypes, segmentation.loss.sinkhorn.epsilon, segmentation.base_lr) == (50, 0.03, 2e-4)
    with pytest.raises(ValueError):
        TrainConfig.preset("nope")
