import numpy as np
import pytest

from chl.checkpoint import (
    NO_PARENT,
    Checkpoint,
    file_hash,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from chl.encoder import EncoderConfig, init_params
from chl.errors import DataError


def sample_checkpoint(stage="pretrain"):
    cfg = EncoderConfig(8, (2, 3), 4)
    tensors = init_params(cfg, np.random.default_rng(0))
    tensors["cls1.w"] = np.arange(6.0).reshape(2, 3)
    return Checkpoint(stage, 7, 42, cfg, tensors, {"loss_history": [1.5, 0.25]}, parent_hash="cd" * 32)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ckpt = sample_checkpoint()
        path = tmp_path / "a.ckpt"
        digest = save_checkpoint(path, ckpt)
        assert digest == file_hash(path)
        back = load_checkpoint(path)
        assert (back.stage, back.epoch, back.rng_seed, back.parent_hash) == ("pretrain", 7, 42, "cd" * 32)
        assert back.encoder_config == ckpt.encoder_config
        assert back.metadata == ckpt.metadata
        assert list(back.tensors) == list(ckpt.tensors)
        for name, value in ckpt.tensors.items():
            np.testing.assert_array_equal(back.tensors[name], value)
        assert to_bytes(back) == to_bytes(ckpt)

    def test_encoder_and_head_split(self):
        ckpt = sample_checkpoint()
        assert list(ckpt.head_params()) == ["cls1.w"]
        assert "cls1.w" not in ckpt.encoder_params()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(64))
        with pytest.raises(DataError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_bad_stage(self):
        with pytest.raises(ValueError):
            sample_checkpoint("warmup")

    def test_default_parent(self):
        ckpt = Checkpoint("relax", 0, 0, EncoderConfig(8, (2,), 4), {})
        assert ckpt.parent_hash == NO_PARENT
