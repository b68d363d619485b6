import struct

import pytest
import torch

from app.core.config import CompressorConfig, DenoiserConfig, ModelConfig
from app.core.exceptions import CheckpointError, ModelMismatchError
from app.models.diffpcc import DiffusionPointCodec, count_parameters
from app.services.checkpoint import load_checkpoint, read_manifest, save_checkpoint


def width_config(C: int) -> ModelConfig:
    return ModelConfig(
        compressor=CompressorConfig(C=C, C_z=8, S=4, k_enc=4),
        denoiser=DenoiserConfig(C=C, S=4, k=4, heads=4),
        T=10,
    )


def expected_parameters(C: int, C_z: int, S: int, vocab: int) -> int:
    """Tally of every layer, written out from the architecture."""

    def linear(n_in, n_out):
        return n_in * n_out + n_out

    stem = linear(3, 64) + linear(64, 128) + linear(128, C)
    density = 28  # per channel with filters (3, 3): 15 matrix, 7 bias, 6 factor entries
    attention = 4 * C * C + 4 * C
    adaln = 2 * linear(C, C)

    compressor = (
        stem
        + density * C
        + linear(C, C)  # detail group embedding
        + linear(C, C)
        + linear(C, C_z)  # hyper encoder
        + linear(C_z, C)
        + linear(C, 2 * S * C)  # hyper decoder
        + density * C_z
    )
    denoiser = (
        stem
        + 2 * linear(C, C)  # time MLP
        + linear(2, C)
        + linear(C, C)  # shape projection
        + (vocab + 1) * C
        + adaln
        + linear(C, C)  # token group embedding
        + attention
        + adaln
        + attention
        + linear(2 * C, C)
        + linear(C, 3)
    )
    return compressor + denoiser


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path, toy_model, toy_train_config):
        first = save_checkpoint(toy_model, tmp_path / "a.ckpt", toy_train_config, step=3)
        model, manifest = load_checkpoint(first)
        second = save_checkpoint(
            model, tmp_path / "b.ckpt", manifest.train_config, step=manifest.step
        )
        assert first.read_bytes() == second.read_bytes()
        for name, tensor in toy_model.state_dict().items():
            assert torch.equal(model.state_dict()[name], tensor)
        assert manifest.step == 3
        assert manifest.train_config == toy_train_config
        assert manifest.model == toy_model.config

    def test_width_mismatch(self, tmp_path):
        path = save_checkpoint(DiffusionPointCodec(width_config(48)), tmp_path / "c48.ckpt")
        with pytest.raises(ModelMismatchError):
            load_checkpoint(path, expected=width_config(96))
        model, _ = load_checkpoint(path, expected=width_config(48))
        assert model.config.compressor.C == 48

    def test_parameter_tally(self, toy_model):
        assert count_parameters(toy_model) == expected_parameters(C=12, C_z=4, S=4, vocab=8)

    def test_truncated(self, toy_checkpoint):
        data = toy_checkpoint.read_bytes()
        toy_checkpoint.write_bytes(data[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(toy_checkpoint)

    def test_unknown_version(self, toy_checkpoint):
        data = toy_checkpoint.read_bytes()
        manifest, base = read_manifest(data)
        bumped = manifest.model_copy(update={"format_version": 99})
        header = bumped.model_dump_json(by_alias=True).encode()
        toy_checkpoint.write_bytes(struct.pack("<I", len(header)) + header + data[base:])
        with pytest.raises(CheckpointError):
            load_checkpoint(toy_checkpoint)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
