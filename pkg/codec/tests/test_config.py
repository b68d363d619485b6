from pathlib import Path

import pytest
from pydantic import ValidationError

from app.core.config import (
    CompressorConfig,
    DenoiserConfig,
    ModelConfig,
    Settings,
    get_settings,
    parse_key_value_file,
)
from app.core.exceptions import ConfigError


def write_config(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.conf"
    path.write_text(text, encoding="utf-8")
    return path


class TestKeyValueFile:
    def test_parses_comments_and_blank_lines(self, tmp_path):
        """Comments and blank lines are skipped; values keep their text form."""
        path = write_config(tmp_path, "# widths\nC = 48\n\nlambda = 0.25  # rate weight\n")
        assert parse_key_value_file(path) == {"C": "48", "lambda": "0.25"}

    def test_missing_equals_reports_line(self, tmp_path):
        path = write_config(tmp_path, "C = 48\nsteps 10\n")
        with pytest.raises(ConfigError) as info:
            parse_key_value_file(path)
        assert info.value.details["line"] == 2

    def test_duplicate_key_rejected(self, tmp_path):
        path = write_config(tmp_path, "C = 48\nC = 96\n")
        with pytest.raises(ConfigError):
            parse_key_value_file(path)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_key_value_file(tmp_path / "missing.conf")


class TestSettings:
    def test_defaults(self):
        settings = get_settings()
        model = settings.codec_model()
        assert model.compressor.C == 288
        assert model.compressor.C_z == 96
        assert model.compressor.S == 64
        assert model.denoiser.k == 8
        assert model.T == 200
        train = settings.training()
        assert train.lambda_ == 1.0
        assert train.lr == 1e-4
        assert train.lr_decay == 0.5
        assert train.lr_decay_every == 30000
        assert train.batch == 48

    def test_file_values_are_typed(self, tmp_path):
        text = "C = 48\nC_z = 16\nS = 16\nlambda = 0.1\nuse_chamfer = false\n"
        path = write_config(tmp_path, text)
        settings = get_settings(str(path))
        assert settings.C == 48
        assert settings.training().lambda_ == pytest.approx(0.1)
        assert settings.training().chamfer_weight == 0.0

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, "widht = 48\n")
        with pytest.raises(ConfigError):
            get_settings(str(path))

    def test_width_must_be_multiple_of_six(self):
        with pytest.raises(ConfigError):
            Settings(C=50).codec_model()

    def test_decay_outside_unit_interval(self):
        with pytest.raises(ConfigError):
            Settings(lr_decay=1.5).training()

    def test_environment_is_ignored(self, monkeypatch):
        monkeypatch.setenv("C", "12")
        assert Settings().C == 288


class TestModelConfig:
    def test_both_branches_disabled_rejected(self):
        with pytest.raises(ValidationError):
            CompressorConfig(use_shape_latent=False, use_detail_latent=False)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValidationError):
            DenoiserConfig(C=12, heads=5)

    def test_shared_widths(self):
        with pytest.raises(ValidationError):
            ModelConfig(compressor=CompressorConfig(C=12), denoiser=DenoiserConfig(C=18, heads=3))
