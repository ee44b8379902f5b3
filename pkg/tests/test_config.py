"""Tests for flat configuration loading."""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion import config  # noqa: E402
from sparsemotion.config import load_settings, settings_from_flat, worker_count  # noqa: E402
from sparsemotion.errors import ValidationError  # noqa: E402


def test_defaults_file_matches_dataclass_defaults():
    settings = load_settings()
    assert settings == settings_from_flat({})


def test_precedence_defaults_then_file_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("stride: 4\nN: 3\nlr: 0.001\n")
    settings = load_settings(path, {"N": 2})
    assert settings.run.stride == 4
    assert settings.run.chunk_len == 2
    assert settings.run.lr == pytest.approx(1e-3)


def test_none_overrides_are_ignored():
    assert load_settings(None, {"stride": None}).run.stride == 6


def test_unknown_key_is_a_validation_error():
    with pytest.raises(ValidationError, match="unknown config key 'strides'"):
        settings_from_flat({"strides": 4})


def test_wrong_type_is_a_validation_error():
    with pytest.raises(ValidationError, match="stride"):
        settings_from_flat({"stride": "fast"})
    with pytest.raises(ValidationError):
        settings_from_flat({"tie_parts": "maybe"})


def test_strings_from_flags_are_coerced():
    s = settings_from_flat({"stride": "8", "tau": "0.3", "tie_parts": "true"})
    assert s.run.stride == 8
    assert s.run.tau == pytest.approx(0.3)
    assert s.interp.tie_parts is True


def test_label_smoothing_reaches_both_networks():
    s = settings_from_flat({"label_smoothing": 0.2})
    assert s.run.label_smoothing == pytest.approx(0.2)
    assert s.interp.label_smoothing == pytest.approx(0.2)


@pytest.mark.parametrize(
    "flat",
    [
        {"tau": 1.5},
        {"stage": "s3"},
        {"stride": 0},
        {"d_model": 130, "n_heads": 4},
        {"top_k": 5, "n_experts": 4},
        {"lambda_v": -1.0},
    ],
)
def test_out_of_range_values_are_rejected(flat):
    with pytest.raises(ValidationError):
        settings_from_flat(flat)


def test_lambda_moe_is_zero_before_upcycling():
    assert settings_from_flat({"stage": "pretrain", "lambda_moe": 0.5}).run.effective_lambda_moe == 0.0
    assert settings_from_flat({"stage": "s1", "lambda_moe": 0.5}).run.effective_lambda_moe == 0.5


def test_flat_round_trip_uses_short_names():
    flat = settings_from_flat({"P": 7, "interp_d_model": 32, "interp_heads": 2}).to_flat()
    assert flat["P"] == 7
    assert flat["interp_d_model"] == 32
    assert "history_len" not in flat
    assert settings_from_flat(flat).to_flat() == flat


def test_missing_config_file(tmp_path):
    with pytest.raises(ValidationError):
        load_settings(tmp_path / "absent.yaml")


def test_config_file_must_be_a_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ValidationError):
        load_settings(path)


def test_worker_count_honours_env(monkeypatch):
    monkeypatch.setenv("UMO_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("UMO_THREADS", "0")
    assert worker_count() == 1
    monkeypatch.setenv("UMO_THREADS", "many")
    with pytest.raises(ValidationError):
        worker_count()


def test_defaults_path_points_at_repo_conf():
    assert config.DEFAULTS_PATH.name == "defaults.yaml"
    assert config.DEFAULTS_PATH.exists()
