"""Tests for settings, presets and `key = value` run files."""

import pytest

from mcf_fusion.core.config import (
    format_key_value,
    get_preset,
    get_presets,
    get_settings,
    read_key_value_file,
)
from mcf_fusion.core.errors import ConfigurationError


class TestReadKeyValueFile:
    """Test the run-file reader."""

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# header\n\npreset = toy   # trailing note\nepochs=3\n")
        assert read_key_value_file(path) == {"preset": "toy", "epochs": "3"}

    def test_hash_inside_value_is_kept(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("checkpoint = runs/exp#3/ckpt\nhistory = runs/h#1.jsonl # last\n")
        entries = read_key_value_file(path)
        assert entries["checkpoint"] == "runs/exp#3/ckpt"
        assert entries["history"] == "runs/h#1.jsonl"

    def test_tab_before_hash_starts_comment(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 4\t# comment\n")
        assert read_key_value_file(path) == {"seed": "4"}

    def test_missing_equals(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("preset toy\n")
        with pytest.raises(ConfigurationError) as exc:
            read_key_value_file(path)
        assert exc.value.details["line"] == 1

    def test_duplicate_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(ConfigurationError) as exc:
            read_key_value_file(path)
        assert exc.value.details["key"] == "seed"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            read_key_value_file(tmp_path / "absent.cfg")

    def test_written_file_reads_back(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(format_key_value({"checkpoint": "out#2", "freeze": ["adapter_pe", "fg_block"]}))
        assert read_key_value_file(path) == {"checkpoint": "out#2", "freeze": "adapter_pe,fg_block"}


class TestPresets:
    """Test preset loading."""

    def test_shipped_presets(self):
        presets = get_presets()
        for name in (
            "emotic-mha", "emotic-sag", "caer-sag", "caer-mha", "fg-only", "vs-only",
            "person-only", "person-scene-late", "caer-face-only", "toy", "toy-xor",
        ):
            assert name in presets

    def test_preset_is_a_copy(self):
        get_preset("toy")["epochs"] = 999
        assert get_preset("toy")["epochs"] != 999

    def test_missing_file_falls_back(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MCF_PRESETS_PATH", str(tmp_path / "none.yaml"))
        get_settings.cache_clear()
        get_presets.cache_clear()
        assert {"emotic-mha", "caer-sag"} <= set(get_presets())

    def test_malformed_file(self, tmp_path, monkeypatch):
        path = tmp_path / "presets.yaml"
        path.write_text("toy: 3\n")
        monkeypatch.setenv("MCF_PRESETS_PATH", str(path))
        get_settings.cache_clear()
        get_presets.cache_clear()
        with pytest.raises(ConfigurationError):
            get_presets()
