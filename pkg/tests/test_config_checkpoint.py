import struct

import numpy as np
import pytest

from wotlab.checkpoint import load_checkpoint, save_checkpoint
from wotlab.config import TrainConfig, config_to_dict, dump_config, parse_config, parse_config_text
from wotlab.errors import CheckpointError, ConfigError
from wotlab.models import build_model, default_cnn_spec


class TestConfig:
    def test_empty_file_takes_defaults(self):
        cfg = parse_config_text("")
        assert cfg == TrainConfig()
        assert cfg.wot.enabled is False and cfg.wot.m == 400 and cfg.wot.k == 4
        assert cfg.optim.momentum == 0.9 and cfg.optim.weight_decay == 5e-4 and cfg.batch_size == 128

    def test_empty_wot_table_is_plain_at(self):
        assert parse_config_text("[wot]\n").wot.enabled is False

    def test_start_defaults_to_first_decay(self):
        assert parse_config_text("epochs = 40").first_decay_epoch() == 20

    @pytest.mark.parametrize("text, key", [
        ("[wot]\nm = 0", "wot.m"),
        ("[wot]\nk = 0", "wot.k"),
        ("[wot]\nmode = 'x'", "wot.mode"),
        ("baseline = 'awp'", "baseline"),
        ("[loss]\nkind = 'hinge'", "loss.kind"),
    ])
    def test_invalid_values(self, text, key):
        with pytest.raises(ConfigError, match=key):
            parse_config_text(text)

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="wot.gaps"):
            parse_config_text("[wot]\ngaps = 3")

    def test_type_mismatch_is_named(self):
        with pytest.raises(ConfigError, match="optim.lr"):
            parse_config_text("[optim]\nlr = 'fast'")
        with pytest.raises(ConfigError, match="wot.enabled"):
            parse_config_text("[wot]\nenabled = 1")

    def test_malformed_toml(self):
        with pytest.raises(ConfigError):
            parse_config_text("[wot\n")

    def test_round_trip(self, tmp_path):
        text = """
seed = 3
epochs = 40
baseline = "ema"
[data]
name = "cifar10"
train_files = ["a.bin", "b.bin"]
[model]
kind = "cnn"
input_shape = [3, 32, 32]
[[model.conv]]
channels = 8
kernel = 4
stride = 2
[loss]
kind = "trades"
beta = 3.0
[wot]
enabled = true
mode = "w"
m = 100
[[attack.eval]]
norm = "l2"
epsilon = 0.5
steps = 20
"""
        cfg = parse_config_text(text)
        (tmp_path / "c.toml").write_text(dump_config(cfg))
        again = parse_config(tmp_path / "c.toml")
        assert again == cfg
        assert config_to_dict(again) == config_to_dict(cfg)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.toml")


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path):
        w = build_model(default_cnn_spec(), 1).params
        path = save_checkpoint(tmp_path / "m.wotc", w, {"seed": 1, "epoch": 7})
        return w, path

    def test_round_trip_bit_identical(self, saved):
        w, path = saved
        back, meta = load_checkpoint(path)
        assert back.values.tobytes() == w.values.tobytes() and back.layout == w.layout
        assert meta["seed"] == 1 and meta["epoch"] == 7

    def test_header_layout(self, saved):
        w, path = saved
        raw = path.read_bytes()
        assert raw[:4] == b"WOTC"
        version, mlen = struct.unpack("<II", raw[4:12])
        assert version == 1
        assert struct.unpack("<Q", raw[12 + mlen:20 + mlen])[0] == len(w)
        assert len(raw) == 20 + mlen + 4 * len(w)

    def test_flipped_magic(self, saved):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_version(self, saved):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, saved):
        _, path = saved
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_count_mismatch_with_layout(self, saved):
        w, path = saved
        raw = bytearray(path.read_bytes())
        mlen = struct.unpack("<I", raw[8:12])[0]
        raw[12 + mlen:20 + mlen] = struct.pack("<Q", len(w) - 1)
        path.write_bytes(bytes(raw[:-4]))
        with pytest.raises(CheckpointError, match="layout"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nothing.wotc")


def test_shipped_quickstart_config_parses():
    from pathlib import Path
    cfg = parse_config(Path(__file__).parent.parent / "configs" / "quickstart.toml")
    assert cfg.wot.enabled and cfg.wot.m == 5 and cfg.epochs == 6
