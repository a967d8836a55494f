import numpy as np
import pytest

from triforge.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from triforge.config import Config, load_config, parse_channels, reference_text, save_config


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.w": rng.standard_normal((4, 5)),
        "b.bias": rng.standard_normal(7),
        "small": np.float32(rng.standard_normal((2, 2)).astype(np.float32)),
    }
    meta = {"kind": "vae", "stage": 1, "config": {"run.seed": 0}}
    path = tmp_path / "x.tfck"
    save_checkpoint(path, tensors, meta)
    back, meta2 = load_checkpoint(path)
    assert meta2 == meta
    for k, v in tensors.items():
        assert back[k].dtype == np.asarray(v).dtype
        assert np.array_equal(back[k], v)


def test_checkpoint_detects_corruption(tmp_path):
    path = tmp_path / "x.tfck"
    save_checkpoint(path, {"w": np.ones(16)}, {})
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "x.tfck"
    save_checkpoint(path, {"w": np.ones(3)}, {})
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # version field
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_bytes(b"JUNKxxxxxxxxxxxxx")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_checkpoint_float32_cast(tmp_path):
    path = tmp_path / "x.tfck"
    arr = np.random.default_rng(1).standard_normal(10)
    save_checkpoint(path, {"w": arr}, {}, cast_f32=True)
    back, _ = load_checkpoint(path)
    assert back["w"].dtype == np.float32
    np.testing.assert_array_equal(back["w"], arr.astype(np.float32))


def test_config_defaults_and_overrides():
    cfg = Config()
    flat = cfg.flat()
    assert flat["vae.triplane_res"] == 64
    assert flat["diffusion.guidance"] == 5.0
    cfg.set_key("vae.grid_res", "32")
    assert cfg.vae.grid_res == 32
    cfg.set_key("data.textured", "true")
    assert cfg.data.textured is True
    with pytest.raises(KeyError):
        cfg.set_key("vae.not_a_key", "1")
    with pytest.raises(KeyError):
        cfg.set_key("nosection.x", "1")
    with pytest.raises(KeyError):
        cfg.set_key("plainkey", "1")


def test_config_file_roundtrip(tmp_path):
    cfg = Config()
    cfg.vae.channels = 4
    cfg.run.seed = 123
    path = tmp_path / "c.cfg"
    save_config(cfg, path)
    back = load_config(path)
    assert back.flat() == cfg.flat()


def test_config_file_rejects_unknown(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("[vae]\nbogus = 3\n")
    with pytest.raises(KeyError):
        load_config(path)
    path.write_text("[nope]\nx = 3\n")
    with pytest.raises(KeyError):
        load_config(path)


def test_config_snapshot_roundtrip():
    cfg = Config()
    cfg.diffusion.guidance = 2.5
    cfg.data.textured = True
    snap = cfg.flat()
    back = Config.from_flat(snap)
    assert back.flat() == snap


def test_reference_text_covers_all_keys():
    text = reference_text()
    for key in Config().flat():
        section, name = key.split(".")
        assert f"[{section}]" in text
        assert f"{name} = " in text
    assert "#" in text  # every key carries a help line


def test_parse_channels():
    assert parse_channels("16,32,64") == (16, 32, 64)
