import json
import struct

import pytest
import torch
import torch.nn as nn

from checkpoint import CheckpointError, load_checkpoint, load_module_state, save_checkpoint, save_module


class TestContainer:

    def test_tensors_and_metadata_survive(self, tmp_path):
        tensors = {
            "w": torch.randn(3, 4, dtype=torch.float64),
            "steps": torch.arange(5),
            "flags": torch.tensor([True, False]),
        }
        path = save_checkpoint(tmp_path / "a.ckpt", tensors, {"kind": "test", "config": {"levels": 2}})
        loaded, metadata = load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for name, tensor in tensors.items():
            assert loaded[name].dtype == tensor.dtype
            assert torch.equal(loaded[name], tensor)
        assert metadata["kind"] == "test"
        assert metadata["config"] == {"levels": 2}

    def test_header_layout(self, tmp_path):
        path = save_checkpoint(tmp_path / "b.ckpt", {"x": torch.ones(2, dtype=torch.float32)})
        raw = path.read_bytes()
        (length,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + length])
        assert header["__metadata__"]["format"] == "gammaldm-ckpt"
        assert header["x"] == {"shape": [2], "dtype": "float32", "byte_offset": 0, "byte_length": 8}
        assert len(raw) == 8 + length + 8

    def test_unknown_version_rejected(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.ckpt", {"x": torch.ones(1)}, {"version": 99})
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "d.ckpt"
        header = json.dumps({"__metadata__": {"format": "other", "version": 1}}).encode()
        path.write_bytes(struct.pack("<Q", len(header)) + header)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_data_rejected(self, tmp_path):
        path = save_checkpoint(tmp_path / "e.ckpt", {"x": torch.ones(16)})
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_reserved_name(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "f.ckpt", {"__metadata__": torch.ones(1)})

    def test_module_state_roundtrip(self, tmp_path):
        source = nn.Sequential(nn.Conv2d(1, 2, 3), nn.BatchNorm2d(2))
        target = nn.Sequential(nn.Conv2d(1, 2, 3), nn.BatchNorm2d(2))
        save_module(tmp_path / "m.ckpt", source, {"kind": "toy"})
        metadata = load_module_state(tmp_path / "m.ckpt", target)
        assert metadata["kind"] == "toy"
        for (name, a), (_, b) in zip(source.state_dict().items(), target.state_dict().items()):
            assert torch.equal(a, b), name
