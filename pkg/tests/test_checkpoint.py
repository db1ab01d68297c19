"""Checkpoint directory format: manifest + per-tensor binary blobs."""

import json

import numpy as np
import pytest
import torch

from updiff.checkpoint import load_checkpoint, save_checkpoint
from updiff.pipeline import load_bundle, make_untrained_bundle, save_bundle


class TestTensorBlobs:
    def test_round_trip_exact(self, tmp_path):
        tensors = {
            "layer.weight": torch.randn(4, 3, 2, 2),
            "layer.bias": torch.randn(4),
            "scale": torch.tensor(1.5),
        }
        save_checkpoint(tmp_path / "ckpt", {"kind": "test"}, tensors)
        manifest, loaded = load_checkpoint(tmp_path / "ckpt")
        assert manifest["kind"] == "test"
        assert manifest["format_version"] == 1
        for name, t in tensors.items():
            assert torch.equal(loaded[name], t)

    def test_blob_layout(self, tmp_path):
        save_checkpoint(tmp_path / "c", {}, {"w": torch.tensor([[1.0, 2.0], [3.0, 4.0]])})
        raw = (tmp_path / "c" / "w.bin").read_bytes()
        header, payload = raw.split(b"\n", 1)
        assert header == b"w (2,2) float32"
        assert np.frombuffer(payload, dtype="<f4").tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_manifest_is_json(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"seed": 7}, {})
        data = json.loads((tmp_path / "c" / "manifest").read_text())
        assert data["seed"] == 7

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope")

    def test_rejects_unsafe_names(self, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "c", {}, {"a/b": torch.zeros(1)})


class TestBundleRoundTrip:
    def test_inference_identical_after_reload(self, tiny_config, tmp_path):
        bundle = make_untrained_bundle(tiny_config, seed=3)
        with torch.no_grad():
            for p in bundle.denoiser.parameters():
                p.add_(0.01 * torch.randn_like(p))
        bundle.manifest = dict(bundle.manifest)
        save_bundle(tmp_path / "bundle", bundle)
        reloaded = load_bundle(tmp_path / "bundle")

        g = torch.Generator().manual_seed(0)
        z = torch.randn(1, 4, 4, 4, generator=g)
        pre = torch.randn(1, 3, 16, 16, generator=g)
        mask = (torch.rand(1, 1, 16, 16, generator=g) > 0.5).float()
        lt, lf, tx = bundle.conditioner.conditions(pre, mask)
        lt2, lf2, tx2 = reloaded.conditioner.conditions(pre, mask)
        assert torch.equal(lt, lt2)
        a = bundle.denoiser(z, 3, lt, lf, tx)
        b = reloaded.denoiser(z, 3, lt2, lf2, tx2)
        assert torch.equal(a, b)
        assert torch.equal(bundle.autoencoder.encode(pre), reloaded.autoencoder.encode(pre))

    def test_manifest_carries_interface_fields(self, tiny_config, tmp_path):
        bundle = make_untrained_bundle(tiny_config, seed=0)
        save_bundle(tmp_path / "bundle", bundle)
        manifest, _ = load_checkpoint(tmp_path / "bundle")
        assert manifest["kind"] == "diffusion"
        assert manifest["schedule"]["T"] == tiny_config.schedule.steps
        assert manifest["resolution"] == 16
        assert manifest["f"] == 4 and manifest["s"] == 4
        assert "checkpoint_id" in manifest

    def test_load_rejects_wrong_kind(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"kind": "autoencoder"}, {})
        with pytest.raises(ValueError):
            load_bundle(tmp_path / "c")
