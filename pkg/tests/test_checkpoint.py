"""Tests for checkpoint serialization, content checksums, and the
adapter/base-model binding contract."""

import json

import numpy as np
import pytest
import torch

from skiperase.adapter import init_epr
from skiperase.checkpoint import (
    file_checksum,
    load_adapter,
    load_checkpoint,
    load_classifier,
    load_model,
    param_checksum,
    save_adapter,
    save_checkpoint,
    save_classifier,
    save_model,
    tensor_checksum,
)
from skiperase.errors import PreconditionError
from skiperase.unet import UNetConfig, build_unet


class TestChecksums:
    def test_content_checksum_is_container_independent(self, tmp_path):
        """Re-serializing the same tensors yields the same content checksum
        even though the archive bytes can differ."""
        tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
                   "b": np.ones(4, dtype=np.float64)}
        c1 = save_checkpoint(tmp_path / "x.npz", tensors, {"kind": "test"})
        c2 = save_checkpoint(tmp_path / "y.npz", tensors, {"kind": "test"})
        assert c1 == c2 == tensor_checksum(tensors)

    def test_checksum_sensitive_to_name_dtype_shape_value(self):
        base = {"w": np.zeros((2, 2), dtype=np.float32)}
        ref = tensor_checksum(base)
        assert tensor_checksum({"v": base["w"]}) != ref
        assert tensor_checksum({"w": base["w"].astype(np.float64)}) != ref
        assert tensor_checksum({"w": base["w"].reshape(4)}) != ref
        bumped = base["w"].copy()
        bumped[0, 0] = 1e-7
        assert tensor_checksum({"w": bumped}) != ref

    def test_checksum_order_invariant(self):
        a = np.arange(3, dtype=np.float32)
        b = np.arange(4, dtype=np.float32)
        assert tensor_checksum({"a": a, "b": b}) == tensor_checksum({"b": b, "a": a})

    def test_param_checksum_detects_single_change(self, tiny_model):
        import copy
        clone = copy.deepcopy(tiny_model)
        assert param_checksum(clone) == param_checksum(tiny_model)
        with torch.no_grad():
            next(clone.parameters()).add_(1e-6)
        assert param_checksum(clone) != param_checksum(tiny_model)

    def test_file_checksum(self, tmp_path):
        p = tmp_path / "blob.bin"
        p.write_bytes(b"hello world")
        import hashlib
        assert file_checksum(p) == hashlib.sha256(b"hello world").hexdigest()


class TestCheckpointIO:
    def test_roundtrip(self, tmp_path):
        tensors = {"w": torch.randn(3, 4, generator=torch.Generator().manual_seed(0))}
        save_checkpoint(tmp_path / "c.npz", tensors, {"note": "x"})
        back, meta = load_checkpoint(tmp_path / "c.npz")
        assert np.array_equal(back["w"], tensors["w"].numpy())
        assert meta["note"] == "x"
        assert meta["format_version"] == 1

    def test_missing_file_and_sidecar(self, tmp_path):
        with pytest.raises(PreconditionError):
            load_checkpoint(tmp_path / "absent.npz")
        save_checkpoint(tmp_path / "c.npz", {"w": np.zeros(2)}, {})
        (tmp_path / "c.npz.json").unlink()
        with pytest.raises(PreconditionError):
            load_checkpoint(tmp_path / "c.npz")

    def test_tampered_archive_refused(self, tmp_path):
        save_checkpoint(tmp_path / "c.npz", {"w": np.zeros(2)}, {})
        np.savez(tmp_path / "c.npz", w=np.ones(2))  # overwrite archive only
        with pytest.raises(PreconditionError):
            load_checkpoint(tmp_path / "c.npz")


class TestModelIO:
    def test_model_roundtrip_bit_exact(self, tiny_model, tiny_sched, tmp_path):
        save_model(tmp_path / "m.npz", tiny_model, tiny_sched)
        back, sched, meta = load_model(tmp_path / "m.npz")
        assert param_checksum(back) == param_checksum(tiny_model)
        assert sched.T == tiny_sched.T
        assert np.array_equal(sched.betas, tiny_sched.betas)
        assert meta["kind"] == "base_unet"

    def test_wrong_kind_refused(self, tmp_path, tiny_model, tiny_sched):
        save_checkpoint(tmp_path / "c.npz", {"w": np.zeros(2)}, {"kind": "other"})
        with pytest.raises(PreconditionError):
            load_model(tmp_path / "c.npz")


class TestAdapterBinding:
    def test_adapter_roundtrip(self, tiny_model, tmp_path):
        adapter = init_epr(tiny_model, "cross_attention_only", "disk")
        gen = torch.Generator().manual_seed(8)
        with torch.no_grad():
            for conv in adapter.zero_convs:
                conv.weight.copy_(0.1 * torch.randn(conv.weight.shape, generator=gen))
        save_adapter(tmp_path / "a.npz", adapter, tiny_model)
        back, meta = load_adapter(tmp_path / "a.npz", tiny_model)
        assert param_checksum(back) == param_checksum(adapter)
        assert meta["target_concept"] == "disk"
        assert meta["strategy"] == "cross_attention_only"

    def test_refuses_mismatched_base(self, tiny_model, tmp_path):
        adapter = init_epr(tiny_model, "full", "disk")
        save_adapter(tmp_path / "a.npz", adapter, tiny_model)
        other = build_unet(UNetConfig(image_size=16, base_channels=8,
                                      concepts=tiny_model.cfg.concepts),
                           seed=99)
        with pytest.raises(PreconditionError):
            load_adapter(tmp_path / "a.npz", other)


class TestClassifierIO:
    def test_classifier_roundtrip(self, small_classifier, small_dataset, tmp_path):
        save_classifier(tmp_path / "clf.npz", small_classifier)
        back = load_classifier(tmp_path / "clf.npz")
        assert back.concept_ids == small_classifier.concept_ids
        assert back.holdout_accuracy == small_classifier.holdout_accuracy
        _, hold = small_dataset.split(0.1)
        assert np.array_equal(back.predict(hold.images),
                              small_classifier.predict(hold.images))
        assert np.allclose(back.prototypes, small_classifier.prototypes)
