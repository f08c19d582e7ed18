"""Checkpoint format: byte-identity round trips and manifest validation."""

import json

import numpy as np
import pytest

from trimlab.blocks import build_backbone, default_spec
from trimlab.checkpoint import (
    MAGIC,
    CheckpointError,
    deserialize,
    load_checkpoint,
    make_checkpoint,
    save_checkpoint,
    serialize,
)
from trimlab.masking import MaskSet


def small_model(seed=0, dtype=np.float32):
    spec = default_spec("conformer_t", num_outputs=3, feature_dim=12, d_model=8,
                        num_layers=2, num_heads=2, ffn_hidden=6,
                        conformer_conv_channels=5, head_hidden=7)
    return build_backbone(spec, seed=seed, dtype=dtype)


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, meta={"note": "x"})
        original = path.read_bytes()
        again = load_checkpoint(path).to_bytes()
        assert again == original

    def test_roundtrip_with_masks(self):
        model = small_model()
        masks = MaskSet.for_model(model)
        masks.by_id["layer0.ffn"].logits.data[...] = [1, -1, 2, -2, 3, -3]
        data = serialize(model, masks=masks)
        ckpt = deserialize(data)
        assert ckpt.has_masks()
        np.testing.assert_array_equal(ckpt.mask_logits()["layer0.ffn"], [1, -1, 2, -2, 3, -3])
        assert ckpt.to_bytes() == data

    def test_model_reconstruction(self):
        model = small_model(seed=3)
        model.freeze_encoder()
        ckpt = deserialize(serialize(model))
        back = ckpt.to_model()
        assert back.frozen
        assert back.spec.to_dict() == model.spec.to_dict()
        for name in model.params:
            np.testing.assert_array_equal(back.params[name].data, model.params[name].data)

    def test_float64_tensors(self):
        model = small_model(dtype=np.float64)
        back = deserialize(serialize(model)).to_model()
        assert back.params["head.w1"].dtype == np.float64

    def test_same_model_same_bytes(self):
        a, b = small_model(seed=5), small_model(seed=5)
        assert serialize(a) == serialize(b)


class TestValidation:
    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            deserialize(b"NOTMAGIC" + b"\x00" * 32)

    def test_truncated_header(self):
        data = serialize(small_model())
        with pytest.raises(CheckpointError):
            deserialize(data[:20])

    def test_out_of_bounds_offset(self):
        model = small_model()
        data = serialize(model)
        hlen = int.from_bytes(data[8:16], "little")
        header = json.loads(data[16 : 16 + hlen].decode())
        header["tensors"][0]["offset"] = 10**9
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        bad = MAGIC + len(hjson).to_bytes(8, "little") + hjson + data[16 + hlen :]
        with pytest.raises(CheckpointError, match="bounds"):
            deserialize(bad)

    def test_overlapping_tensors(self):
        model = small_model()
        data = serialize(model)
        hlen = int.from_bytes(data[8:16], "little")
        header = json.loads(data[16 : 16 + hlen].decode())
        header["tensors"][1]["offset"] = header["tensors"][0]["offset"]
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        bad = MAGIC + len(hjson).to_bytes(8, "little") + hjson + data[16 + hlen :]
        with pytest.raises(CheckpointError, match="overlap"):
            deserialize(bad)

    def test_missing_parameter_rejected_at_model_build(self):
        model = small_model()
        ckpt = make_checkpoint(model)
        del ckpt.arrays["head.w1"]
        with pytest.raises(CheckpointError, match="head.w1"):
            ckpt.to_model()
