"""checkpoint container: bitwise round-trips, manifest validation."""

import numpy as np
import pytest

from attnfold import (AttachSpec, AttentionKind, FormatError, build_toy_resnet,
                      init_params, load_checkpoint, save_checkpoint)


@pytest.fixture
def model():
    spec = AttachSpec(kind=AttentionKind("se", reduction=2))
    g = build_toy_resnet(1, 4, 3, spec, image_size=6)
    return g, init_params(g, seed=0)


class TestRoundTrip:
    def test_tensors_bitwise_identical(self, model, tmp_path):
        g, p = model
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, g, p)
        g2, p2 = load_checkpoint(f)
        assert set(p2.values) == set(p.values)
        for name in p.values:
            assert p2.values[name].tobytes() == p.values[name].tobytes()
        assert p2.trainable == p.trainable

    def test_save_load_save_same_bytes(self, model, tmp_path):
        g, p = model
        f1, f2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(f1, g, p)
        g2, p2 = load_checkpoint(f1)
        save_checkpoint(f2, g2, p2)
        assert f1.read_bytes() == f2.read_bytes()

    def test_graph_survives(self, model, tmp_path):
        g, p = model
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, g, p)
        g2, _ = load_checkpoint(f)
        assert [n.name for n in g2.nodes] == [n.name for n in g.nodes]
        assert g2.input_shape == g.input_shape
        assert g2.classes == g.classes
        assert set(g2.slots) == set(g.slots)
        s = g2.slots["block0.asr0"]
        assert s.kind.variant == "se" and s.psi_mode == "learnable"

    def test_frozen_psi_not_trainable_after_load(self, tmp_path):
        spec = AttachSpec(kind=AttentionKind("ie"), psi_mode="frozen_constant",
                          psi_init=0.3)
        g = build_toy_resnet(1, 4, 3, spec, image_size=6)
        p = init_params(g, seed=1)
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, g, p)
        _, p2 = load_checkpoint(f)
        assert "block0.asr0.psi" not in p2.trainable
        assert "block0.asr0.gamma" in p2.trainable

    def test_parameterless_graph(self, tmp_path):
        from attnfold import LayerNode, ModelGraph, init_params
        g = ModelGraph(nodes=[LayerNode("input", "input")], input_shape=(4,),
                       classes=4)
        p = init_params(g, seed=0)
        f = tmp_path / "e.ckpt"
        save_checkpoint(f, g, p)
        g2, p2 = load_checkpoint(f)
        assert p2.values == {} and g2.input_shape == (4,)

    def test_negative_zero_and_subnormals_survive(self, model, tmp_path):
        g, p = model
        p.values["head.b"] = np.array([-0.0, 5e-324, 1.0])
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, g, p)
        _, p2 = load_checkpoint(f)
        assert p2.values["head.b"].tobytes() == p.values["head.b"].tobytes()


class TestManifestValidation:
    def test_bad_tag(self, tmp_path):
        f = tmp_path / "bad.ckpt"
        f.write_bytes(b"not-a-checkpoint 1\npayload 0\n")
        with pytest.raises(FormatError, match="format tag"):
            load_checkpoint(f)

    def test_truncated_payload(self, model, tmp_path):
        g, p = model
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, g, p)
        blob = f.read_bytes()
        f.write_bytes(blob[:-8])
        with pytest.raises(FormatError, match="payload"):
            load_checkpoint(f)

    def test_overlapping_offsets(self, model, tmp_path):
        g, p = model
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, g, p)
        blob = f.read_bytes()
        head, _, payload = blob.partition(b"payload ")
        lines = head.decode().splitlines()
        tensor_lines = [i for i, l in enumerate(lines) if l.startswith("tensor ")]
        # force the second tensor to overlap the first
        parts = lines[tensor_lines[1]].split(" ")
        parts[3] = "0"
        lines[tensor_lines[1]] = " ".join(parts)
        f.write_bytes(("\n".join(lines) + "\n").encode() + b"payload " + payload)
        with pytest.raises(FormatError, match="overlap"):
            load_checkpoint(f)

    def test_missing_tensor(self, model, tmp_path):
        g, p = model
        f = tmp_path / "m.ckpt"
        del p.values["head.b"]
        p.trainable.discard("head.b")
        save_checkpoint(f, g, p)
        with pytest.raises(FormatError, match="missing"):
            load_checkpoint(f)

    def test_version_check(self, model, tmp_path):
        g, p = model
        f = tmp_path / "m.ckpt"
        save_checkpoint(f, g, p)
        blob = f.read_bytes().replace(b"attnfold-checkpoint 1", b"attnfold-checkpoint 9", 1)
        f.write_bytes(blob)
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(f)
