"""Variant contracts, parameter accounting, checkpoint format."""

import numpy as np
import pytest

import smaat_qmix.tensor as T
from smaat_qmix.errors import ConfigError, FormatError, ShapeError
from smaat_qmix.model import (ModelConfig, build, count_parameters,
                              load_checkpoint, parameter_reduction,
                              save_checkpoint)
from smaat_qmix.tensor import Tensor


def small_config(variant="qmix", **kw):
    """A 32x32 desk-scale config that keeps the full five-level topology."""
    base = dict(variant=variant, input_size=32, base_width=4, cbam_ratio=2,
                vq_codewords=8)
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="smaat")

    def test_input_size_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_size=100)

    def test_default_widths_progression(self):
        cfg = ModelConfig()
        assert cfg.widths == (64, 128, 256, 512, 512)
        assert cfg.bottleneck_size == 18

    def test_variant_feature_flags(self):
        flags = {v: (ModelConfig(variant=v).uses_vq,
                     ModelConfig(variant=v).uses_mixconv)
                 for v in ("baseline", "q", "mix", "qmix")}
        assert flags == {"baseline": (False, False), "q": (True, False),
                         "mix": (False, True), "qmix": (True, True)}


class TestForward:
    @pytest.mark.parametrize("variant", ["baseline", "q", "mix", "qmix"])
    def test_output_shape_all_variants(self, variant):
        model = build(small_config(variant), seed=0).eval()
        x = Tensor(np.random.default_rng(0).random((2, 12, 32, 32),
                                                   dtype=np.float32))
        with T.no_grad():
            res = model(x)
        assert res.prediction.shape == (2, 1, 32, 32)

    def test_vq_indices_only_for_vq_variants(self):
        x = Tensor(np.random.default_rng(1).random((1, 12, 32, 32),
                                                   dtype=np.float32))
        with T.no_grad():
            assert build(small_config("baseline")).eval()(x).vq_indices is None
            idx = build(small_config("qmix")).eval()(x).vq_indices
        assert idx.shape == (1, 2, 2)

    def test_training_forward_exposes_vq_loss(self):
        model = build(small_config("q"), seed=0).train()
        x = Tensor(np.random.default_rng(2).random((1, 12, 32, 32),
                                                   dtype=np.float32))
        res = model(x)
        assert res.vq_loss is not None and res.vq_loss.item() >= 0.0
        assert build(small_config("mix")).train()(x).vq_loss is None

    def test_wrong_frame_count_raises(self):
        model = build(small_config())
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 11, 32, 32), dtype=np.float32)))

    def test_wrong_spatial_size_raises(self):
        model = build(small_config())
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 12, 48, 48), dtype=np.float32)))

    def test_full_scale_bottleneck_dims(self):
        # full 288x288 input at reduced width; bottleneck is 18x18
        cfg = ModelConfig(variant="qmix", base_width=4, cbam_ratio=2,
                          vq_codewords=8)
        model = build(cfg, seed=0).eval()
        x = Tensor(np.random.default_rng(3)
                   .random((1, 12, 288, 288), dtype=np.float32))
        with T.no_grad():
            res = model(x, capture=False)
        assert res.prediction.shape == (1, 1, 288, 288)
        assert res.vq_indices.shape == (1, 18, 18)

    def test_capture_records_all_hookable_stages(self):
        model = build(small_config(), seed=0).eval()
        x = Tensor(np.random.default_rng(4).random((1, 12, 32, 32),
                                                   dtype=np.float32))
        with T.no_grad():
            res = model(x, capture=True)
        names = set(res.captures)
        expected = ({f"enc{i}.block" for i in range(1, 6)}
                    | {f"enc{i}.cbam" for i in range(1, 6)}
                    | {f"dec{j}" for j in range(1, 5)} | {"bottleneck"})
        assert names == expected

    def test_deterministic_given_seed(self):
        x_data = np.random.default_rng(5).random((1, 12, 32, 32),
                                                 dtype=np.float32)
        with T.no_grad():
            a = build(small_config(), seed=7).eval()(Tensor(x_data.copy()))
            b = build(small_config(), seed=7).eval()(Tensor(x_data.copy()))
        np.testing.assert_array_equal(a.prediction.data, b.prediction.data)


class TestParameterCounts:
    def test_baseline_band_and_reduction(self):
        totals = {v: count_parameters(build(ModelConfig(variant=v)))["total"]
                  for v in ("baseline", "qmix")}
        assert 3_500_000 <= totals["baseline"] <= 4_500_000
        red = parameter_reduction(totals["baseline"], totals["qmix"])
        assert 0.30 <= red <= 0.45

    def test_vq_adds_exactly_codebook_size(self):
        base = count_parameters(build(ModelConfig(variant="baseline")))["total"]
        q = count_parameters(build(ModelConfig(variant="q")))["total"]
        assert q - base == 32 * 512
        mix = count_parameters(build(ModelConfig(variant="mix")))["total"]
        qmix = count_parameters(build(ModelConfig(variant="qmix")))["total"]
        assert qmix - mix == 32 * 512

    def test_mixconv_only_changes_deep_stages(self):
        base = count_parameters(build(ModelConfig(variant="baseline")))
        mix = count_parameters(build(ModelConfig(variant="mix")))
        same = {"enc1", "enc2", "enc3", "dec2", "dec3", "dec4", "head",
                "cbam1", "cbam2", "cbam3", "cbam4", "cbam5"}
        for key in same:
            assert base["per_module"][key] == mix["per_module"][key], key
        for key in ("enc4", "enc5", "dec1"):
            assert mix["per_module"][key] < base["per_module"][key], key

    def test_per_module_sums_to_total(self):
        counts = count_parameters(build(small_config()))
        assert sum(counts["per_module"].values()) == counts["total"]

    def test_total_matches_registry_enumeration(self):
        model = build(small_config("q"))
        brute = sum(p.size for p in model.parameters())
        assert count_parameters(model)["total"] == brute


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        cfg = small_config("qmix")
        src = build(cfg, seed=1)
        path = tmp_path / "model.ckpt"
        save_checkpoint(src, path)
        dst = build(cfg, seed=2)
        load_checkpoint(dst, path)
        for (_, a), (_, b) in zip(sorted(src.named_parameters()),
                                  sorted(dst.named_parameters())):
            np.testing.assert_array_equal(a.data, b.data)
        for (_, a), (_, b) in zip(sorted(src.named_buffers()),
                                  sorted(dst.named_buffers())):
            np.testing.assert_array_equal(a, b)

    def test_roundtrip_preserves_predictions(self, tmp_path):
        cfg = small_config("qmix")
        src = build(cfg, seed=3).eval()
        path = tmp_path / "model.ckpt"
        save_checkpoint(src, path)
        dst = build(cfg, seed=4).eval()
        load_checkpoint(dst, path)
        x = Tensor(np.random.default_rng(6).random((1, 12, 32, 32),
                                                   dtype=np.float32))
        with T.no_grad():
            np.testing.assert_array_equal(src(x).prediction.data,
                                          dst(x).prediction.data)

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_checkpoint(build(small_config()), path)

    def test_truncated_file_rejected(self, tmp_path):
        model = build(small_config(), seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(build(small_config(), seed=1), path)

    def test_variant_mismatch_rejected(self, tmp_path):
        path = tmp_path / "q.ckpt"
        save_checkpoint(build(small_config("q"), seed=0), path)
        target = build(small_config("mix"), seed=0)
        before = {n: p.data.copy() for n, p in target.named_parameters()}
        with pytest.raises(FormatError):
            load_checkpoint(target, path)
        # failed load must not partially mutate the target
        for n, p in target.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_includes_batchnorm_buffers(self, tmp_path):
        model = build(small_config("baseline"), seed=0)
        model.enc1.bn1.running_mean[:] = 3.25
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        dst = build(small_config("baseline"), seed=1)
        load_checkpoint(dst, path)
        assert np.all(dst.enc1.bn1.running_mean == 3.25)
