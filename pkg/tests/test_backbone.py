import numpy as np
import pytest
import torch

from scarnet.backbone import (
    LayerSpec,
    build_backbone,
    build_dilation_module,
    build_feature_extractor,
    dilation_specs,
    extract_features,
    frontend_specs,
    normalize_image,
    receptive_field,
)
from scarnet.errors import CheckpointError, ShapeError
from scarnet.tensorio import decode_tensor, encode_tensor, load_weights, save_weights


def meta_shape(module, shape):
    return tuple(module.to("meta")(torch.empty(shape, device="meta")).shape)


def test_frontend_layer_sequence():
    convs = [s for s in frontend_specs() if s.kind == "conv"]
    assert [s.out_channels for s in convs] == [64, 64, 128, 128, 256, 256, 256, 512, 512, 512]
    assert all(s.kernel == 3 and s.stride == 1 and s.activation == "relu" for s in convs)
    assert [s.name for s in frontend_specs() if s.kind == "maxpool"] == ["pool1", "pool2", "pool3"]


def test_conv3_literal_override():
    convs = [s for s in frontend_specs(conv3_channels=128) if s.name.startswith("conv3")]
    assert [s.out_channels for s in convs] == [128, 128, 128]
    frontend = build_backbone(conv3_channels=128)
    assert frontend.conv4_1.in_channels == 128


def test_dilation_schedule():
    specs = dilation_specs()
    assert [s.out_channels for s in specs] == [512, 512, 512, 256, 128, 64]
    assert all(s.dilation == 2 and s.padding == 2 for s in specs)


def test_layer_spec_invariants():
    with pytest.raises(ValueError):
        LayerSpec("x", "conv", 8, kernel=4)
    with pytest.raises(ValueError):
        LayerSpec("x", "conv", 8, dilation=0)


def test_backbone_full_resolution_shape():
    assert meta_shape(build_backbone(), (1, 3, 576, 768)) == (1, 512, 72, 96)


def test_backbone_small_shape():
    with torch.no_grad():
        assert build_backbone()(torch.rand(1, 3, 96, 128)).shape == (1, 512, 12, 16)


def test_dilation_shapes():
    assert meta_shape(build_dilation_module(), (1, 512, 72, 96)) == (1, 64, 72, 96)
    with torch.no_grad():
        assert build_dilation_module()(torch.rand(1, 512, 12, 16)).shape == (1, 64, 12, 16)


def test_dilation_zero_in_zero_out():
    with torch.no_grad():
        out = build_dilation_module()(torch.zeros(1, 512, 6, 8))
    assert torch.count_nonzero(out) == 0


def test_extract_features_shapes():
    ex = build_feature_extractor()
    assert meta_shape(build_feature_extractor(), (1, 3, 576, 768)) == (1, 64, 72, 96)
    assert extract_features(ex, torch.rand(3, 96, 128)).shape == (64, 12, 16)


def test_extract_features_deterministic():
    ex = build_feature_extractor(width_divisor=8)
    x = torch.rand(3, 32, 48)
    assert torch.equal(extract_features(ex, x), extract_features(ex, x))


def test_extract_features_divisibility():
    with pytest.raises(ShapeError, match="pad or resize"):
        extract_features(build_feature_extractor(width_divisor=8), torch.rand(3, 100, 128))


def test_activations_finite():
    torch.manual_seed(0)
    ex = build_feature_extractor(width_divisor=16, init="kaiming")
    gen = torch.Generator().manual_seed(1)
    for _ in range(10):
        x = torch.randn(100, 3, 16, 16, generator=gen) * 3
        assert torch.isfinite(extract_features(ex, x)).all()


def test_receptive_field_bound():
    specs = frontend_specs(16) + dilation_specs(16)
    rf, jump = receptive_field(specs)
    assert jump == 8
    assert rf == 284  # 6 + 10 + 28 (frontend to pool3) + 48 + 192

    torch.manual_seed(0)
    ex = build_feature_extractor(width_divisor=16, init="kaiming").double()
    x = torch.rand(1, 3, 16, 640, dtype=torch.float64)
    col = 320
    y = x.clone()
    y[0, :, 8, col] += 1.0
    with torch.no_grad():
        diff = (ex(y) - ex(x)).abs().amax(dim=(0, 1, 2))
    changed = torch.nonzero(diff > 0).flatten().tolist()
    assert changed, "perturbation had no effect"
    for o in changed:
        assert abs(o * jump - col) <= rf
    assert diff[0] == 0 and diff[-1] == 0


def test_normalize_image():
    img = np.full((8, 8, 3), 255, np.uint8)
    x = normalize_image(img)
    assert x.shape == (3, 8, 8) and torch.all(x == 1.0)
    z = normalize_image(img, imagenet=True)
    assert z[0, 0, 0].item() == pytest.approx((1 - 0.485) / 0.229, rel=1e-6)


# ------------------------------------------------------------ pretrained weights


def vgg_like_weights(conv3=256):
    frontend = build_backbone(conv3_channels=conv3)
    return {k: v.numpy() for k, v in frontend.state_dict().items()}


def test_pretrained_directory_accepted(tmp_path):
    weights = vgg_like_weights()
    assert weights["conv1_1.weight"].shape == (64, 3, 3, 3)
    weights["conv1_1.weight"] = np.full((64, 3, 3, 3), 0.25, np.float32)
    save_weights(tmp_path, weights)
    frontend = build_backbone(pretrained=tmp_path)
    assert torch.all(frontend.conv1_1.weight == 0.25)


def test_pretrained_shape_mismatch_names_layer():
    weights = vgg_like_weights(conv3=128)
    with pytest.raises(CheckpointError, match="conv3_1"):
        build_backbone(pretrained=weights)


def test_pretrained_missing_layer():
    weights = vgg_like_weights()
    del weights["conv4_3.bias"]
    with pytest.raises(CheckpointError, match="conv4_3.bias"):
        build_backbone(pretrained=weights)


def test_weight_file_layout():
    raw = encode_tensor("conv1_1.weight", np.arange(6, dtype=np.float32).reshape(2, 3))
    assert raw[:8] == b"SCARWGT1"
    assert int.from_bytes(raw[8:12], "little") == len("conv1_1.weight")
    name, arr = decode_tensor(raw)
    assert name == "conv1_1.weight"
    np.testing.assert_array_equal(arr, np.arange(6).reshape(2, 3))


def test_weight_file_truncated():
    raw = encode_tensor("a", np.ones((4, 4), np.float32))
    with pytest.raises(CheckpointError):
        decode_tensor(raw[:-3])
    with pytest.raises(CheckpointError):
        decode_tensor(raw[:14])
    with pytest.raises(CheckpointError):
        decode_tensor(b"XXXXXXXX" + raw[8:])


def test_weight_directory_round_trip(tmp_path):
    tensors = {"a.weight": np.random.rand(2, 3, 1, 1).astype(np.float32), "a.bias": np.zeros(2, np.float32)}
    save_weights(tmp_path, tensors)
    assert (tmp_path / "layers.txt").read_text().split() == ["a.weight", "a.bias"]
    back = load_weights(tmp_path)
    assert list(back) == ["a.weight", "a.bias"]
    np.testing.assert_array_equal(back["a.weight"], tensors["a.weight"])
