"""
Encoder models and checkpoints - tests
Run: pytest test_encoder.py
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.autograd import gradcheck
from torch.func import functional_call

from common.errors import (
    CheckpointMismatchError, ConfigurationError, InvalidInputError, MissingInputError,
)
from models.checkpoints import CheckpointMeta, load_checkpoint, load_checkpoint_meta, save_checkpoint
from models.encoder import (
    AttentionPoolingHead, Backbone2D, Backbone3D, Conv3dHead, EncoderConfig, FeatureMapProjector,
    TransformerHead, build_encoder, chunk_slices, chunk_tensor, classify_3dconvs,
    classify_attention_pooling, classify_transformer, extract_features_chunked,
    extract_features_whole, n_chunks, to_feature_map_representation, to_token_representation,
)

SMALL = dict(backbone_channels=(4, 8), head_channels=4, hidden_dim=8, transformer_dim=8, transformer_heads=2)
SMALL_SHAPE = (12, 16, 16)


def param_gradcheck(module, inputs, loss_fn):
    """Central finite differences w.r.t. every trainable parameter, double precision."""
    module = module.double()
    names = [n for n, p in module.named_parameters() if p.requires_grad]
    params = tuple(dict(module.named_parameters())[n].detach().clone().requires_grad_(True) for n in names)

    def f(*ps):
        return loss_fn(functional_call(module, dict(zip(names, ps)), (inputs,)))

    return gradcheck(f, params, eps=1e-6, atol=1e-7, rtol=1e-4)


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("depth, expected", [(60, 20), (61, 21), (3, 1), (1, 1), (4, 2)])
def test_chunk_counts(depth, expected):
    assert n_chunks(depth) == expected
    assert chunk_slices(np.zeros((depth, 4, 4))).shape == (expected, 3, 4, 4)


def test_last_partial_chunk_repeats_final_slice():
    data = np.arange(61, dtype=np.float64)[:, None, None] * np.ones((61, 2, 2))
    chunks = chunk_slices(data)
    assert [c[0, 0] for c in chunks[-1]] == [60.0, 60.0, 60.0]
    assert np.array_equal(chunks[0], data[:3])


def test_depth_three_is_identity():
    data = np.random.default_rng(0).random((3, 5, 5))
    assert np.array_equal(chunk_slices(data)[0], data)


def test_chunk_tensor_matches_numpy():
    data = np.random.default_rng(1).random((7, 4, 4)).astype(np.float32)
    assert np.array_equal(chunk_tensor(torch.from_numpy(data)[None])[0].numpy(), chunk_slices(data))


def test_chunk_slices_rejects_non_3d():
    with pytest.raises(InvalidInputError):
        chunk_slices(np.zeros((4, 4)))


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------

def test_chunked_features_shape_and_determinism():
    torch.manual_seed(0)
    backbone = Backbone2D((4, 8))
    v = torch.rand(2, 61, 32, 32)
    fms = extract_features_chunked(v, backbone)
    assert fms.shape == (2, 21, 8, 8, 8)
    assert torch.equal(fms, extract_features_chunked(v.clone(), backbone))


def test_swapping_chunks_swaps_stack_rows():
    torch.manual_seed(0)
    backbone = Backbone2D((4,))
    v = torch.rand(1, 9, 8, 8)
    swapped = torch.cat([v[:, 3:6], v[:, 0:3], v[:, 6:9]], dim=1)
    a = extract_features_chunked(v, backbone)
    b = extract_features_chunked(swapped, backbone)
    assert torch.allclose(a[:, [1, 0, 2]], b)


def test_chunked_features_too_small():
    with pytest.raises(InvalidInputError):
        extract_features_chunked(torch.rand(1, 6, 4, 4), Backbone2D((4, 8, 8)))


def test_whole_volume_features():
    torch.manual_seed(0)
    backbone = Backbone3D((4, 6))
    v = torch.rand(2, 12, 16, 16)
    maps, pooled = extract_features_whole(v, backbone)
    assert maps.shape == (2, 6, 3, 4, 4)
    assert pooled.shape == (2, 6)
    assert torch.equal(pooled, extract_features_whole(v, backbone)[1])


# ---------------------------------------------------------------------------
# Classifier heads
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n_labels", [1, 5, 11])
@pytest.mark.parametrize("extractor, classifier", [
    ("chunked_2d", "conv3d"),
    ("chunked_2d", "attention_pooling"),
    ("chunked_2d", "transformer"),
    ("whole_3d", "conv3d"),
])
def test_encoder_output_shapes(extractor, classifier, n_labels):
    torch.manual_seed(0)
    cfg = EncoderConfig(extractor=extractor, classifier=classifier, n_labels=n_labels, **SMALL)
    out = build_encoder(cfg, SMALL_SHAPE)(torch.rand(2, *SMALL_SHAPE))
    assert out.logits.shape == (2, n_labels)
    assert out.penultimate.shape == (2, 100)
    assert torch.isfinite(out.logits).all()


def test_zero_final_layer_gives_half_probability():
    model = build_encoder(EncoderConfig(n_labels=11, **SMALL), SMALL_SHAPE)
    torch.nn.init.zeros_(model.head.out.weight)
    torch.nn.init.zeros_(model.head.out.bias)
    out = model(torch.rand(3, *SMALL_SHAPE))
    assert torch.equal(out.logits, torch.zeros(3, 11))
    assert torch.allclose(torch.sigmoid(out.logits), torch.full((3, 11), 0.5))


def test_conv3d_head_needs_enough_chunks():
    head = Conv3dHead(4, 11, channels=4, hidden=8)
    assert head.min_depth == 3
    with pytest.raises(ConfigurationError, match="chunks"):
        classify_3dconvs(torch.rand(1, 2, 4, 4, 4), head)


def test_uniform_attention_equals_mean_pooling():
    torch.manual_seed(0)
    head = AttentionPoolingHead(12, 5)
    torch.nn.init.zeros_(head.pool.score.weight)
    torch.nn.init.zeros_(head.pool.score.bias)
    x = torch.rand(2, 6, 12)
    out = head(x)
    expected = head.out(head.act(head.fc(x.mean(dim=1))))
    assert torch.allclose(out.logits, expected, atol=1e-6)
    assert torch.allclose(out.attention, torch.full((2, 6), 1 / 6))


def test_attention_weights_sum_to_one():
    torch.manual_seed(1)
    fms = torch.rand(3, 5, 2, 3, 3)
    out = classify_attention_pooling(fms, AttentionPoolingHead(18, 11))
    assert torch.allclose(out.attention.sum(dim=1), torch.ones(3), atol=1e-6)


def test_transformer_is_permutation_invariant():
    torch.manual_seed(2)
    head = TransformerHead(12, 11, dim=8, heads=2).double().eval()
    x = torch.rand(1, 5, 12, dtype=torch.float64)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        a = head(x)
        b = head(x[:, perm])
    assert torch.allclose(a.logits, b.logits, atol=1e-6)
    assert torch.allclose(a.attention[:, perm], b.attention, atol=1e-6)


def test_transformer_single_chunk():
    torch.manual_seed(3)
    out = classify_transformer(torch.rand(2, 1, 2, 2, 2), TransformerHead(8, 5, dim=8, heads=2))
    assert out.logits.shape == (2, 5)
    assert torch.isfinite(out.logits).all()
    assert torch.allclose(out.attention, torch.ones(2, 1))


def test_sequence_heads_reject_whole_volume_features():
    with pytest.raises(ConfigurationError):
        classify_attention_pooling(torch.rand(1, 4, 2, 2), AttentionPoolingHead(8, 5))


@pytest.mark.parametrize("classifier", ["attention_pooling", "transformer"])
def test_config_rejects_whole_volume_with_sequence_head(classifier):
    with pytest.raises(ConfigurationError, match="whole_3d"):
        EncoderConfig(extractor="whole_3d", classifier=classifier)


@pytest.mark.parametrize("kwargs", [
    {"extractor": "resnet18"},
    {"classifier": "mlp"},
    {"activation": "tanh"},
    {"transformer_dim": 10, "transformer_heads": 4},
])
def test_config_rejects_unknown_settings(kwargs):
    with pytest.raises(ConfigurationError):
        EncoderConfig(**kwargs)


def test_freeze_backbone():
    model = build_encoder(EncoderConfig(freeze_backbone=True, **SMALL), SMALL_SHAPE)
    assert not any(p.requires_grad for p in model.backbone.parameters())
    assert all(p.requires_grad for p in model.head.parameters())


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def _bce(target):
    return lambda out: F.binary_cross_entropy_with_logits(out.logits, target)


def test_conv3d_head_gradients():
    torch.manual_seed(0)
    head = Conv3dHead(4, 5, channels=3, hidden=6, penultimate=8, activation="gelu")
    x = torch.rand(2, 4, 4, 2, 2, dtype=torch.float64)       # [B, C, chunks, fh, fw]
    target = torch.randint(0, 2, (2, 5)).double()
    assert param_gradcheck(head, x, _bce(target))


def test_attention_pooling_head_gradients():
    torch.manual_seed(1)
    head = AttentionPoolingHead(8, 5, penultimate=6, activation="gelu")
    x = torch.rand(2, 4, 8, dtype=torch.float64)
    target = torch.randint(0, 2, (2, 5)).double()
    assert param_gradcheck(head, x, _bce(target))


def test_transformer_head_gradients():
    torch.manual_seed(2)
    head = TransformerHead(8, 5, dim=8, heads=2, penultimate=6, activation="gelu")
    x = torch.rand(2, 4, 8, dtype=torch.float64)
    target = torch.randint(0, 2, (2, 5)).double()
    assert param_gradcheck(head, x, _bce(target))


def test_backbone_2d_gradients():
    torch.manual_seed(3)
    backbone = Backbone2D(channels=(3, 2), activation="gelu")
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    weights = torch.rand(2, 2, 2, 2, dtype=torch.float64)
    assert param_gradcheck(backbone, x, lambda maps: (maps * weights).sum())


def test_backbone_3d_gradients():
    torch.manual_seed(4)
    backbone = Backbone3D(channels=(2, 3), activation="gelu")
    x = torch.rand(1, 1, 6, 6, 6, dtype=torch.float64)
    assert param_gradcheck(backbone, x, lambda out: out[0].pow(2).sum() + out[1].sum())


def test_feature_map_projector_gradients():
    torch.manual_seed(5)
    projector = FeatureMapProjector(4, 6)
    x = torch.rand(2, 3, 5, 2, 2, dtype=torch.float64)        # [B, chunks, C, fh, fw]
    weights = torch.rand(2, 3, 6, dtype=torch.float64)
    assert param_gradcheck(projector, x, lambda memory: (memory * weights).sum())


# ---------------------------------------------------------------------------
# Representations
# ---------------------------------------------------------------------------

def test_token_representation_example():
    rng = np.random.default_rng(0)
    v = np.concatenate([[0.0, 1.0, 0.5], rng.uniform(0.01, 0.99, 97)])
    tokens = to_token_representation(v)
    assert tokens.shape == (100,)
    assert tokens[:3].tolist() == [0, 99, 50]
    assert tokens.min() >= 0 and tokens.max() <= 99


def test_constant_vector_gives_zero_tokens():
    assert to_token_representation(np.full(100, 3.2)).tolist() == [0] * 100


def test_token_representation_rejects_wrong_width():
    with pytest.raises(InvalidInputError):
        to_token_representation(np.zeros(99))


def test_tokens_invariant_under_positive_affine_maps():
    rng = np.random.default_rng(5)
    for _ in range(200):
        v = rng.normal(size=100)
        a, b = rng.uniform(0.1, 10.0), rng.normal(scale=5.0)
        assert np.array_equal(to_token_representation(v), to_token_representation(a * v + b))
    v = np.concatenate([[0.0, 1.0, 0.5], rng.uniform(0, 1, 97)])
    assert np.array_equal(to_token_representation(v), to_token_representation(2.0 * v + 3.0))


def test_token_representation_batched_tensor():
    torch.manual_seed(0)
    out = build_encoder(EncoderConfig(**SMALL), SMALL_SHAPE)(torch.rand(3, *SMALL_SHAPE))
    tokens = to_token_representation(out.penultimate)
    assert tokens.shape == (3, 100)


def test_feature_map_representation_shape():
    fms = torch.rand(2, 20, 4, 3, 3)
    memory = to_feature_map_representation(fms, FeatureMapProjector(9, 16))
    assert memory.shape == (2, 20, 16)


def test_channel_constant_maps_reduce_to_one_channel():
    one = torch.rand(1, 5, 1, 3, 3)
    fms = one.expand(-1, -1, 4, -1, -1)
    assert torch.allclose(FeatureMapProjector(9, 8).reduce(fms), one.flatten(2))


def test_doubling_maps_doubles_reduced_vectors():
    fms = torch.rand(1, 5, 4, 3, 3, dtype=torch.float64)
    projector = FeatureMapProjector(9, 8)
    assert torch.equal(projector.reduce(2 * fms), 2 * projector.reduce(fms))


def test_projector_width_mismatch():
    with pytest.raises(ConfigurationError):
        to_feature_map_representation(torch.rand(1, 5, 4, 3, 3), FeatureMapProjector(8, 16))
    with pytest.raises(ConfigurationError):
        to_feature_map_representation(torch.rand(1, 5, 3, 3), FeatureMapProjector(9, 16))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _meta(cfg, step=10):
    return CheckpointMeta(architecture=cfg.architecture, config_hash="abc123", step=step,
                          task="rotation", metrics={"accuracy": 0.9}, model=cfg.to_dict())


def test_checkpoint_round_trip(tmp_path):
    cfg = EncoderConfig(n_labels=5, **SMALL)
    torch.manual_seed(0)
    model = build_encoder(cfg, SMALL_SHAPE)
    save_checkpoint(tmp_path / "enc", model, _meta(cfg))

    torch.manual_seed(1)
    other = build_encoder(cfg, SMALL_SHAPE)
    meta = load_checkpoint(tmp_path / "enc", other, cfg.architecture, expected_hash="abc123")
    assert meta.step == 10 and meta.task == "rotation"
    assert EncoderConfig(**meta.model) == cfg
    for a, b in zip(model.state_dict().values(), other.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_architecture_mismatch(tmp_path):
    cfg = EncoderConfig(n_labels=5, **SMALL)
    save_checkpoint(tmp_path / "enc", build_encoder(cfg, SMALL_SHAPE), _meta(cfg))
    other = EncoderConfig(classifier="attention_pooling", n_labels=5, **SMALL)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "enc", build_encoder(other, SMALL_SHAPE), other.architecture)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "enc", build_encoder(cfg, SMALL_SHAPE), cfg.architecture, expected_hash="zzz")


def test_checkpoint_shape_mismatch(tmp_path):
    cfg = EncoderConfig(n_labels=5, **SMALL)
    save_checkpoint(tmp_path / "enc", build_encoder(cfg, SMALL_SHAPE), _meta(cfg))
    wider = EncoderConfig(n_labels=11, **SMALL)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(tmp_path / "enc", build_encoder(wider, SMALL_SHAPE), wider.architecture)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingInputError):
        load_checkpoint_meta(tmp_path / "nothing")
