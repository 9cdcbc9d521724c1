import json

import numpy as np
import pytest

from wegpipe.core.errors import ConfigError, FormatError, ShapeError
from wegpipe.core.explain import class_score
from wegpipe.core.tensor import Tensor, finite_diff_check
from wegpipe.core.vit import (
    ViTConfig,
    build_model,
    coerce_vit_config,
    load_weights,
    parameter_shapes,
    patchify,
    save_weights,
    unpatchify,
)


def _checked_entries(grad: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Every entry whose gradient is large enough for a relative comparison."""
    return np.flatnonzero(np.abs(grad.reshape(-1)) > floor)


def _reference_logits(model, image: np.ndarray) -> np.ndarray:
    """Plain numpy forward of one image, one head at a time."""
    cfg = model.config
    w = {name: tensor.data for name, tensor in model.params.items()}
    p, d = cfg.patch_size, cfg.embed_dim
    hd = d // cfg.num_heads
    _, height, width = image.shape

    def norm(v: np.ndarray, name: str) -> np.ndarray:
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-6) * w[name + ".weight"] + w[name + ".bias"]

    patches = np.array(
        [image[:, r : r + p, s : s + p].reshape(-1) for r in range(0, height, p) for s in range(0, width, p)]
    )
    tokens = patches @ w["patch_embed.weight"] + w["patch_embed.bias"]
    x = np.vstack([w["cls_token"][0], tokens]) + w["pos_embed"][0]
    for b in range(cfg.num_blocks):
        pre = f"blocks.{b}."
        qkv = norm(x, pre + "norm1") @ w[pre + "attn.qkv.weight"] + w[pre + "attn.qkv.bias"]
        outputs = []
        for head in range(cfg.num_heads):
            cols = slice(head * hd, (head + 1) * hd)
            q, k, v = qkv[:, cols], qkv[:, d:][:, cols], qkv[:, 2 * d :][:, cols]
            scores = q @ k.T / np.sqrt(hd)
            weights = np.exp(scores - scores.max(axis=1, keepdims=True))
            outputs.append(weights / weights.sum(axis=1, keepdims=True) @ v)
        x = x + np.hstack(outputs) @ w[pre + "attn.proj.weight"] + w[pre + "attn.proj.bias"]
        hidden = norm(x, pre + "norm2") @ w[pre + "mlp.fc1.weight"] + w[pre + "mlp.fc1.bias"]
        hidden = 0.5 * hidden * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (hidden + 0.044715 * hidden**3)))
        x = x + hidden @ w[pre + "mlp.fc2.weight"] + w[pre + "mlp.fc2.bias"]
    return norm(x, "norm")[0] @ w["head.weight"] + w["head.bias"]


def test_config_rejects_indivisible_sizes() -> None:
    with pytest.raises(ConfigError):
        coerce_vit_config({"image_size": 30, "patch_size": 8})
    with pytest.raises(ConfigError):
        coerce_vit_config({"embed_dim": 10, "num_heads": 4})


def test_default_config_geometry() -> None:
    config = ViTConfig()
    assert config.grid_size == 8
    assert config.seq_len == 65
    assert config.head_dim == 16


def test_patchify_is_raster_order_and_invertible(rng: np.random.Generator) -> None:
    image = rng.random((3, 8, 12))
    patches = patchify(image, 4)
    assert patches.shape == (6, 48)
    np.testing.assert_array_equal(patches.data[1].reshape(3, 4, 4), image[:, 0:4, 4:8])
    np.testing.assert_array_equal(unpatchify(patches.data, 3, 8, 12, 4), image)


def test_forward_shapes_and_trace(tiny_model, rng: np.random.Generator) -> None:
    logits, trace = tiny_model.forward(rng.random((3, 16, 16)), record_attention=True)
    assert logits.shape == (1, 3)
    assert trace.num_blocks == 2
    assert trace.grid == (4, 4)
    assert trace.blocks[0].attention.shape == (1, 2, 17, 17)
    np.testing.assert_allclose(trace.blocks[1].attention.data.sum(axis=-1), 1.0)


def test_forward_without_trace(tiny_model, rng: np.random.Generator) -> None:
    _, trace = tiny_model.forward(rng.random((3, 16, 16)))
    assert trace is None


def test_batched_forward_matches_single_images(tiny_model, rng: np.random.Generator) -> None:
    images = rng.random((3, 3, 16, 16))
    batched, _ = tiny_model.forward(images)
    for i in range(3):
        single, _ = tiny_model.forward(images[i])
        np.testing.assert_allclose(batched.data[i], single.data[0], atol=1e-12)


def test_forward_rejects_bad_image(tiny_model) -> None:
    with pytest.raises(ShapeError):
        tiny_model.forward(np.zeros((3, 15, 16)))
    with pytest.raises(ShapeError):
        tiny_model.forward(np.zeros((1, 16, 16)))


def test_other_resolution_resizes_position_embedding(tiny_model, rng: np.random.Generator) -> None:
    logits, trace = tiny_model.forward(rng.random((3, 24, 20)), record_attention=True)
    assert trace.grid == (6, 5)
    assert logits.shape == (1, 3)


def test_class_score_gradient_wrt_image(tiny_model, rng: np.random.Generator) -> None:
    image = Tensor(rng.random((3, 16, 16)))

    def score(x: Tensor) -> Tensor:
        return class_score(tiny_model.forward(x)[0], 1)

    watched = Tensor(image.data.copy(), requires_grad=True)
    score(watched).backward()
    indices = _checked_entries(watched.grad)
    assert indices.size > 12
    assert finite_diff_check(score, image, indices=indices) < 1e-4


def test_class_score_gradient_wrt_every_parameter(tiny_model, rng: np.random.Generator) -> None:
    image = rng.random((3, 16, 16))
    gaps = {}
    for name in list(tiny_model.params):
        original = tiny_model.params[name]

        def score(w: Tensor, name: str = name) -> Tensor:
            tiny_model.params[name] = w
            return class_score(tiny_model.forward(image)[0], 2)

        try:
            watched = Tensor(original.data.copy(), requires_grad=True)
            score(watched).backward()
            indices = _checked_entries(watched.grad)
            if indices.size:
                gaps[name] = finite_diff_check(score, Tensor(original.data.copy()), indices=indices)
        finally:
            tiny_model.params[name] = original
    assert {"blocks.0.attn.qkv.weight", "blocks.1.mlp.fc1.weight", "pos_embed", "head.weight"} <= set(gaps)
    worst = max(gaps, key=gaps.get)
    assert gaps[worst] < 1e-4, worst


def test_recording_attention_leaves_logits_unchanged(tiny_model, rng: np.random.Generator) -> None:
    images = rng.random((2, 3, 16, 16))
    plain, _ = tiny_model.forward(images)
    recorded, _ = tiny_model.forward(images, record_attention=True)
    np.testing.assert_array_equal(plain.data, recorded.data)


def test_logits_match_reference_forward(tiny_model, rng: np.random.Generator) -> None:
    images = rng.random((2, 3, 16, 16))
    logits, _ = tiny_model.forward(images)
    for i in range(2):
        np.testing.assert_allclose(logits.data[i], _reference_logits(tiny_model, images[i]), rtol=1e-10, atol=1e-10)


def test_build_model_is_deterministic(tiny_config) -> None:
    a, b = build_model(tiny_config, seed=5), build_model(tiny_config, seed=5)
    for name in parameter_shapes(tiny_config):
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert np.abs(a.params["blocks.0.attn.qkv.weight"].data).max() <= 0.04


def test_predict_proba_in_unit_interval(tiny_model, rng: np.random.Generator) -> None:
    probs = tiny_model.predict_proba(rng.random((2, 3, 16, 16)))
    assert probs.shape == (2, 3)
    assert np.all((probs > 0) & (probs < 1))


def test_weights_round_trip(tmp_path, tiny_model, rng: np.random.Generator) -> None:
    manifest = save_weights(tiny_model, tmp_path / "model")
    assert manifest.name == "model.manifest.json"
    assert (tmp_path / "model.tnsr").exists()
    loaded = load_weights(tmp_path / "model")
    image = rng.random((3, 16, 16))
    np.testing.assert_array_equal(loaded.forward(image)[0].data, tiny_model.forward(image)[0].data)


def test_load_weights_rejects_truncated_blob(tmp_path, tiny_model) -> None:
    save_weights(tiny_model, tmp_path / "model")
    blob = tmp_path / "model.tnsr"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_weights(tmp_path / "model")


def test_load_weights_names_mismatched_parameter(tmp_path, tiny_model) -> None:
    path = save_weights(tiny_model, tmp_path / "model")
    manifest = json.loads(path.read_text())
    for entry in manifest["parameters"]:
        if entry["name"] == "head.weight":
            entry["shape"] = [3, 8]
    path.write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="head.weight"):
        load_weights(tmp_path / "model")


def test_load_weights_rejects_corrupt_manifest(tmp_path, tiny_model) -> None:
    path = save_weights(tiny_model, tmp_path / "model")
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_weights(tmp_path / "model")
