import numpy as np
import pytest

from mhtn.autodiff import Tape
from mhtn.errors import CheckpointError, ConfigurationError, DataError
from mhtn.network import COMMON, DISCRIMINATOR, SOURCE, NetworkConfig, StarNetwork, read_checkpoint
from mhtn.trainer import compute_gradients

from conftest import random_batch, tiny_config


def _nonzero_groups(grads):
    return {name for name, mats in grads.items() if any(np.any(m != 0) for m in mats)}


def test_two_modality_structure():
    cfg = tiny_config(modalities=("image", "text"), input_dims={"image": 5, "text": 4})
    net = StarNetwork.build(cfg, seed=0)
    assert [p.modality for p in cfg.pathways()] == [SOURCE, "image", "text"]
    assert set(net.groups) == {SOURCE, "image", "text", COMMON, DISCRIMINATOR}
    assert "classifier" in net.layers


def test_five_modality_discriminator_width():
    mods = ("image", "text", "audio", "video", "model")
    cfg = tiny_config(modalities=mods, input_dims=dict(zip(mods, (5, 4, 3, 6, 2))))
    net = StarNetwork.build(cfg, seed=0)
    assert net.groups[DISCRIMINATOR].matrices[-1].shape == (1, 5)
    assert net.discriminate("video", np.zeros((2, 6))).shape == (2, 5)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tiny_config(specific_widths=(6, 0))
    with pytest.raises(ConfigurationError):
        tiny_config(modalities=("image",), input_dims={"image": 5})
    with pytest.raises(ConfigurationError):
        tiny_config(modalities=("image", "common"), input_dims={"image": 5, "common": 2})
    with pytest.raises(ConfigurationError):
        tiny_config(transfer_layers=(2,))


def test_source_pathway_starts_as_copy_of_image_pathway(tiny_net):
    img = tiny_net.groups["image"].matrices
    src = tiny_net.groups[SOURCE].matrices
    for a, b in zip(img, src[: len(img)]):
        assert np.array_equal(a, b)
        assert a is not b
    assert src[-1].shape == (1, tiny_net.config.num_classes_source)  # source classifier bias


def test_build_is_deterministic():
    a, b = StarNetwork.build(tiny_config(), 11), StarNetwork.build(tiny_config(), 11)
    for name in a.groups:
        for x, y in zip(a.groups[name].matrices, b.groups[name].matrices):
            assert np.array_equal(x, y)
    c = StarNetwork.build(tiny_config(), 12)
    assert not np.array_equal(a.groups["image"].matrices[0], c.groups["image"].matrices[0])


def test_ablations_do_not_shift_earlier_draws():
    full = StarNetwork.build(tiny_config(), 5)
    nosrc = StarNetwork.build(tiny_config(no_source=True, no_adver=True), 5)
    for name in ("image", "text", "audio", COMMON):
        for x, y in zip(full.groups[name].matrices, nosrc.groups[name].matrices):
            assert np.array_equal(x, y)


def test_every_parameter_in_exactly_one_group(tiny_net):
    seen = {}
    for name, g in tiny_net.groups.items():
        for m in g.matrices:
            assert id(m) not in seen
            seen[id(m)] = name
    referenced = {(gname, idx) for table in tiny_net.layers.values() for gname, w, b in table for idx in (w, b)}
    owned = {(name, i) for name, g in tiny_net.groups.items() for i in range(len(g.matrices))}
    assert referenced == owned


def test_forward_shapes_single_document():
    cfg = tiny_config(modalities=("image", "text"), input_dims={"image": 5, "text": 4})
    net = StarNetwork.build(cfg, 0)
    batch = random_batch(cfg, n_docs=1)
    acts = net.forward(Tape(record=False), batch.inputs, batch.source_x)
    assert acts.common.shape == (2, cfg.common_widths[-1])
    assert acts.discriminator.shape == (2, 2)
    np.testing.assert_array_equal(acts.modality_onehots, np.eye(2))
    assert acts.logits["text"].shape == (1, cfg.num_classes_target)
    assert acts.source_logits.shape == (3, cfg.num_classes_source)
    assert [v.shape[1] for v in acts.specific["image"]] == list(cfg.specific_widths)


def test_forward_without_source_pathway():
    cfg = tiny_config(no_source=True)
    net = StarNetwork.build(cfg, 0)
    assert SOURCE not in net.groups
    batch = random_batch(cfg)
    acts = net.forward(Tape(record=False), batch.inputs)
    assert acts.source_specific is None and acts.source_logits is None
    bundle, _ = compute_gradients(net, batch)
    assert bundle.st is None and bundle.sds is None


def test_forward_is_deterministic(tiny_net):
    batch = random_batch(tiny_net.config)
    a = tiny_net.forward(Tape(record=False), batch.inputs, batch.source_x)
    b = tiny_net.forward(Tape(record=False), batch.inputs, batch.source_x)
    assert np.array_equal(a.discriminator.value, b.discriminator.value)
    assert all(np.array_equal(a.logits[m].value, b.logits[m].value) for m in a.logits)


def test_forward_errors(tiny_net):
    batch = random_batch(tiny_net.config)
    with pytest.raises(DataError, match="audio"):
        tiny_net.forward(Tape(), {k: v for k, v in batch.inputs.items() if k != "audio"}, batch.source_x)
    bad = dict(batch.inputs, text=np.zeros((4, 7)))
    with pytest.raises(DataError, match="text"):
        tiny_net.forward(Tape(), bad, batch.source_x)
    with pytest.raises(DataError):
        tiny_net.forward(Tape(), batch.inputs, None)


def test_embed_is_distribution(tiny_net):
    x = np.random.default_rng(0).normal(scale=50, size=(20, 4))
    p = tiny_net.embed("text", x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_embed_unknown_modality(tiny_net):
    with pytest.raises(ConfigurationError):
        tiny_net.embed("video", np.zeros((1, 3)))
    with pytest.raises(DataError):
        tiny_net.embed("audio", np.zeros((1, 4)))


def test_zero_classifier_gives_uniform_embedding(tiny_net):
    w_idx, b_idx = tiny_net.layers["classifier"][0][1:]
    tiny_net.groups[COMMON].matrices[w_idx][:] = 0
    tiny_net.groups[COMMON].matrices[b_idx][:] = 0
    p = tiny_net.embed("image", np.ones((2, 5)))
    np.testing.assert_allclose(p, 1 / 3, atol=1e-15)


def test_embed_batch_invariant(tiny_net):
    x = np.random.default_rng(1).normal(size=(6, 5))
    full = tiny_net.embed("image", x)
    for i in range(6):
        np.testing.assert_allclose(tiny_net.embed("image", x[i]), full[i : i + 1], rtol=1e-12, atol=1e-15)


def test_no_adver_leaves_embed_unchanged():
    full = StarNetwork.build(tiny_config(), 4)
    plain = StarNetwork.build(tiny_config(no_adver=True), 4)
    assert DISCRIMINATOR not in plain.groups
    x = np.random.default_rng(2).normal(size=(5, 4))
    assert np.array_equal(full.embed("text", x), plain.embed("text", x))


# which groups each term may touch (the generator side of mc flows through the reversal layer)
PARTITION = {
    "st": {SOURCE, "image"},
    "sds": {SOURCE},
    "ct": {"image", "text", "audio"},
    "sc": {"image", "text", "audio", COMMON},
    "mc": {"image", "text", "audio", COMMON, DISCRIMINATOR},
}


@pytest.mark.parametrize("term", sorted(PARTITION))
def test_gradient_partition(tiny_net, term):
    batch = random_batch(tiny_net.config, seed=4)
    _, grads = compute_gradients(tiny_net, batch, root=term)
    assert _nonzero_groups(grads) == PARTITION[term]


def test_checkpoint_round_trip(tmp_path, tiny_net):
    path = tmp_path / "net.mhtn"
    tiny_net.save(path)
    back = StarNetwork.load(path, tiny_config())
    for name, g in tiny_net.groups.items():
        for a, b in zip(g.matrices, back.groups[name].matrices):
            assert np.array_equal(a, b)
    header, groups = read_checkpoint(path)
    assert header["digest"] == tiny_config().digest()
    assert list(groups) == list(tiny_net.groups)
    assert path.read_bytes()[:4] == b"MHTN"


def test_checkpoint_digest_mismatch(tmp_path, tiny_net):
    path = tmp_path / "net.mhtn"
    tiny_net.save(path)
    with pytest.raises(CheckpointError, match="digest"):
        StarNetwork.load(path, tiny_config(common_lr=0.02))


def test_checkpoint_corruption(tmp_path, tiny_net):
    path = tmp_path / "net.mhtn"
    tiny_net.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.mhtn")


def test_config_dict_round_trip():
    cfg = tiny_config(no_sds=True)
    again = NetworkConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.digest() == cfg.digest()
    with pytest.raises(ConfigurationError):
        NetworkConfig.from_dict(dict(cfg.to_dict(), bogus=1))
