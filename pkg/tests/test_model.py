import pytest
import torch

import oracles
from anticomp.core import InvalidArgumentError, InvalidStateError
from anticomp.model import (
    CHECKPOINT_GROUPS,
    Discriminator,
    EncoderConfig,
    ModelBundle,
    Predictor,
    discriminate,
    encode_project,
    load_bundle_state,
    load_checkpoint,
    momentum_update,
    predict_logits,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    return ModelBundle(with_discriminator=True)


def test_embedding_shape_and_determinism(bundle):
    x = torch.rand(5, 3, 64, 64)
    z1 = encode_project(bundle.encoder, bundle.projector, x)
    z2 = encode_project(bundle.encoder, bundle.projector, x)
    assert z1.shape == (5, 512)
    assert torch.equal(z1, z2)


def test_one_pixel_changes_embedding(bundle):
    x = torch.rand(1, 3, 64, 64)
    y = x.clone()
    y[0, 1, 30, 30] += 0.5
    assert not torch.equal(bundle.embed(x), bundle.embed(y))


def test_wrong_frame_shape_rejected(bundle):
    with pytest.raises(InvalidArgumentError):
        encode_project(bundle.encoder, bundle.projector, torch.rand(1, 3, 32, 32))


def test_predictor_contract():
    pred = Predictor(512)
    logits = predict_logits(pred, torch.zeros(512))
    assert logits.shape == (2,) and torch.isfinite(logits).all()
    assert torch.allclose(logits, pred.net[2].bias + pred.net[2].weight @ torch.relu(pred.net[0].bias))
    probs = torch.softmax(predict_logits(pred, torch.randn(7, 512)), dim=-1)
    assert torch.allclose(probs.sum(-1), torch.ones(7), atol=1e-6)
    with pytest.raises(InvalidArgumentError):
        predict_logits(pred, torch.zeros(8))


def test_discriminator_contract():
    d = Discriminator()
    assert sum(isinstance(m, torch.nn.Linear) for m in d.modules()) == 4
    assert torch.isfinite(discriminate(d, torch.zeros(1, 512))).all()
    out = discriminate(d, torch.randn(6, 512))
    assert out.shape == (6,)
    s = torch.sigmoid(out)
    assert ((s > 0) & (s < 1)).all()
    with pytest.raises(InvalidStateError):
        discriminate(None, torch.zeros(1, 512))


def test_twins_start_bit_equal_and_frozen():
    torch.manual_seed(3)
    b = ModelBundle()
    for p, q in zip(b.encoder.parameters(), b.encoder_momentum.parameters()):
        assert torch.equal(p, q) and not q.requires_grad
    for p, q in zip(b.projector.parameters(), b.projector_momentum.parameters()):
        assert torch.equal(p, q) and not q.requires_grad
    assert b.twins_consistent()


def test_encoder_needs_two_stages():
    with pytest.raises(InvalidArgumentError):
        EncoderConfig(channel_widths=[16])


def perturbed_bundle(seed=0):
    torch.manual_seed(seed)
    b = ModelBundle()
    with torch.no_grad():
        for p in b.online_parameters():
            p.add_(torch.randn_like(p))
    return b


def test_momentum_degenerate_coefficients():
    b = perturbed_bundle()
    before = [p.clone() for p in b.momentum_parameters()]
    momentum_update(b, 1.0)
    assert all(torch.equal(a, p) for a, p in zip(before, b.momentum_parameters()))
    momentum_update(b, 0.0)
    online = list(b.encoder.parameters()) + list(b.projector.parameters())
    assert all(torch.equal(a, p) for a, p in zip(online, b.momentum_parameters()))


def test_momentum_scalar_example():
    b = ModelBundle()
    with torch.no_grad():
        for p in b.momentum_parameters():
            p.fill_(1.0)
        for p in b.online_parameters():
            p.fill_(0.0)
    momentum_update(b, 0.999)
    assert all(torch.allclose(p, torch.full_like(p, 0.999)) for p in b.momentum_parameters())


def test_momentum_leaves_online_and_predictor_alone():
    b = perturbed_bundle(1)
    online = [p.clone() for p in b.online_parameters()]
    momentum_update(b)
    assert all(torch.equal(a, p) for a, p in zip(online, b.online_parameters()))


def test_k_step_ema_matches_closed_form():
    b = perturbed_bundle(2).double()
    p0 = [p.clone() for p in b.momentum_parameters()]
    target = [p.clone() for p in list(b.encoder.parameters()) + list(b.projector.parameters())]
    for k in range(1, 21):
        momentum_update(b, 0.999)
        for start, p, pm in zip(p0, target, b.momentum_parameters()):
            assert torch.allclose(pm, oracles.ema_closed_form(start, p, 0.999, k), atol=1e-6, rtol=0)


def test_checkpoint_round_trip(tmp_path, bundle):
    path = tmp_path / "ck.pt"
    save_checkpoint(path, bundle, {"a": 1}, 17)
    payload = load_checkpoint(path)
    assert payload["global_step"] == 17 and payload["config"] == {"a": 1}
    assert set(payload["params"]) == set(CHECKPOINT_GROUPS)
    torch.manual_seed(99)
    other = load_bundle_state(ModelBundle(with_discriminator=True), payload["params"])
    x = torch.rand(2, 3, 64, 64)
    assert torch.equal(other.classify(x), bundle.classify(x))
    assert not (tmp_path / "ck.pt.tmp").exists()


def test_checkpoint_missing_group(bundle):
    state = {"encoder_online": bundle.encoder.state_dict()}
    with pytest.raises(InvalidArgumentError):
        load_bundle_state(ModelBundle(), state)
