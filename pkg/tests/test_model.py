import numpy as np
import pytest

from mcvae import autodiff as ad
from mcvae.autodiff import Tensor
from mcvae.config import default_modalities
from mcvae.losses import model_losses, reconstruction_loss
from mcvae.model import (
    Decoder,
    Encoder,
    FusionNetwork,
    McvaeModel,
    ModalityLatent,
    load_checkpoint,
    missing_latent,
    reparameterize,
    save_checkpoint,
)
from mcvae.nn import make_rng

from helpers import FD_TOL, TINY_DIMS, check_params, tiny_batch, tiny_model

SPECS = default_modalities(TINY_DIMS)


def test_encoder_output_width_default():
    enc = Encoder(default_modalities()[1], hidden=256, d_out=128, dropout=0.5, rng=make_rng(0))
    enc.eval()
    x = Tensor(make_rng(1).normal(size=(3, 64)))
    mu, logvar = enc(x, None)
    assert mu.shape == logvar.shape == (3, 128)
    mu2, _ = enc(x, None)
    assert np.array_equal(mu.data, mu2.data)


def test_encoder_gradient_train_mode():
    enc = Encoder(SPECS[3], hidden=8, d_out=4, dropout=0.3, rng=make_rng(0))
    x = Tensor(make_rng(2).normal(size=(5, TINY_DIMS[3])))
    loss = lambda: ad.mean(enc(x, make_rng(3))[0])
    assert check_params(loss, dict(enc.named_parameters())) < FD_TOL


def test_encoder_logvar_clipped():
    enc = Encoder(SPECS[0], hidden=8, d_out=4, dropout=0.0, rng=make_rng(0))
    enc.logvar_head.bias.data[:] = 50.0
    enc.eval()
    _, logvar = enc(Tensor(np.zeros((2, TINY_DIMS[0]))), None)
    assert np.all(logvar.data == 10.0)


def test_reparameterize_examples():
    mu, lv = Tensor(np.array([[0.5, -1.0]])), Tensor(np.zeros((1, 2)))
    assert np.array_equal(reparameterize(mu, lv, np.zeros((1, 2))).data, mu.data)
    assert np.array_equal(reparameterize(mu, lv, np.ones((1, 2))).data, mu.data + 1)


def test_reparameterize_moments():
    mu, lv = np.array([[1.0, -2.0]]), np.array([[0.0, np.log(4.0)]])
    noise = make_rng(4).standard_normal((10_000, 2))
    z = reparameterize(Tensor(np.repeat(mu, 10_000, 0)), Tensor(np.repeat(lv, 10_000, 0)), noise).data
    np.testing.assert_allclose(z.mean(0), mu[0], atol=0.05)
    np.testing.assert_allclose(z.var(0), [1.0, 4.0], rtol=0.05)


def test_missing_latent():
    lat = missing_latent(128)
    assert not lat.available and lat.z_full.shape == (1, 128) and not lat.z_full.data.any()


def single_latent(z: np.ndarray) -> ModalityLatent:
    rows = np.arange(z.shape[0])
    t = Tensor(z)
    return ModalityLatent(rows, t, t, t, t)


def test_fusion_hand_example():
    model = tiny_model()
    z = np.full((1, 4), 2.0)
    lats = [single_latent(z)] + [missing_latent(4, 1) for _ in range(3)]
    agg, fused = model.fuse(lats, np.array([[True, False, False, False]]), apply_network=False)
    assert np.array_equal(agg.data, np.ones((1, 4))) and fused is agg


def test_fusion_duplicate_latents_average():
    model = tiny_model()
    z = make_rng(5).normal(size=(2, 4))
    one, _ = model.fuse([single_latent(z)] + [missing_latent(4, 2)] * 3,
                        np.array([[1, 0, 0, 0]] * 2, bool), apply_network=False)
    two, _ = model.fuse([single_latent(z), single_latent(z)] + [missing_latent(4, 2)] * 2,
                        np.array([[1, 1, 0, 0]] * 2, bool), apply_network=False)
    np.testing.assert_allclose(one.data, two.data, rtol=1e-15)


def test_fusion_rejects_empty_row():
    model = tiny_model()
    with pytest.raises(ValueError, match="at least one"):
        model.fuse([missing_latent(4, 1)] * 4, np.zeros((1, 4), bool))


def test_fusion_network_gradient():
    net = FusionNetwork(4, 8, 0.3, make_rng(0))
    v = Tensor(make_rng(6).normal(size=(5, 4)))
    assert check_params(lambda: ad.mean(ad.square(net(v, make_rng(7)))), dict(net.named_parameters())) < FD_TOL


def test_decoder_shape_gradient_and_clinical_error():
    dec = Decoder(SPECS[2], hidden=8, d_out=4, dropout=0.3, rng=make_rng(0))
    z = Tensor(make_rng(8).normal(size=(5, 4)))
    target = make_rng(9).normal(size=(5, TINY_DIMS[2]))
    assert dec(z, make_rng(1)).shape == (5, TINY_DIMS[2])
    loss = lambda: reconstruction_loss({2: target}, {2: dec(z, make_rng(10))}, 5)
    assert check_params(loss, dict(dec.named_parameters())) < FD_TOL
    with pytest.raises(ValueError, match="not reconstructed"):
        tiny_model().decode(0, z)


def test_head_examples():
    model = tiny_model()
    z = Tensor(make_rng(11).normal(size=(3, 4)))
    w = model.head.weight.data[0].copy()
    base = model.predict_log_hazard(z).data
    assert np.all(model.predict_log_hazard(Tensor(z.data + 0.7 * w)).data > base)
    model.head.weight.data[:] = 0.0
    assert np.array_equal(model.predict_log_hazard(z).data, np.zeros(3))


def test_full_model_gradient_train_mode():
    model = tiny_model(dropout=0.2)
    feats, mask, times, events = tiny_batch(n=7)

    def loss():
        fp = model.forward(feats, mask, make_rng(12))
        return model_losses(model, feats, fp, times, events, beta=0.4, temperature=0.1)[0]

    assert check_params(loss, dict(model.named_parameters()), max_entries=6) < FD_TOL


def perturb_masked(feats, mask, rng):
    out = [x.copy() for x in feats]
    for k in range(len(out)):
        rows = ~mask[:, k]
        out[k][rows] = rng.normal(scale=100.0, size=out[k][rows].shape)
    return out


def snapshot(model, feats, mask, times, events, training):
    model.train(training)
    fp = model.forward(feats, mask, make_rng(13))
    _, br = model_losses(model, feats, fp, times, events, beta=0.5, temperature=0.1)
    lat = [l.z_full.data for l in fp.latents]
    return lat, fp.aggregate.data, fp.fused.data, fp.log_hazard.data, br.as_record()


def test_masked_inputs_never_read():
    model = tiny_model(dropout=0.3)
    rng = make_rng(14)
    for _ in range(10):
        feats, mask, times, events = tiny_batch(n=10, seed=int(rng.integers(1 << 30)))
        noisy = perturb_masked(feats, mask, rng)
        for training in (True, False):
            a = snapshot(model, feats, mask, times, events, training)
            b = snapshot(model, noisy, mask, times, events, training)
            for x, y in zip(a[0], b[0]):
                assert np.array_equal(x, y)
            for x, y in zip(a[1:4], b[1:4]):
                assert np.array_equal(x, y)
            assert a[4] == b[4]


def test_risk_scores_restore_mode_and_eval_determinism():
    model = tiny_model()
    feats, mask, _, _ = tiny_batch()
    model.train()
    r1 = model.risk_scores(feats, mask)
    assert model.training
    assert np.array_equal(r1, model.risk_scores(feats, mask))


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model()
    feats, mask, times, events = tiny_batch(n=12)
    model.forward(feats, mask, make_rng(0))  # move BN running stats off their init
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, {"note": "x"})
    loaded, cfg = load_checkpoint(path)
    assert cfg == {"note": "x"}
    assert np.array_equal(loaded.risk_scores(feats, mask), model.risk_scores(feats, mask))
    for (n1, a), (n2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and np.array_equal(a, b)


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError, match="unsupported checkpoint format"):
        load_checkpoint(path)


def test_clinical_must_not_be_reconstructed():
    specs = list(SPECS)
    specs[0] = type(specs[0])("clinical", 3, 2, True)
    with pytest.raises(ValueError):
        McvaeModel(specs, d_out=4, hidden=8)


def test_fully_masked_modality_gets_no_gradient():
    model = tiny_model(dropout=0.2)
    feats, mask, times, events = tiny_batch(n=8)
    mask[:, 2] = False
    fp = model.forward(feats, mask, make_rng(15))
    ad.backward(model_losses(model, feats, fp, times, events, beta=1.0, temperature=0.1)[0])
    for name, p in model.named_parameters():
        if name.startswith(("encoders.2.", "decoders.2.")):
            assert p.grad is None or not p.grad.any(), name
    assert model.encoders[1].mu_head.weight.grad.any()


def test_reparameterization_passes_gradient():
    mu = Tensor(make_rng(16).normal(size=(3, 2)), requires_grad=True)
    lv = Tensor(make_rng(17).normal(size=(3, 2)), requires_grad=True)
    ad.backward(ad.sum_(ad.square(reparameterize(mu, lv, make_rng(18).standard_normal((3, 2))))))
    assert np.all(mu.grad != 0) and np.all(lv.grad != 0)
