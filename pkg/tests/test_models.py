import colorsys

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from contentattack.attack import run_attack
from contentattack.config import AttackConfig
from contentattack.diffusion import compute_schedule
from contentattack.errors import CapabilityError, InterfaceError, ParameterError, RegistrationError
from contentattack.models import (Backend, Capabilities, Registry, TorchClassifier, TorchNoisePredictor,
                                  adapter_register)
from contentattack.models.data import (CLASS_NAMES, COLOR_FAMILIES, SHAPES, class_prompt, load_dataset, make_dataset,
                                      render, save_dataset)
from contentattack.models.gradcheck import check_input_gradient
from contentattack.models.toy import (ConvNet, FitConfig, PatchNet, PromptEmbedder, TinyUNet,
                                      ToyBackendBundle, decode_latent, encode_image, fit_toy_bundle,
                                      heldout_noise_mse)


class Linear(nn.Module):
    def __init__(self, W):
        super().__init__()
        self.W = nn.Parameter(W)

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.W.T


def _linear_classifier(seed=0, k=4, shape=(1, 2, 3), dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(k, int(np.prod(shape)), generator=g, dtype=dtype)
    return TorchClassifier(Linear(W), k, shape), W


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), y=st.integers(0, 3))
def test_linear_softmax_gradient_closed_form(seed, y):
    clf, W = _linear_classifier(seed)
    x = torch.rand(1, 1, 2, 3, generator=torch.Generator().manual_seed(seed + 7), dtype=torch.float64)
    p = torch.softmax(W @ x.reshape(-1), 0)
    expected = (p - torch.nn.functional.one_hot(torch.tensor(y), 4).double()) @ W
    torch.testing.assert_close(clf.input_gradient(x, y).reshape(-1), expected, rtol=1e-10, atol=1e-12)


def test_gradient_shape_and_logits_length(classifiers):
    x = torch.rand(2, 3, 16, 16)
    for clf in classifiers.values():
        assert clf.logits(x).shape == (2, clf.num_classes)
        assert clf.logits(x[0]).shape == (clf.num_classes,)
        assert clf.input_gradient(x, 1).shape == x.shape


def test_label_out_of_range(classifiers):
    clf = classifiers["toy-cnn"]
    with pytest.raises(ParameterError):
        clf.input_gradient(torch.rand(1, 3, 16, 16), clf.num_classes)
    with pytest.raises(ParameterError):
        clf.input_gradient(torch.rand(1, 3, 16, 16), -1)


def test_classifier_shape_mismatch(classifiers):
    with pytest.raises(InterfaceError):
        classifiers["toy-vit"].logits(torch.rand(1, 3, 8, 8))


def test_margin_loss_gradient_linear():
    clf, W = _linear_classifier(3)
    x = torch.rand(1, 1, 2, 3, dtype=torch.float64)
    logits = W @ x.reshape(-1)
    other = max((i for i in range(4) if i != 2), key=lambda i: logits[i].item())
    torch.testing.assert_close(clf.input_gradient(x, 2, "margin").reshape(-1), W[other] - W[2])
    with pytest.raises(ParameterError):
        clf.input_gradient(x, 2, "hinge")


@pytest.mark.parametrize("name", ["toy-cnn", "toy-vit"])
def test_toy_classifier_gradients_match_finite_differences(bundle, classifiers, name):
    images, labels, _ = make_dataset(4, seed=99)
    rng = np.random.default_rng(5)
    for x, y in zip(images, labels):
        # soften the inputs toward random noise so the loss is not saturated
        x = 0.5 * torch.from_numpy(x) + 0.5 * torch.from_numpy(rng.uniform(0, 1, x.shape).astype(np.float32))
        assert check_input_gradient(classifiers[name], x, int(y), step=1e-4) < 1e-3
    assert next(bundle.classifier_modules[name].parameters()).dtype == torch.float32


def test_gradcheck_flags_wrong_gradient():
    clf, _ = _linear_classifier(1)

    class Broken(TorchClassifier):
        def input_gradient(self, x, y, loss_kind="ce"):
            return 2 * super().input_gradient(x, y, loss_kind)

    broken = Broken(clf.module, 4, (1, 2, 3))
    x = torch.rand(1, 2, 3)
    assert check_input_gradient(clf, x, 1) < 1e-6
    assert check_input_gradient(broken, x, 1) > 0.1


def test_zero_weight_predictor_outputs_zero():
    unet = TinyUNet(width=8)
    for p in unet.parameters():
        nn.init.zeros_(p)
    npred = TorchNoisePredictor(unet, (3, 16, 16), (16,))
    z = torch.randn(2, 3, 16, 16)
    assert torch.equal(npred.predict(z, 500, torch.zeros(16)), torch.zeros_like(z))
    # velocity variant: zero body leaves only the parametrization's skip path
    vnet = TinyUNet(width=8, prediction="v")
    for p in vnet.parameters():
        nn.init.zeros_(p)
    a = vnet.alpha_bars[500]
    torch.testing.assert_close(TorchNoisePredictor(vnet, (3, 16, 16), (16,)).predict(z, 500, torch.zeros(16)),
                               (1 - a).sqrt() * z)


def test_embed_gain_is_a_reparametrization():
    torch.manual_seed(0)
    unet = TinyUNet(width=8).eval()
    z, e = torch.randn(1, 3, 16, 16), torch.randn(1, 16)
    ref = unet(z, torch.tensor([300]), e)
    unet.embed_gain = 70.0
    torch.testing.assert_close(unet(z, torch.tensor([300]), e / 70.0), ref, rtol=1e-5, atol=1e-6)


def test_predict_is_deterministic(backend):
    z = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    e = backend.embed(class_prompt(0))
    npred = backend.noise_predictor
    assert torch.equal(npred.predict(z, 321, e), npred.predict(z, 321, e))
    with pytest.raises(InterfaceError):
        npred.predict(z[:, :2], 321, e)
    with pytest.raises(InterfaceError):
        npred.predict(z, 321, e[:5])


def test_heldout_noise_mse_below_twice_training_floor(bundle):
    floor = bundle.metrics["train_noise_mse"]
    images, labels, prompts = make_dataset(256, seed=4242)
    lookup = {p: i for i, p in enumerate(bundle.vocab)}
    idx = torch.tensor([lookup[p] for p in prompts])
    mse = heldout_noise_mse(bundle.unet, bundle.prompt_table, torch.from_numpy(images), idx,
                            compute_schedule(), seed=77)
    assert mse < 2 * floor


def test_classifiers_above_chance(bundle, classifiers):
    images, labels, _ = make_dataset(300, seed=31337)
    x = torch.from_numpy(images)
    for name, clf in classifiers.items():
        acc = (clf.predict(x) == torch.from_numpy(labels)).float().mean().item()
        assert acc > 1.0 / len(CLASS_NAMES) + 0.3, name
    assert len({type(m) for m in bundle.classifier_modules.values()}) >= 2


def test_codec_round_trip():
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(decode_latent(encode_image(x)), x)


def test_prompt_embedder():
    table = torch.randn(3, 16)
    emb = PromptEmbedder(table, ["", "a", "b"])
    assert torch.equal(emb("a"), table[1])
    unknown = emb("never seen")
    assert unknown.shape == (16,)
    assert torch.equal(unknown, emb("never seen"))
    assert not torch.equal(unknown, emb("also unseen"))


# --- registry --------------------------------------------------------------------

def _toy_backend(differentiable=True):
    npred = TorchNoisePredictor(TinyUNet(width=8), (3, 16, 16), (16,), Capabilities(differentiable=differentiable))
    return Backend(npred, lambda p: torch.zeros(16), encode_image, decode_latent, (3, 16, 16))


def test_registry_resolution_and_errors(classifiers):
    reg = Registry()
    b = _toy_backend()
    assert adapter_register("toy", b, reg) is b
    assert reg.backend("toy") is b
    with pytest.raises(RegistrationError):
        adapter_register("toy", b, reg)
    with pytest.raises(RegistrationError, match="unknown backend"):
        reg.backend("sd-v1-4")
    with pytest.raises(RegistrationError):
        reg.classifier("nope")
    with pytest.raises(RegistrationError):
        reg.register("thing", object())
    for name, clf in classifiers.items():
        reg.register(name, clf)
    assert reg.classifier_names() == ["toy-cnn", "toy-vit"]


def test_registry_rejects_missing_capabilities():
    b = _toy_backend()
    b.noise_predictor.capabilities = None
    with pytest.raises(RegistrationError, match="capabilities"):
        Registry().register("x", b)


def test_non_differentiable_backend_rejected_at_attack_start(bundle, classifiers):
    from contentattack.inversion import InversionRecord

    backend = _toy_backend(differentiable=False)
    s = compute_schedule(T=2)
    z = torch.zeros(1, 3, 16, 16)
    record = InversionRecord(z, [z, z, z], [torch.zeros(16)] * 2, torch.zeros(16), 7.5, [], s, torch.zeros(3, 16, 16))
    with pytest.raises(CapabilityError):
        run_attack(record, classifiers["toy-cnn"], 0, AttackConfig(T=2, N_a=1), backend)


def test_bundle_register(bundle):
    reg = bundle.register("toy", Registry())
    assert set(reg.classifier_names()) == {"toy-cnn", "toy-vit"}
    assert reg.backend("toy").image_shape == (3, 16, 16)


# --- dataset and bundle persistence -------------------------------------------------

def test_dataset_balanced_and_reproducible(tmp_path):
    a = make_dataset(18, seed=3)
    b = make_dataset(18, seed=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.bincount(a[1]).tolist() == [2] * len(CLASS_NAMES)
    assert a[0].min() >= 0 and a[0].max() <= 1 and a[0].dtype == np.float32
    save_dataset(tmp_path / "d.npz", *a)
    back = load_dataset(tmp_path / "d.npz")
    assert np.array_equal(back[0], a[0]) and list(back[2]) == a[2]
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing.npz")


def test_foreground_hue_matches_color_family():
    rng = np.random.default_rng(8)
    n_fam = len(COLOR_FAMILIES)
    for label in range(len(CLASS_NAMES)):
        if SHAPES[label % len(SHAPES)] != "disk":
            continue
        for _ in range(20):
            img = render(label, rng).astype(np.float64)
            # the disk centre is pure foreground up to the small pixel noise
            rgb = img[:, 7:9, 7:9].mean(axis=(1, 2))
            hue = colorsys.rgb_to_hsv(*rgb)[0]
            family = int(((hue * n_fam) + 0.5) % n_fam)
            sat = colorsys.rgb_to_hsv(*rgb)[1]
            if sat > 0.3:  # hue is ill-defined for washed-out pixels
                assert family == label // len(SHAPES), (label, rgb)
    with pytest.raises(ValueError):
        render(len(CLASS_NAMES), rng)


def test_tiny_fit_is_reproducible_and_round_trips(tmp_path):
    cfg = FitConfig(n_train=24, n_heldout=6, diffusion_iters=3, diffusion_batch=8, classifier_epochs=1,
                    classifier_batch=8, unet_width=8)
    a, b = fit_toy_bundle(cfg), fit_toy_bundle(cfg)
    assert a.weights_digest() == b.weights_digest()
    a.save(tmp_path / "b")
    loaded = ToyBackendBundle.load(tmp_path / "b")
    assert loaded.weights_digest() == a.weights_digest()
    assert loaded.config == cfg
    blob = bytearray((tmp_path / "b" / "weights.bin").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "b" / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        ToyBackendBundle.load(tmp_path / "b")
    with pytest.raises(FileNotFoundError):
        ToyBackendBundle.load(tmp_path / "none")


def test_architectures_output_shapes():
    x = torch.rand(3, 3, 16, 16)
    assert ConvNet(6)(x).shape == (3, 6)
    assert PatchNet(6)(x).shape == (3, 6)
