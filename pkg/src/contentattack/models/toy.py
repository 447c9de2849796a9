"""Desk-scale stand-ins for the diffusion backend and target classifiers."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..diffusion import DiffusionSchedule, compute_schedule, forward_diffuse
from .base import Backend, Capabilities, Registry, TorchClassifier, TorchNoisePredictor, registry
from .data import CLASS_NAMES, class_prompt, make_dataset

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EMBED_DIM = 16


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Two-resolution UNet conditioned on timestep and a prompt embedding via FiLM.

    With ``prediction="eps"`` the network body predicts the noise directly. With
    ``prediction="v"`` it predicts velocity ``v = sqrt(a) eps - sqrt(1 - a) x0``
    and ``forward`` converts it to a noise prediction ``sqrt(1 - a) z + sqrt(a) v``.
    """

    def __init__(self, channels=3, width=32, embed_dim=EMBED_DIM, emb_dim=64, alpha_bars=None,
                 embed_gain=1.0, prediction="eps"):
        super().__init__()
        if prediction not in ("eps", "v"):
            raise ValueError(f"unknown prediction target {prediction!r}")
        self.prediction = prediction
        self.embed_gain = embed_gain
        if alpha_bars is None:
            alpha_bars = compute_schedule().alpha_bars
        self.register_buffer("alpha_bars", torch.as_tensor(alpha_bars, dtype=torch.float32))
        self.temb = nn.Sequential(nn.Linear(width, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cemb = nn.Sequential(nn.Linear(embed_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.width = width
        self.conv_in = nn.Conv2d(channels, width, 3, padding=1)
        self.down1 = ResBlock(width, width, emb_dim)
        self.pool = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * width, 2 * width, emb_dim)
        self.mid2 = ResBlock(2 * width, 2 * width, emb_dim)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.up1 = ResBlock(2 * width, width, emb_dim)
        self.norm_out = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1)

    def forward(self, z, t, e):
        if self.prediction == "eps":
            return self.body(z, t, e)
        a = self.alpha_bars[t].reshape(-1, 1, 1, 1)
        return (1 - a).sqrt() * z + a.sqrt() * self.body(z, t, e)

    def body(self, z, t, e):
        emb = self.temb(timestep_embedding(t, self.width)) + self.cemb(self.embed_gain * e)
        emb = F.silu(emb)
        h0 = self.down1(self.conv_in(z), emb)
        h = self.mid2(self.mid1(self.pool(h0), emb), emb)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up1(torch.cat([h, h0], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class ConvNet(nn.Module):
    def __init__(self, num_classes, channels=3, resize=1):
        super().__init__()
        self.resize = resize
        self.features = nn.Sequential(
            nn.Conv2d(channels, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.head = nn.Linear(64, num_classes)

    def forward(self, x):
        x = F.avg_pool2d(x, self.resize) if self.resize > 1 else x
        return self.head(self.features(x).mean(dim=(2, 3)))


class PatchNet(nn.Module):
    """Small vision transformer: conv stem, 4x4 patches, two encoder layers, mean pooling."""

    def __init__(self, num_classes, channels=3, size=16, patch=4, dim=48, depth=2, heads=4, resize=1):
        super().__init__()
        self.resize = resize
        size, patch = size // resize, max(1, patch // resize)
        self.stem = nn.Sequential(nn.Conv2d(channels, 32, 3, padding=1), nn.GELU())
        self.embed = nn.Conv2d(32, dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(1, (size // patch) ** 2, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, num_classes)

    def forward(self, x):
        x = F.avg_pool2d(x, self.resize) if self.resize > 1 else x
        tokens = self.embed(self.stem(x)).flatten(2).transpose(1, 2) + self.pos
        return self.head(self.norm(self.encoder(tokens)).mean(dim=1))


class PromptEmbedder:
    """Maps prompt strings to fixed-length vectors.

    Known prompts use their learned rows; unknown prompts get a deterministic
    vector seeded from the prompt's SHA-256 digest at the table's typical norm.
    """

    def __init__(self, table: torch.Tensor, vocab: list[str]):
        self.table = table.detach()
        self.vocab = list(vocab)
        self.index = {p: i for i, p in enumerate(self.vocab)}

    def __call__(self, prompt: str) -> torch.Tensor:
        if prompt in self.index:
            return self.table[self.index[prompt]].clone()
        seed = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:8], "little")
        g = torch.Generator().manual_seed(seed)
        v = torch.randn(self.table.shape[1], generator=g)
        return v / v.norm() * self.table.norm(dim=1).mean()


def encode_image(x: torch.Tensor) -> torch.Tensor:
    return 2.0 * x - 1.0


def decode_latent(z: torch.Tensor) -> torch.Tensor:
    return (z + 1.0) / 2.0


@dataclass
class FitConfig:
    seed: int = 0
    n_train: int = 6000
    n_heldout: int = 300
    image_size: int = 16
    num_classes: int = len(CLASS_NAMES)
    diffusion_iters: int = 15000
    diffusion_batch: int = 64
    diffusion_lr: float = 2e-3
    cond_drop: float = 0.15
    classifier_epochs: int = 15
    classifier_batch: int = 64
    classifier_lr: float = 2e-3
    # keeps toy classifiers from saturating their softmax, which would zero the
    # float32 cross-entropy gradient on confidently classified images
    label_smoothing: float = 0.1
    # std of Gaussian pixel noise added to classifier training inputs
    classifier_noise: float = 0.3
    # classifiers see the image area-downsampled by this factor, as real
    # pipelines resize generator output to the classifier's input resolution
    classifier_resize: int = 2
    unet_width: int = 16
    # prompt vectors are stored at 1/embed_gain scale and amplified inside the UNet
    embed_gain: float = 70.0
    prediction: str = "eps"


@dataclass
class ToyBackendBundle:
    config: FitConfig
    unet: TinyUNet
    prompt_table: torch.Tensor
    vocab: list[str]
    classifier_modules: dict[str, nn.Module]
    metrics: dict = field(default_factory=dict)

    @property
    def image_shape(self) -> tuple:
        return (3, self.config.image_size, self.config.image_size)

    def noise_predictor(self) -> TorchNoisePredictor:
        return TorchNoisePredictor(self.unet, self.image_shape, (EMBED_DIM,),
                                   Capabilities(differentiable=True, concurrent_safe=True))

    def backend(self) -> Backend:
        return Backend(self.noise_predictor(), PromptEmbedder(self.prompt_table, self.vocab),
                       encode_image, decode_latent, self.image_shape)

    def classifiers(self) -> dict[str, TorchClassifier]:
        return {name: TorchClassifier(m, self.config.num_classes, self.image_shape,
                                      Capabilities(differentiable=True, concurrent_safe=True))
                for name, m in self.classifier_modules.items()}

    def register(self, name: str = "toy", reg: Registry | None = None) -> Registry:
        reg = reg or registry
        for n in [name, *self.classifier_modules]:
            reg.unregister(n)
        reg.register(name, self.backend())
        for cname, clf in self.classifiers().items():
            reg.register(cname, clf)
        return reg

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for _, arr in self._tensors():
            h.update(arr.tobytes())
        return h.hexdigest()

    def _tensors(self):
        yield "prompt_table", self.prompt_table.detach().numpy().astype("<f4")
        for prefix, mod in [("unet", self.unet), *self.classifier_modules.items()]:
            for k, v in mod.state_dict().items():
                yield f"{prefix}.{k}", v.detach().numpy().astype("<f4")

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index, offset, chunks = [], 0, []
        for name, arr in self._tensors():
            b = np.ascontiguousarray(arr).tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
            offset += len(b)
            chunks.append(b)
        (directory / "weights.bin").write_bytes(b"".join(chunks))
        meta = {
            "format_version": FORMAT_VERSION,
            "kind": "toy-backend-bundle",
            "config": asdict(self.config),
            "vocab": self.vocab,
            "classifiers": list(self.classifier_modules),
            "class_names": list(CLASS_NAMES[: self.config.num_classes]),
            "embedding_shape": [EMBED_DIM],
            "image_shape": list(self.image_shape),
            "capabilities": {"differentiable": True, "concurrent_safe": True},
            "metrics": self.metrics,
            "weights_sha256": self.weights_digest(),
            "tensors": index,
        }
        (directory / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "ToyBackendBundle":
        directory = Path(directory)
        meta_path = directory / "bundle.json"
        if not meta_path.is_file():
            raise FileNotFoundError(f"no bundle.json in {directory}")
        meta = json.loads(meta_path.read_text())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported bundle format {meta.get('format_version')}")
        blob = (directory / "weights.bin").read_bytes()
        tensors = {}
        for entry in meta["tensors"]:
            raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
            tensors[entry["name"]] = torch.from_numpy(
                np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy())
        config = FitConfig(**meta["config"])
        unet, clfs = _build_modules(config)
        _load_prefixed(unet, tensors, "unet")
        for name, mod in clfs.items():
            _load_prefixed(mod, tensors, name)
        bundle = cls(config, unet.eval(), tensors["prompt_table"], meta["vocab"],
                     {k: v.eval() for k, v in clfs.items()}, meta["metrics"])
        if bundle.weights_digest() != meta["weights_sha256"]:
            raise ValueError(f"weights checksum mismatch in {directory}")
        return bundle


def _load_prefixed(module, tensors, prefix):
    state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    ref = module.state_dict()
    # integer buffers round-trip through float32
    state = {k: v.to(ref[k].dtype) for k, v in state.items()}
    module.load_state_dict(state)


def _build_modules(config: FitConfig):
    unet = TinyUNet(width=config.unet_width, embed_gain=config.embed_gain, prediction=config.prediction)
    r = config.classifier_resize
    clfs = {"toy-cnn": ConvNet(config.num_classes, resize=r),
            "toy-vit": PatchNet(config.num_classes, size=config.image_size, resize=r)}
    return unet, clfs


def _fit_diffusion(unet, table, x, prompt_idx, config, schedule, gen):
    params = list(unet.parameters()) + [table]
    opt = torch.optim.Adam(params, lr=config.diffusion_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.diffusion_iters)
    n = x.shape[0]
    for it in range(config.diffusion_iters):
        idx = torch.randint(0, n, (config.diffusion_batch,), generator=gen)
        z0 = encode_image(x[idx])
        t = torch.randint(0, schedule.total_train_steps, (len(idx),), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        zt = forward_diffuse(z0, t, eps, schedule)
        pi = prompt_idx[idx].clone()
        pi[torch.rand(len(idx), generator=gen) < config.cond_drop] = 0
        if unet.prediction == "v":
            a = torch.as_tensor(schedule.alpha_bars, dtype=torch.float32)[t].reshape(-1, 1, 1, 1)
            target = a.sqrt() * eps - (1 - a).sqrt() * z0
        else:
            target = eps
        loss = F.mse_loss(unet.body(zt, t, table[pi]), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if it % 500 == 0:
            log.info("diffusion iter %d loss %.4f", it, loss.item())
    return loss.item()


def heldout_noise_mse(unet, table, x, prompt_idx, schedule, seed=1234) -> float:
    gen = torch.Generator().manual_seed(seed)
    z0 = encode_image(x)
    t = torch.randint(0, schedule.total_train_steps, (len(x),), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    with torch.no_grad():
        pred = unet(forward_diffuse(z0, t, eps, schedule), t, table[prompt_idx])
    return F.mse_loss(pred, eps).item()


def _fit_classifier(module, x, y, config, gen):
    opt = torch.optim.Adam(module.parameters(), lr=config.classifier_lr)
    n = x.shape[0]
    for epoch in range(config.classifier_epochs):
        perm = torch.randperm(n, generator=gen)
        for s in range(0, n, config.classifier_batch):
            idx = perm[s: s + config.classifier_batch]
            xb = x[idx]
            if config.classifier_noise > 0:
                xb = xb + config.classifier_noise * torch.randn(xb.shape, generator=gen)
            loss = F.cross_entropy(module(xb), y[idx], label_smoothing=config.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return module.eval()


def accuracy(module, x, y) -> float:
    with torch.no_grad():
        return (module(x).argmax(1) == y).float().mean().item()


def fit_toy_bundle(config: FitConfig = FitConfig(), dataset=None) -> ToyBackendBundle:
    """Fit the toy noise predictor, prompt table and both classifiers.

    ``dataset`` is ``(images, labels, prompts)``; a procedural set is generated
    from ``config.seed`` when omitted.
    """
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    if dataset is None:
        dataset = make_dataset(config.n_train + config.n_heldout, config.seed, config.image_size,
                               config.num_classes)
    images, labels, prompts = dataset
    n_train = len(images) - config.n_heldout
    if n_train <= 0:
        raise ValueError(f"dataset has {len(images)} images, need more than n_heldout={config.n_heldout}")
    x = torch.from_numpy(np.asarray(images, dtype=np.float32))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    vocab = [""] + sorted(set(prompts) | {class_prompt(c) for c in range(config.num_classes)})
    lookup = {p: i for i, p in enumerate(vocab)}
    prompt_idx = torch.tensor([lookup[p] for p in prompts])

    schedule = compute_schedule()
    unet, clfs = _build_modules(config)
    table = nn.Parameter(torch.randn(len(vocab), EMBED_DIM, generator=gen))
    start = time.time()
    unet.embed_gain = 1.0
    last_loss = _fit_diffusion(unet.train(), table, x[:n_train], prompt_idx[:n_train], config, schedule, gen)
    unet.eval()
    # same function, smaller stored vectors: a fixed-step descent on the stored
    # vectors then moves the effective embedding embed_gain**2 times further
    unet.embed_gain = config.embed_gain
    table = nn.Parameter(table.detach() / config.embed_gain)
    floor = heldout_noise_mse(unet, table.detach(), x[n_train:], prompt_idx[n_train:], schedule)
    train_floor = heldout_noise_mse(unet, table.detach(), x[:config.n_heldout], prompt_idx[:config.n_heldout],
                                    schedule)
    metrics = {"diffusion_final_train_loss": last_loss, "train_noise_mse": train_floor,
               "heldout_noise_mse": floor}
    for name, mod in clfs.items():
        _fit_classifier(mod.train(), x[:n_train], y[:n_train], config, gen)
        metrics[f"{name}_heldout_accuracy"] = accuracy(mod, x[n_train:], y[n_train:])
    metrics["fit_seconds"] = round(time.time() - start, 1)
    log.info("fitted toy bundle: %s", metrics)
    return ToyBackendBundle(config, unet, table.detach(), vocab, clfs, metrics)
