import pytest
import torch

from contentattack.cli import default_bundle_dir
from contentattack.models.base import Capabilities, NoisePredictor
from contentattack.models.toy import ToyBackendBundle

torch.set_num_threads(1)


class AffineNoise(NoisePredictor):
    """eps = scale * z + bias + (e . coupling) broadcast; float64 friendly."""

    def __init__(self, shape=(1, 2, 2), dim=3, scale=0.0, bias=0.0, coupling=None,
                 capabilities=Capabilities()):
        self.latent_shape = tuple(shape)
        self.embedding_shape = (dim,)
        self.scale, self.bias = scale, bias
        self.coupling = coupling
        self.capabilities = capabilities

    def predict(self, z, t, e):
        out = self.scale * z + self.bias
        if self.coupling is not None:
            out = out + (e * self.coupling).sum(-1).reshape(-1, *[1] * (z.ndim - 1))
        return out


class RandomFieldNoise(NoisePredictor):
    """Fixed random nonlinear predictor used for algebraic identities."""

    def __init__(self, shape=(2, 3, 3), dim=4, seed=0, dtype=torch.float64):
        g = torch.Generator().manual_seed(seed)
        n = int(torch.tensor(shape).prod())
        self.latent_shape, self.embedding_shape = tuple(shape), (dim,)
        self.W = torch.randn(n, n, generator=g, dtype=dtype) / n ** 0.5
        self.U = torch.randn(dim, n, generator=g, dtype=dtype)
        self.capabilities = Capabilities()

    def predict(self, z, t, e):
        flat = z.reshape(z.shape[0], -1)
        out = torch.tanh(flat @ self.W + e.reshape(-1, self.U.shape[0]) @ self.U + 1e-3 * float(t))
        return out.reshape(z.shape)


@pytest.fixture(scope="session")
def bundle():
    return ToyBackendBundle.load(default_bundle_dir())


@pytest.fixture(scope="session")
def backend(bundle):
    return bundle.backend()


@pytest.fixture(scope="session")
def classifiers(bundle):
    return bundle.classifiers()


def mini_backend(seed=0, shape=(3, 4, 4), dim=4):
    """Small differentiable backend over a fixed random predictor, float32."""
    from contentattack.models.base import Backend

    model = RandomFieldNoise(shape=shape, dim=dim, seed=seed, dtype=torch.float32)

    def embed(prompt):
        g = torch.Generator().manual_seed(len(prompt) * 7919 + sum(map(ord, prompt)))
        return torch.randn(dim, generator=g)

    return Backend(model, embed, lambda x: 2 * x - 1, lambda z: (z + 1) / 2, shape)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_log():
    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
