import numpy as np
import pytest

from odil.nn import LayerSpec, Model, ModelConfig


def small_conv_config(num_classes=3):
    layers = (
        LayerSpec("conv2d", 3, 3),
        LayerSpec("batchnorm", 3),
        LayerSpec("relu"),
        LayerSpec("conv2d", 4, 2),
        LayerSpec("batchnorm", 4),
        LayerSpec("relu"),
        LayerSpec("gap"),
        LayerSpec("classifier", num_classes),
    )
    return ModelConfig((6, 6, 2), layers, num_classes)


def small_dense_config(num_classes=3):
    layers = (
        LayerSpec("dense", 6),
        LayerSpec("batchnorm", 6),
        LayerSpec("relu"),
        LayerSpec("dense", 5),
        LayerSpec("relu"),
        LayerSpec("classifier", num_classes),
    )
    return ModelConfig((5,), layers, num_classes)


def randomize_bn(model, rng):
    """Non-trivial gamma/beta/running stats so BN is not an identity."""
    for st in model.bn_states():
        c = st.channels
        st.gamma = rng.uniform(0.5, 1.5, c)
        st.beta = rng.normal(0, 0.3, c)
        st.running_mean = rng.normal(0, 0.5, c)
        st.running_var = rng.uniform(0.5, 2.0, c)
    return model


def fd_check(model, x, seed, h=1e-4):
    """Max relative error between analytic and central-difference gradients of
    a random linear functional of the train-mode logits."""
    r = np.random.default_rng(seed + 99).normal(size=(x.shape[0], model.config.num_classes))

    def loss():
        return float((model.forward(x, "train", retain=False) * r).sum())

    model.forward(x, "train")
    grads = model.backward(r)
    assert set(grads) == set(model.parameters())
    worst = 0.0
    for name, p in model.parameters().items():
        assert grads[name].shape == p.shape
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            num.reshape(-1)[i] = (up - down) / (2 * h)
        a = grads[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6)
        worst = max(worst, float((np.abs(a - num) / denom).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def conv_model():
    return Model(small_conv_config(), seed=0)


@pytest.fixture
def dense_model():
    return Model(small_dense_config(), seed=0)


class ReferenceBases:
    """Base models on the default stream, trained once per seed and shared
    across the slow tests. Training time is recorded so runtime budgets can
    include it."""

    def __init__(self):
        self._cache = {}
        self.train_seconds = {}

    def get(self, seed):
        if seed not in self._cache:
            import time

            from odil.config import ExperimentConfig
            from odil.strategies import train_base

            cfg = ExperimentConfig(seed=seed)
            domains = cfg.domains(seed)
            t0 = time.perf_counter()
            base = train_base(cfg.model.build(seed), domains[0].train, cfg.train, seed)
            self.train_seconds[seed] = time.perf_counter() - t0
            self._cache[seed] = (cfg, domains, base)
        return self._cache[seed]


@pytest.fixture(scope="session")
def reference_bases():
    return ReferenceBases()


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def record(criterion, ok, detail, seconds):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail} [{seconds:.1f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
