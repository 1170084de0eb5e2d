import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from advdepth import data, models

# scene corpus shared by the slow tests: 500 training scenes, 100 held out
CORPUS_SEED = 1
N_TRAIN, N_HELDOUT = 500, 100

TRAINING = {
    "depth-arch-A": dict(task="depth", arch="arch-A", epochs=20, lr=0.01, seed=0),
    "depth-arch-B": dict(task="depth", arch="arch-B", epochs=20, lr=0.01, seed=0),
    "seg-arch-A": dict(task="seg", arch="arch-A", epochs=20, lr=0.05, seed=0),
}

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus():
    scenes = data.generate_dataset(N_TRAIN + N_HELDOUT, CORPUS_SEED)
    return scenes[:N_TRAIN], scenes[N_TRAIN:]


def _trained(request, corpus, key):
    """Train once per configuration; checkpoints are cached across sessions.

    Training is deterministic, so a cached checkpoint is byte-identical to a
    fresh run with the same settings.
    """
    spec = TRAINING[key]
    tag = hashlib.sha256(json.dumps({**spec, "corpus": [CORPUS_SEED, N_TRAIN, N_HELDOUT]}, sort_keys=True).encode())
    path = Path(request.config.cache.mkdir("advdepth-models")) / f"{key}-{tag.hexdigest()[:12]}.bin"
    if path.exists():
        return models.load_net(path)
    train, heldout = corpus
    if spec["task"] == "depth":
        net = models.new_depth_net(spec["arch"], spec["seed"])
    else:
        net = models.new_seg_net(spec["arch"], spec["seed"])
    models.train(net, train, spec["epochs"], spec["lr"], spec["seed"])
    net.save(path)
    return net


@pytest.fixture(scope="session")
def depth_a(request, corpus):
    return _trained(request, corpus, "depth-arch-A")


@pytest.fixture(scope="session")
def depth_b(request, corpus):
    return _trained(request, corpus, "depth-arch-B")


@pytest.fixture(scope="session")
def seg_a(request, corpus):
    return _trained(request, corpus, "seg-arch-A")


@pytest.fixture(scope="session")
def tiny_scenes():
    cfg = data.SceneConfig(height=16, width=16)
    return data.generate_dataset(6, 3, cfg)


@pytest.fixture
def rand():
    return np.random.default_rng(12345)


UNIVERSAL_TRAIN, UNIVERSAL_EVAL = 200, 50
UNIVERSAL_SECONDS = {}  # wall-clock training time per seed


def train_deltas(depth_net, seg_net, corpus, seed):
    """Single- and multi-task perturbations under the default MI-FGSM inner loop."""
    from advdepth import universal

    train = corpus[0][:UNIVERSAL_TRAIN]
    cfg = universal.UniversalTrainConfig(seed=seed)
    start = time.perf_counter()
    out = {
        "single": universal.train_universal(depth_net, None, train, cfg, universal.SINGLE_TASK),
        "multi": universal.train_universal(depth_net, seg_net, train, cfg, universal.MULTI_TASK),
    }
    UNIVERSAL_SECONDS[seed] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def universal_deltas(depth_a, seg_a, corpus):
    return train_deltas(depth_a, seg_a, corpus, seed=0)
