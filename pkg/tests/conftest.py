import numpy as np
import pytest

from g2gnet.data_io import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, DatasetSplit, normalize, write_cifar, write_idx
from g2gnet.network import ModelConfig
from g2gnet.tensor_core import single_thread


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Record one PASS/FAIL/NOT RUN line per criterion for the end-of-run summary."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(number, name, status, detail=""):
        line = f"{number:>2}. {status:<7} {name}" + (f": {detail}" if detail else "")
        lines.append((number, line))
        print(line)

    return record


@pytest.fixture(autouse=True)
def _one_thread():
    with single_thread():
        yield


def small_config(**kw):
    """A 4x4-patch model on 16x16 RGB images with 64-wide hidden layers."""
    base = dict(
        image_shape=(3, 16, 16),
        num_classes=4,
        hidden_width=64,
        depth=3,
        groups=4,
        p=1.0,
        p_prime=0.15,
        grouping="mixer",
        patch_grid=(4, 4),
        conv_channels=2,
        topology_seed=3,
        init_seed=5,
    )
    base.update(kw)
    return ModelConfig(**base)


def random_split(n, shape=(3, 16, 16), classes=4, seed=0, name="synthetic"):
    gen = np.random.default_rng(seed)
    x = gen.random((n,) + shape).astype(np.float32)
    y = gen.integers(0, classes, n)
    return DatasetSplit(x, y, classes, name)


def write_fashion_fixture(root, n_train=64, n_test=32, seed=0):
    """Synthetic Fashion-MNIST-format files whose label shows in pixel intensity."""
    gen = np.random.default_rng(seed)
    d = root / "fashion_mnist"
    d.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = gen.integers(0, 10, n).astype(np.uint8)
        imgs = gen.integers(0, 60, (n, 28, 28)).astype(np.int64)
        for i, c in enumerate(labels):
            imgs[i, (c % 4) * 7 : (c % 4) * 7 + 7, (c // 4) * 7 : (c // 4) * 7 + 7] += 180
        write_idx(d / f"{prefix}-images-idx3-ubyte", np.clip(imgs, 0, 255), IDX_IMAGES_MAGIC)
        write_idx(d / f"{prefix}-labels-idx1-ubyte", labels, IDX_LABELS_MAGIC)
    return root


def write_cifar10_fixture(root, per_batch=8, n_test=16, seed=0):
    gen = np.random.default_rng(seed)
    d = root / "cifar10" / "cifar-10-batches-bin"
    d.mkdir(parents=True, exist_ok=True)
    for i in range(1, 6):
        write_cifar(d / f"data_batch_{i}.bin", gen.integers(0, 256, (per_batch, 3072)), gen.integers(0, 10, per_batch))
    write_cifar(d / "test_batch.bin", gen.integers(0, 256, (n_test, 3072)), gen.integers(0, 10, n_test))
    return root


@pytest.fixture
def fashion_dir(tmp_path):
    return write_fashion_fixture(tmp_path / "data")


@pytest.fixture
def small_data():
    train, test = normalize(random_split(96, seed=1), random_split(40, seed=2))
    return train, test
