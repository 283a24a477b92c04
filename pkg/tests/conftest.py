import numpy as np
import pytest

from chl.data import ImageSet, generate_synthetic_dataset, write_synthetic_dataset


def central_difference(f, x, h=1e-5, coords=None):
    """Central differences of scalar ``f`` at ``x`` (flattened coordinates ``coords``)."""
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        up = f()
        flat[c] = old - h
        down = f()
        flat[c] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30))


def unit_rows(rng, m, d):
    z = rng.normal(size=(m, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def tiny_dataset():
    """40 synthetic 32x32 tiles, 20 per class, 5 patients per class."""
    images, rows = generate_synthetic_dataset(20, 32, seed=3)
    return ImageSet(
        images.astype(np.float64),
        np.array([r.label for r in rows]),
        [r.patient_id for r in rows],
        [r.path for r in rows],
    )


TINY_INI = """[run]
seed = 0
manifest = {manifest}
out_dir = {out_dir}
folds = 0
split_ratios = 4,1,1
[encoder]
input_size = 16
channels = 4,8
embed_dim = 8
[pretrain]
learning_rate = 1e-3
epochs = 2
batch_size = 8
[relax]
learning_rate = 1e-3
epochs = 1
batch_size = 8
[loss]
tau = 0.1
[augment]
p_hed = 0.2
[stain]
max_iterations = 20
[finetune]
learning_rate = 1e-3
epochs = 2
hidden = 8,4
stain_iterations = 5
"""


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """16x16 synthetic dataset on disk, 12 per class."""
    return write_synthetic_dataset(tmp_path_factory.mktemp("data"), 12, 16, seed=1)


@pytest.fixture
def tiny_config(tmp_path, tiny_manifest):
    """Writes a seconds-scale run config; returns ``make(extra_text="") -> path``."""

    def make(extra="", name="run.ini"):
        path = tmp_path / name
        path.write_text(TINY_INI.format(manifest=tiny_manifest, out_dir=tmp_path / "out") + extra)
        return path

    return make


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion that ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS):
        terminalreporter.write_line(line)
