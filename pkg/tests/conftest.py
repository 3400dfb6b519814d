import numpy as np
import pytest
import torch

from tempofuse.dataset import ScanFrame, ScanSequence

CLASS_NAMES = ("background", "knife", "razor", "shuriken", "gun")


def make_sequence(m, shape=(8, 8), seq_id="bag", start=0, n_classes=5, seed=0):
    rng = np.random.default_rng(seed)
    frames = tuple(
        ScanFrame(index=start + i,
                  image=rng.random(shape).astype(np.float32),
                  mask=rng.integers(0, n_classes, size=shape))
        for i in range(m))
    return ScanSequence(id=seq_id, frames=frames, class_names=CLASS_NAMES[:n_classes])


@pytest.fixture
def sequence_factory():
    return make_sequence


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.manual_seed(0)
    yield
