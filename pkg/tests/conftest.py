import numpy as np
import pytest
import torch

from skiperase.schedule import make_noise_schedule
from skiperase.unet import UNetConfig, build_unet

CONCEPTS = ("stripes", "checker", "disk", "box")


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained but deterministic model for structural/identity tests."""
    cfg = UNetConfig(image_size=16, base_channels=8, concepts=CONCEPTS)
    model = build_unet(cfg, seed=11)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def tiny_sched():
    return make_noise_schedule(40, "linear")


@pytest.fixture(scope="session")
def small_dataset():
    """Small but classifiable synthetic dataset at the tiny model's size."""
    from skiperase.data import default_world, generate_dataset
    return generate_dataset(default_world(count=150), seed=5, size=16)


@pytest.fixture(scope="session")
def small_classifier(small_dataset):
    from skiperase.data import train_classifier
    return train_classifier(small_dataset, seed=5)


@pytest.fixture()
def rand_state(tiny_model):
    gen = torch.Generator().manual_seed(3)
    s = tiny_model.cfg.image_size
    z = torch.randn(2, 3, s, s, generator=gen)
    t = torch.tensor([5, 31])
    from skiperase.unet import LatentState
    return LatentState(z, t)
