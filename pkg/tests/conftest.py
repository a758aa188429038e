"""Shared fixtures: a small architecture and toy data sized for fast tests."""

import numpy as np
import pytest

from pden.datasets import DomainDataset, ToySpec, make_toy_dataset
from pden.nets import ArchConfig
from pden.rng import Rng


@pytest.fixture(scope="session")
def tiny_arch() -> ArchConfig:
    # smallest config the generator's two downsamples allow on 8x8 inputs
    return ArchConfig(in_channels=1, num_classes=3, feat_channels=(4, 5, 6),
                      clf_hidden=8, embed_dim=4, noise_dim=3, gen_channels=(4, 5))


@pytest.fixture(scope="session")
def tiny_train(tiny_arch) -> DomainDataset:
    spec = ToySpec(num_classes=tiny_arch.num_classes, count=24, image_hw=(8, 8))
    return make_toy_dataset(spec, Rng(7).derive("train"), "tiny_train")


@pytest.fixture(scope="session")
def tiny_test(tiny_arch) -> DomainDataset:
    spec = ToySpec(num_classes=tiny_arch.num_classes, count=24, image_hw=(8, 8))
    return make_toy_dataset(spec, Rng(7).derive("test"), "tiny_test")


@pytest.fixture()
def rng() -> Rng:
    return Rng(1234)


def unit_rows(rng: Rng, n: int, d: int) -> np.ndarray:
    z = rng.normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)
