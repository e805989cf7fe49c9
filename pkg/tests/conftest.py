import numpy as np
import pytest
import torch

from multiband import data as D
from multiband.alignment import GenerativeBundle
from multiband.nets import DenseDecoder, Translator
from multiband.vae import BinaryPrior


@pytest.fixture(scope="session")
def blobs():
    """Small synthetic dataset: 4 classes, 28x28, 400 train / 200 test."""
    train = D.load_dataset("synthetic", n=400, classes=4, shape=(28, 28), seed=0)
    test = D.load_dataset("synthetic", n=200, classes=4, shape=(28, 28), seed=0, split="test")
    return train, test


@pytest.fixture(scope="session")
def digits_small():
    """Real digits upsampled to 28x28, mildly expanded."""
    train = D.load_dataset("digits", n=3000)
    test = D.load_dataset("digits", split="test")
    return train, test


def make_bundle(tasks_seen=2, d_c=4, d_b=2, z_dim=32, seed=0, translator=True, kind="vae"):
    """Tiny consolidated-looking bundle for unit tests (no training)."""
    torch.manual_seed(seed)
    trans = Translator(d_c, d_b if kind == "vae" else 0, 8, z_dim) if translator else None
    dec_in = z_dim if translator else d_c + d_b
    final = "tanh" if kind == "gan" else "sigmoid"
    decoder = DenseDecoder(dec_in, (1, 8, 8), final=final)
    priors = [BinaryPrior(torch.full((d_b,), 0.5)) for _ in range(tasks_seen)] if (kind == "vae" and d_b) else []
    return GenerativeBundle(
        kind=kind, translator=trans, global_model=decoder, cont_dim=d_c,
        d_b=d_b if kind == "vae" else 0, z_dim=z_dim, taskcode_width=8,
        image_shape=(1, 8, 8), arch="dense", tasks_seen=tasks_seen, binary_priors=priors,
    )
