"""Downstream classification on the aligned latent space: a feature extractor
mapping images into Z and a small classifier head over those latents."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import GenerativeBundle, sample_global
from .nets import CifarResNet, ContractViolation, Mlp400, HeadNet
from .torchutil import batch_indices, derive_seed


@dataclass
class FeatureExtractor:
    net: torch.nn.Module
    arch: str
    out_dim: int


@dataclass
class ClassifierHead:
    net: torch.nn.Module
    num_classes: int


@dataclass
class ClfHyper:
    fe_arch: str = "mlp400"  # mlp400 | resnet18 | resnet32
    epochs_fe: int = 100
    epochs_head: int = 20
    batch: int = 256
    lr: float = 1e-3
    sched_gamma: float = 0.99
    fe_pairs_per_task: int = 2000
    replay_per_task: int = 0  # 0 = match the current task's sample count
    device: str = "cpu"


def make_feature_extractor(hp: ClfHyper, image_shape, out_dim: int, seed: int | None = None) -> FeatureExtractor:
    if seed is not None:
        torch.manual_seed(seed)
    if hp.fe_arch == "mlp400":
        net = Mlp400(int(np.prod(image_shape)), out_dim)
    elif hp.fe_arch in ("resnet18", "resnet32"):
        net = CifarResNet(image_shape, out_dim, depth=int(hp.fe_arch[6:]))
    else:
        raise ValueError(f"unknown feature extractor arch {hp.fe_arch!r}")
    return FeatureExtractor(net=net, arch=hp.fe_arch, out_dim=out_dim)


def make_head(in_dim: int, num_classes: int, seed: int | None = None) -> ClassifierHead:
    if seed is not None:
        torch.manual_seed(seed)
    return ClassifierHead(net=HeadNet(in_dim, num_classes), num_classes=num_classes)


def prepare_images(bundle: GenerativeBundle, x: torch.Tensor) -> torch.Tensor:
    """Real images arrive in [0, 1]; GAN-aligned extractors see [-1, 1]."""
    return x * 2 - 1 if bundle.kind == "gan" else x


def feature_loss(fe: FeatureExtractor, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Squared error between target latents and extracted ones, summed per
    sample and averaged over the batch."""
    return ((z - fe.net(x)) ** 2).sum(dim=1).mean()


def _global_dim(bundle: GenerativeBundle) -> int:
    return bundle.z_dim if bundle.task_conditioned else bundle.cont_dim + bundle.d_b


def sample_latent_image_pairs(bundle: GenerativeBundle, per_task: int,
                              rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(x_tilde, z, task) pairs drawn per the global sampling recipe for every
    consolidated task; re-decoding z reproduces x_tilde by construction."""
    xs, zs, ts = [], [], []
    for l in range(bundle.tasks_seen):
        lam_c = torch.randn(per_task, bundle.cont_dim, generator=rng)
        lam_b = None
        if bundle.kind == "vae" and bundle.d_b:
            probs = bundle.binary_priors[l].probs.clamp(0, 1).expand(per_task, -1)
            lam_b = torch.bernoulli(probs, generator=rng)
        with torch.no_grad():
            z = bundle.latent_to_global(lam_c, lam_b, l)
            xs.append(bundle.decode(z))
        zs.append(z)
        ts.append(torch.full((per_task,), l, dtype=torch.long))
    return torch.cat(xs), torch.cat(zs), torch.cat(ts)


def train_feature_extractor(bundle: GenerativeBundle, fe: FeatureExtractor,
                            hp: ClfHyper, seed: int = 0, log=None) -> FeatureExtractor:
    """Fit the extractor to invert the global decoding map on sampled
    (generation, latent) pairs from every task seen so far."""
    if fe.out_dim != _global_dim(bundle):
        raise ContractViolation(
            f"feature extractor dim {fe.out_dim} != global latent dim {_global_dim(bundle)}"
        )
    rng = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "fe_pairs", bundle.tasks_seen))
    x, z, _ = sample_latent_image_pairs(bundle, hp.fe_pairs_per_task, rng)
    fe.net.train()
    opt = torch.optim.Adam(fe.net.parameters(), lr=hp.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=hp.sched_gamma)
    order = np.random.default_rng(derive_seed(seed, "fe_order", bundle.tasks_seen))
    for epoch in range(hp.epochs_fe):
        tot, n = 0.0, 0
        for idx in batch_indices(len(x), hp.batch, order):
            loss = feature_loss(fe, x[idx], z[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            n += len(idx)
        sched.step()
        if log is not None:
            log({"stage": "feature_extractor", "task": bundle.tasks_seen - 1, "epoch": epoch, "loss": tot / n})
    fe.net.eval()
    return fe


def train_classifier_head(bundle: GenerativeBundle, fe: FeatureExtractor, head: ClassifierHead,
                          x_cur: torch.Tensor, y_cur: torch.Tensor,
                          prev: tuple[FeatureExtractor, ClassifierHead] | None,
                          hp: ClfHyper, seed: int = 0, log=None) -> ClassifierHead:
    """Cross-entropy training on latent/label pairs: current-task reals are
    embedded by the live extractor with ground-truth labels; previous-task
    generations keep their sampled latents and get pseudo-labels from the
    frozen previous extractor+head."""
    if bundle.tasks_seen > 1 and prev is None:
        raise ContractViolation("previous tasks present but no frozen classifier to pseudo-label them")
    rng = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "head_replay", bundle.tasks_seen))
    with torch.no_grad():
        z_parts = [fe.net(prepare_images(bundle, x_cur))]
    y_parts = [y_cur.long()]
    if bundle.tasks_seen > 1:
        fe_prev, head_prev = prev
        per_task = hp.replay_per_task or len(x_cur)
        for l in range(bundle.tasks_seen - 1):
            lam_c = torch.randn(per_task, bundle.cont_dim, generator=rng)
            lam_b = None
            if bundle.kind == "vae" and bundle.d_b:
                probs = bundle.binary_priors[l].probs.clamp(0, 1).expand(per_task, -1)
                lam_b = torch.bernoulli(probs, generator=rng)
            with torch.no_grad():
                z = bundle.latent_to_global(lam_c, lam_b, l)
                x_gen = bundle.decode(z)
                pseudo = head_prev.net(fe_prev.net(x_gen)).argmax(dim=1)
            z_parts.append(z)
            y_parts.append(pseudo)
    z_all = torch.cat(z_parts)
    y_all = torch.cat(y_parts)
    head.net.train()
    opt = torch.optim.Adam(head.net.parameters(), lr=hp.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=hp.sched_gamma)
    order = np.random.default_rng(derive_seed(seed, "head_order", bundle.tasks_seen))
    for epoch in range(hp.epochs_head):
        tot, n = 0.0, 0
        for idx in batch_indices(len(z_all), hp.batch, order):
            loss = F.cross_entropy(head.net(z_all[idx]), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            n += len(idx)
        sched.step()
        if log is not None:
            log({"stage": "classifier_head", "task": bundle.tasks_seen - 1, "epoch": epoch, "loss": tot / n})
    head.net.eval()
    return head


@torch.no_grad()
def predict(fe: FeatureExtractor, head: ClassifierHead, x: torch.Tensor):
    """Class ids and softmax probabilities for a batch of images."""
    probs = torch.softmax(head.net(fe.net(x)), dim=1)
    return probs.argmax(dim=1), probs


def train_finetune_classifier(fe: FeatureExtractor, head: ClassifierHead,
                              x: torch.Tensor, y: torch.Tensor, hp: ClfHyper,
                              seed: int = 0) -> tuple[FeatureExtractor, ClassifierHead]:
    """Naive baseline: fit extractor+head end-to-end on the current task only
    (no replay); continual runs call this once per task on the same nets."""
    params = list(fe.net.parameters()) + list(head.net.parameters())
    fe.net.train()
    head.net.train()
    opt = torch.optim.Adam(params, lr=hp.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=hp.sched_gamma)
    order = np.random.default_rng(derive_seed(seed, "finetune_order"))
    y = y.long()
    for _ in range(hp.epochs_head):
        for idx in batch_indices(len(x), hp.batch, order):
            loss = F.cross_entropy(head.net(fe.net(x[idx])), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    fe.net.eval()
    head.net.eval()
    return fe, head
