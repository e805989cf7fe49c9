"""Naive generative-replay baseline: one continuously trained VAE with
self-rehearsal from a copy frozen at each task boundary. No translator, one
latent space."""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np
import torch

from .data import Dataset, Task, task_images
from .nets import TrainingDivergence
from .torchutil import batch_indices, derive_seed, to_image_tensor
from .vae import LocalVae, VaeHyper, elbo_loss, encode, make_vae, sample_latent


@dataclass
class GrModel:
    vae: LocalVae
    tasks_seen: int = 0

    # bundle-compatible surface so evaluation and sampling code can treat the
    # baseline like an unconditioned generative bundle
    @property
    def kind(self) -> str:
        return "vae"

    @property
    def task_conditioned(self) -> bool:
        return False

    @property
    def image_shape(self):
        return self.vae.image_shape


def make_gr_model(hp: VaeHyper, image_shape, seed: int = 0) -> GrModel:
    hp = replace(hp, use_translator=False, d_b=0)
    return GrModel(vae=make_vae(hp, image_shape, seed=derive_seed(seed, "gr_init")))


@torch.no_grad()
def gr_sample(model: GrModel, n: int, rng: torch.Generator | None = None) -> torch.Tensor:
    lam_c = torch.randn(n, model.vae.d_c, generator=rng)
    return model.vae.decoder(lam_c)


def train_gr_task(model: GrModel, ds: Dataset, task: Task, hp: VaeHyper,
                  seed: int = 0, log=None, cap_factor: float = 0.5) -> GrModel:
    """One task of generative replay: current data mixed per mini-batch with
    samples from the frozen previous model, at the same rehearsal cap as the
    aligned pipeline; optimizes the usual negative ELBO over the mixture."""
    x_all = to_image_tensor(task_images(ds, task))
    frozen = copy.deepcopy(model.vae).eval() if model.tasks_seen else None
    vae = model.vae
    vae.train()
    opt = torch.optim.Adam(vae.parameters(), lr=hp.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=hp.sched_gamma)
    gen = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "gr_noise", task.index))
    shuffle = np.random.default_rng(derive_seed(seed, "gr_order", task.index))
    replay_per_batch = int(hp.batch * (model.tasks_seen + 1) * cap_factor) if frozen is not None else 0

    for epoch in range(hp.epochs):
        tot, n_seen = 0.0, 0
        for step, idx in enumerate(batch_indices(len(x_all), hp.batch, shuffle)):
            x = x_all[idx]
            if replay_per_batch:
                lam = torch.randn(replay_per_batch, vae.d_c, generator=gen)
                with torch.no_grad():
                    x = torch.cat([x, frozen.decoder(lam)])
            out = encode(vae, x)
            code = sample_latent(out, hp.temperature, "train", generator=gen, task=task.index)
            x_hat = vae.decode_code(code)
            loss, _, _ = elbo_loss(x, x_hat, out)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"GR loss diverged at task {task.index}, epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(x)
            n_seen += len(x)
        sched.step()
        if log is not None:
            log({"stage": "gr", "task": task.index, "epoch": epoch, "loss": tot / n_seen})
    vae.eval()
    model.tasks_seen += 1
    return model


@torch.no_grad()
def gr_embed(model: GrModel, x: torch.Tensor) -> torch.Tensor:
    """Eval-mode latent means; the baseline's analog of a global embedding."""
    return encode(model.vae, x).mu_m
