"""Wasserstein GAN with gradient penalty and its local per-task training loop.

Generators output in [-1, 1] (tanh); real images arriving in [0, 1] are
rescaled at this boundary. The critic ends in a single scalar and uses layer
normalization, never batch normalization."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Dataset, Task, task_images
from .nets import (
    CifarCritic,
    CifarGenerator,
    ConvCritic,
    ConvDecoder,
    NumericalError,
    TrainingDivergence,
    Translator,
    binary_task_code,
)
from .torchutil import batch_indices, derive_seed, to_image_tensor


@dataclass
class NoiseBatch:
    xi: torch.Tensor  # (n, noise_dim) ~ N(0, I)
    task: int = 0


@dataclass
class GanHyper:
    arch: str = "conv"  # conv | conv_cifar
    noise_dim: int = 8
    z_dim: int = 100
    lambda_gp: float = 10.0
    critic_steps: int = 5
    lr: float = 2e-4
    sched_gamma: float = 0.99
    batch: int = 64
    epochs: int = 120
    beta1: float = 0.0
    beta2: float = 0.9
    taskcode_width: int = 8
    device: str = "cpu"


class GanModel(nn.Module):
    """Local WGAN: private translator head + generator, plus the critic.

    As with the VAE, the translator head makes the generator's input the
    global latent, so the first task's pair can be promoted to the global
    bundle unchanged."""

    def __init__(self, arch: str, image_shape, noise_dim: int, z_dim: int,
                 taskcode_width: int = 8, task_index: int = 0):
        super().__init__()
        self.arch = arch
        self.image_shape = tuple(image_shape)
        self.noise_dim, self.z_dim = noise_dim, z_dim
        self.taskcode_width = taskcode_width
        self.task_index = task_index
        self.translator = Translator(noise_dim, 0, taskcode_width, z_dim)
        if arch == "conv":
            self.generator = ConvDecoder(z_dim, image_shape, final="tanh")
            self.critic = ConvCritic(image_shape)
        elif arch == "conv_cifar":
            self.generator = CifarGenerator(z_dim, image_shape)
            self.critic = CifarCritic(image_shape)
        else:
            raise ValueError(f"unknown gan arch {arch!r}")

    def generate(self, noise: NoiseBatch) -> torch.Tensor:
        code = binary_task_code(
            torch.full((len(noise.xi),), noise.task), self.taskcode_width,
            dtype=noise.xi.dtype, device=noise.xi.device,
        )
        return self.generator(self.translator(noise.xi, None, code))


def sample_noise(n: int, noise_dim: int, task: int = 0,
                 generator: torch.Generator | None = None, dtype=torch.float32) -> NoiseBatch:
    return NoiseBatch(xi=torch.randn(n, noise_dim, generator=generator, dtype=dtype), task=task)


def gradient_penalty(critic: nn.Module, x_real: torch.Tensor, x_fake: torch.Tensor,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """E[(||grad_xhat D(xhat)||_2 - 1)^2] on per-sample uniform interpolates."""
    eps_shape = (len(x_real),) + (1,) * (x_real.dim() - 1)
    eps = torch.rand(eps_shape, generator=generator, dtype=x_real.dtype, device=x_real.device)
    x_hat = (eps * x_real + (1 - eps) * x_fake).detach().requires_grad_(True)
    d = critic(x_hat)
    grads = torch.autograd.grad(d.sum(), x_hat, create_graph=True)[0]
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def critic_loss(model: GanModel, x_real: torch.Tensor, x_fake: torch.Tensor,
                lambda_gp: float = 10.0, generator: torch.Generator | None = None) -> torch.Tensor:
    """E[D(fake)] - E[D(real)] + lambda * gradient penalty, images in [-1, 1]."""
    if len(x_real) != len(x_fake):
        raise ValueError(f"batch size mismatch: {len(x_real)} real vs {len(x_fake)} fake")
    d_real = model.critic(x_real)
    d_fake = model.critic(x_fake)
    gp = gradient_penalty(model.critic, x_real, x_fake, generator=generator)
    loss = d_fake.mean() - d_real.mean() + lambda_gp * gp
    if not torch.isfinite(loss):
        raise NumericalError("non-finite critic loss (gradient penalty blew up?)")
    return loss


def generator_loss(model: GanModel, noise: NoiseBatch) -> torch.Tensor:
    """-E[D(G(xi))]."""
    return -model.critic(model.generate(noise)).mean()


def make_gan(hp: GanHyper, image_shape, task_index: int = 0, seed: int | None = None) -> GanModel:
    if seed is not None:
        torch.manual_seed(seed)
    return GanModel(hp.arch, image_shape, hp.noise_dim, hp.z_dim,
                    taskcode_width=hp.taskcode_width, task_index=task_index)


def train_local_gan(ds: Dataset, task: Task, hp: GanHyper, seed: int = 0,
                    init: GanModel | None = None, log=None) -> GanModel:
    """WGAN-GP training on the task's data, one generator step per
    `critic_steps` critic steps. With `init` given (the previous task's local
    model) both networks warm-start from its weights."""
    if len(task) == 0:
        raise ValueError("cannot train on an empty task")
    x_all = to_image_tensor(task_images(ds, task)).to(hp.device) * 2 - 1
    if init is not None:
        model = copy.deepcopy(init)
        model.task_index = task.index
    else:
        model = make_gan(hp, x_all.shape[1:], task_index=task.index,
                         seed=derive_seed(seed, "local_gan", task.index))
    model.to(hp.device).train()
    opt_c = torch.optim.Adam(model.critic.parameters(), lr=hp.lr, betas=(hp.beta1, hp.beta2))
    gen_params = list(model.translator.parameters()) + list(model.generator.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=hp.lr, betas=(hp.beta1, hp.beta2))
    sched_c = torch.optim.lr_scheduler.ExponentialLR(opt_c, gamma=hp.sched_gamma)
    sched_g = torch.optim.lr_scheduler.ExponentialLR(opt_g, gamma=hp.sched_gamma)
    noise_gen = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "local_gan_noise", task.index))
    shuffle = np.random.default_rng(derive_seed(seed, "local_gan_order", task.index))

    critic_updates = 0
    for epoch in range(hp.epochs):
        w_sum, w_n = 0.0, 0
        for step, idx in enumerate(batch_indices(len(x_all), hp.batch, shuffle)):
            x = x_all[idx]
            noise = sample_noise(len(x), hp.noise_dim, task.index, generator=noise_gen)
            x_fake = model.generate(noise).detach()
            loss_c = critic_loss(model, x, x_fake, hp.lambda_gp, generator=noise_gen)
            if not torch.isfinite(loss_c):
                raise TrainingDivergence(f"critic loss diverged at task {task.index}, epoch {epoch}, step {step}")
            opt_c.zero_grad()
            loss_c.backward()
            opt_c.step()
            critic_updates += 1
            with torch.no_grad():
                w_sum += (model.critic(x).mean() - model.critic(x_fake).mean()).item()
                w_n += 1
            if critic_updates % hp.critic_steps == 0:
                noise = sample_noise(len(x), hp.noise_dim, task.index, generator=noise_gen)
                loss_g = generator_loss(model, noise)
                if not torch.isfinite(loss_g):
                    raise TrainingDivergence(f"generator loss diverged at task {task.index}, epoch {epoch}, step {step}")
                opt_g.zero_grad()
                loss_g.backward()
                opt_g.step()
        sched_c.step()
        if critic_updates >= hp.critic_steps:
            sched_g.step()
        if log is not None:
            log({"stage": "gan_local", "task": task.index, "epoch": epoch,
                 "wasserstein_estimate": w_sum / max(1, w_n)})
    model.eval()
    return model
