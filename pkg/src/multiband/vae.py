"""Two-latent VAE (continuous Gaussian + binary Gumbel-softmax) and its local,
per-task training loop."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Dataset, Task, task_images
from .nets import (
    CelebaDecoder,
    CelebaEncoder,
    ConvDecoder,
    ConvEncoder,
    DenseDecoder,
    DenseEncoder,
    NumericalError,
    TrainingDivergence,
    Translator,
    binary_task_code,
)
from .torchutil import batch_indices, derive_seed, to_image_tensor

OUTPUT_CLAMP = 1e-7  # keeps Bernoulli log-likelihood finite
_PROB_EPS = 1e-6


@dataclass
class VaeEncoderOutput:
    """Encoder heads: Gaussian means/stds and Bernoulli probabilities."""

    mu_m: torch.Tensor
    mu_sigma: torch.Tensor
    mu_p: torch.Tensor | None  # None when the binary latent is disabled


@dataclass
class LatentCode:
    lambda_c: torch.Tensor
    lambda_b: torch.Tensor | None
    task: int = 0


@dataclass
class BinaryPrior:
    """Per-task average of encoder Bernoulli probabilities."""

    probs: torch.Tensor


@dataclass
class VaeHyper:
    """Local VAE training hyperparameters (dense-model defaults)."""

    arch: str = "dense"  # dense | conv | conv_celeba
    d_c: int = 8
    d_b: int = 4
    z_dim: int = 384
    temperature: float = 0.67
    lr: float = 1e-3
    sched_gamma: float = 0.98
    batch: int = 64
    epochs: int = 70
    taskcode_width: int = 8
    use_translator: bool = True
    device: str = "cpu"


class LocalVae(nn.Module):
    """Encoder + (private translator head) + decoder trained on one task.

    The translator head gives the local model the same generative half as the
    global one, so on the first task the pair (head, decoder) can be promoted
    to (global translator, global decoder) as-is. Without a translator the
    decoder consumes the latent code directly."""

    def __init__(self, arch: str, image_shape, d_c: int, d_b: int, z_dim: int,
                 use_translator: bool = True, taskcode_width: int = 8, task_index: int = 0):
        super().__init__()
        self.arch = arch
        self.image_shape = tuple(image_shape)
        self.d_c, self.d_b, self.z_dim = d_c, d_b, z_dim
        self.task_index = task_index
        self.taskcode_width = taskcode_width
        in_dim = int(np.prod(image_shape))
        if arch == "dense":
            self.encoder = DenseEncoder(in_dim, d_c, d_b)
        elif arch == "conv":
            self.encoder = ConvEncoder(image_shape, d_c, d_b)
        elif arch == "conv_celeba":
            self.encoder = CelebaEncoder(image_shape, d_c, d_b)
        else:
            raise ValueError(f"unknown vae arch {arch!r}")
        self.translator = (
            Translator(d_c, d_b, taskcode_width, z_dim) if use_translator else None
        )
        dec_in = z_dim if use_translator else d_c + d_b
        if arch == "dense":
            self.decoder = DenseDecoder(dec_in, image_shape, final="sigmoid")
        elif arch == "conv":
            self.decoder = ConvDecoder(dec_in, image_shape, final="sigmoid")
        else:
            self.decoder = CelebaDecoder(dec_in, image_shape, final="sigmoid")

    def decode_code(self, code: LatentCode) -> torch.Tensor:
        if self.translator is not None:
            tc = binary_task_code(
                torch.full((len(code.lambda_c),), code.task), self.taskcode_width,
                dtype=code.lambda_c.dtype, device=code.lambda_c.device,
            )
            z = self.translator(code.lambda_c, code.lambda_b, tc)
        else:
            z = code.lambda_c if code.lambda_b is None else torch.cat([code.lambda_c, code.lambda_b], dim=1)
        return self.decoder(z)


def encode(model: LocalVae, x: torch.Tensor) -> VaeEncoderOutput:
    """Run the encoder heads; raises NumericalError on non-finite activations."""
    if not torch.isfinite(x).all():
        raise NumericalError("non-finite values in encoder input batch")
    mu, sigma, p = model.encoder(x)
    for name, t in (("mu_m", mu), ("mu_sigma", sigma), ("mu_p", p)):
        if t is not None and not torch.isfinite(t).all():
            raise NumericalError(f"non-finite encoder output {name} (batch of {len(x)})")
    return VaeEncoderOutput(mu_m=mu, mu_sigma=sigma, mu_p=p)


def sample_latent(out: VaeEncoderOutput, temperature: float = 0.67, mode: str = "train",
                  generator: torch.Generator | None = None, task: int = 0) -> LatentCode:
    """Reparametrized Gaussian + binary Gumbel-softmax sample (train) or the
    deterministic means / rounded probabilities (eval)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if mode == "eval":
        lam_c = out.mu_m
        lam_b = torch.round(out.mu_p) if out.mu_p is not None else None
        return LatentCode(lam_c, lam_b, task)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    eps = torch.randn(out.mu_m.shape, generator=generator, dtype=out.mu_m.dtype, device=out.mu_m.device)
    lam_c = out.mu_m + out.mu_sigma * eps
    lam_b = None
    if out.mu_p is not None:
        p = out.mu_p.clamp(_PROB_EPS, 1 - _PROB_EPS)
        u = torch.rand(
            (2,) + p.shape, generator=generator, dtype=p.dtype, device=p.device
        ).clamp_(1e-10, 1 - 1e-10)
        g1, g0 = -torch.log(-torch.log(u[0])), -torch.log(-torch.log(u[1]))
        lam_b = torch.sigmoid((torch.logit(p) + g1 - g0) / temperature)
    return LatentCode(lam_c, lam_b, task)


def elbo_loss(x: torch.Tensor, x_hat: torch.Tensor, out: VaeEncoderOutput):
    """Negative ELBO: Bernoulli reconstruction NLL plus closed-form Gaussian KL.

    Both terms are summed per sample and averaged over the batch; the binary
    latent carries no KL term (it is regularized through the prior-estimation
    scheme instead)."""
    xf = x.flatten(1)
    xh = x_hat.flatten(1).clamp(OUTPUT_CLAMP, 1 - OUTPUT_CLAMP)
    recon = -(xf * xh.log() + (1 - xf) * torch.log1p(-xh)).sum(dim=1).mean()
    kl = 0.5 * (out.mu_m**2 + out.mu_sigma**2 - 1 - 2 * out.mu_sigma.log()).sum(dim=1).mean()
    return recon + kl, recon, kl


def make_vae(hp: VaeHyper, image_shape, task_index: int = 0, seed: int | None = None) -> LocalVae:
    if seed is not None:
        torch.manual_seed(seed)
    return LocalVae(
        hp.arch, image_shape, hp.d_c, hp.d_b, hp.z_dim,
        use_translator=hp.use_translator, taskcode_width=hp.taskcode_width, task_index=task_index,
    )


def train_local_vae(ds: Dataset, task: Task, hp: VaeHyper, seed: int = 0, log=None,
                    init: LocalVae | None = None):
    """Train a local VAE on the task's data by minimizing the negative ELBO;
    returns the model and the binary prior accumulated over the final epoch.
    With `init` given (the previous task's local model) training warm-starts
    from its weights, keeping consecutive latent layouts compatible; on task 0
    the caller promotes the generative half to global."""
    if len(task) == 0:
        raise ValueError("cannot train on an empty task")
    x_all = to_image_tensor(task_images(ds, task)).to(hp.device)
    if init is not None:
        model = copy.deepcopy(init)
        model.task_index = task.index
    else:
        model = make_vae(hp, x_all.shape[1:], task_index=task.index,
                         seed=derive_seed(seed, "local_vae", task.index))
    model.to(hp.device).train()
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=hp.sched_gamma)
    gen = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "local_vae_noise", task.index))
    shuffle = np.random.default_rng(derive_seed(seed, "local_vae_order", task.index))

    prior_sum = torch.zeros(hp.d_b) if hp.d_b else None
    prior_n = 0
    for epoch in range(hp.epochs):
        last_epoch = epoch == hp.epochs - 1
        tot = rec = kld = 0.0
        for step, idx in enumerate(batch_indices(len(x_all), hp.batch, shuffle)):
            x = x_all[idx]
            out = encode(model, x)
            code = sample_latent(out, hp.temperature, "train", generator=gen, task=task.index)
            x_hat = model.decode_code(code)
            loss, recon, kl = elbo_loss(x, x_hat, out)
            if not torch.isfinite(loss):
                raise TrainingDivergence(
                    f"local VAE loss diverged at task {task.index}, epoch {epoch}, step {step}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(x)
            rec += recon.item() * len(x)
            kld += kl.item() * len(x)
            if last_epoch and out.mu_p is not None:
                prior_sum += out.mu_p.detach().sum(dim=0).cpu()
                prior_n += len(x)
        sched.step()
        if log is not None:
            n = len(x_all)
            log({"stage": "vae_local", "task": task.index, "epoch": epoch,
                 "loss": tot / n, "recon": rec / n, "kl": kld / n})
    model.eval()
    prior = BinaryPrior(probs=(prior_sum / prior_n) if prior_n else torch.zeros(0))
    return model, prior
