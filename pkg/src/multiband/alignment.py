"""Latent-space alignment: the persistent translator + global decoder/generator
bundle, two-phase consolidation of each new local model, rehearsal-pair
construction, controlled forgetting, and global sampling."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset, Task, task_images
from .gan import GanModel, NoiseBatch
from .nets import (
    CelebaDecoder,
    CifarGenerator,
    ConvDecoder,
    ContractViolation,
    DenseDecoder,
    TrainingDivergence,
    Translator,
    binary_task_code,
)
from .torchutil import batch_indices, derive_seed, to_image_tensor
from .vae import BinaryPrior, LocalVae, encode, sample_latent


@dataclass
class AlignHyper:
    """Consolidation hyperparameters (VAE defaults; the GAN path uses
    global_epochs=200 and sched_gamma=0.99)."""

    phase1_epochs: int = 5
    global_epochs: int = 140
    lr: float = 1e-3
    sched_gamma: float = 0.98
    batch: int = 64
    gamma: float = 0.9
    controlled_forgetting: bool = True
    temperature: float = 0.67
    cap_factor: float = 0.5
    forgetting_max_rows: int = 10_000
    device: str = "cpu"


@dataclass
class RehearsalPair:
    """(latent source, task id) -> target image, with a substitution flag."""

    lambda_c: torch.Tensor
    lambda_b: torch.Tensor | None
    task: int
    target: torch.Tensor
    substituted: bool = False


@dataclass
class GlobalLatentSet:
    """Current-task embeddings in the global latent space, row-aligned with
    the original images they came from."""

    vectors: torch.Tensor  # (n, D)
    images: torch.Tensor  # (n, C, H, W)


class GenerativeBundle:
    """The only state persisted between tasks: translator + global model
    (+ per-task binary priors for the VAE path)."""

    def __init__(self, kind: str, translator: Translator | None, global_model,
                 cont_dim: int, d_b: int, z_dim: int, taskcode_width: int,
                 image_shape, arch: str, tasks_seen: int = 0,
                 binary_priors: list[BinaryPrior] | None = None):
        if kind not in ("vae", "gan"):
            raise ValueError(f"bundle kind must be 'vae' or 'gan', got {kind!r}")
        self.kind = kind
        self.translator = translator
        self.global_model = global_model
        self.cont_dim, self.d_b, self.z_dim = cont_dim, d_b, z_dim
        self.taskcode_width = taskcode_width
        self.image_shape = tuple(image_shape)
        self.arch = arch
        self.tasks_seen = tasks_seen
        self.binary_priors = binary_priors if binary_priors is not None else []

    @property
    def task_conditioned(self) -> bool:
        return self.translator is not None

    def modules(self):
        mods = [self.global_model]
        if self.translator is not None:
            mods.insert(0, self.translator)
        return mods

    def parameters(self):
        for m in self.modules():
            yield from m.parameters()

    def latent_to_global(self, lam_c: torch.Tensor, lam_b: torch.Tensor | None, tasks) -> torch.Tensor:
        """Map per-task latents (plus task ids) into the global latent Z."""
        if self.translator is None:
            return lam_c if lam_b is None else torch.cat([lam_c, lam_b], dim=1)
        tasks = torch.as_tensor(tasks)
        if tasks.dim() == 0:
            tasks = tasks.expand(len(lam_c))
        code = binary_task_code(tasks, self.taskcode_width, dtype=lam_c.dtype, device=lam_c.device)
        return self.translator(lam_c, lam_b, code)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.global_model(z)

    def generate(self, lam_c: torch.Tensor, lam_b: torch.Tensor | None, tasks) -> torch.Tensor:
        return self.decode(self.latent_to_global(lam_c, lam_b, tasks))

    def frozen_copy(self) -> "GenerativeBundle":
        other = copy.deepcopy(self)
        for m in other.modules():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        return other

    # -- persistence (flat named-tensor container + JSON sidecar) ----------

    def save(self, path, extra_arrays: dict | None = None, metadata: dict | None = None):
        arrays = {}
        if self.translator is not None:
            for k, v in self.translator.state_dict().items():
                arrays[f"translator/{k}"] = v.cpu().numpy()
        for k, v in self.global_model.state_dict().items():
            arrays[f"global/{k}"] = v.cpu().numpy()
        if self.binary_priors:
            arrays["priors"] = torch.stack([p.probs for p in self.binary_priors]).cpu().numpy()
        arrays.update(extra_arrays or {})
        meta = {
            "kind": self.kind,
            "arch": self.arch,
            "cont_dim": self.cont_dim,
            "d_b": self.d_b,
            "z_dim": self.z_dim,
            "taskcode_width": self.taskcode_width,
            "image_shape": list(self.image_shape),
            "tasks_seen": self.tasks_seen,
            "has_translator": self.translator is not None,
        }
        meta.update(metadata or {})
        tmp = f"{path}.tmp.npz"
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
        with open(f"{path}.json", "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for m in self.modules():
            for k, v in sorted(m.state_dict().items()):
                h.update(k.encode())
                h.update(v.cpu().numpy().tobytes())
        return h.hexdigest()


def _build_global_net(kind: str, arch: str, in_dim: int, image_shape):
    if kind == "vae":
        if arch == "dense":
            return DenseDecoder(in_dim, image_shape, final="sigmoid")
        if arch == "conv":
            return ConvDecoder(in_dim, image_shape, final="sigmoid")
        if arch == "conv_celeba":
            return CelebaDecoder(in_dim, image_shape, final="sigmoid")
    else:
        if arch == "conv":
            return ConvDecoder(in_dim, image_shape, final="tanh")
        if arch == "conv_cifar":
            return CifarGenerator(in_dim, image_shape)
    raise ValueError(f"unknown {kind} architecture {arch!r}")


def load_bundle(path) -> tuple[GenerativeBundle, dict, dict]:
    """Load a bundle checkpoint; returns (bundle, extra_arrays, metadata)."""
    with open(f"{path}.json") as f:
        meta = json.load(f)
    data = np.load(path)
    translator = None
    if meta["has_translator"]:
        translator = Translator(meta["cont_dim"], meta["d_b"], meta["taskcode_width"], meta["z_dim"])
        translator.load_state_dict(
            {k.split("/", 1)[1]: torch.from_numpy(data[k]) for k in data.files if k.startswith("translator/")}
        )
    dec_in = meta["z_dim"] if meta["has_translator"] else meta["cont_dim"] + meta["d_b"]
    global_model = _build_global_net(meta["kind"], meta["arch"], dec_in, meta["image_shape"])
    global_model.load_state_dict(
        {k.split("/", 1)[1]: torch.from_numpy(data[k]) for k in data.files if k.startswith("global/")}
    )
    priors = []
    if "priors" in data.files:
        priors = [BinaryPrior(torch.from_numpy(row.copy())) for row in data["priors"]]
    bundle = GenerativeBundle(
        kind=meta["kind"], translator=translator, global_model=global_model,
        cont_dim=meta["cont_dim"], d_b=meta["d_b"], z_dim=meta["z_dim"],
        taskcode_width=meta["taskcode_width"], image_shape=tuple(meta["image_shape"]),
        arch=meta["arch"], tasks_seen=meta["tasks_seen"], binary_priors=priors,
    )
    for m in bundle.modules():
        m.eval()
    extra = {
        k: data[k]
        for k in data.files
        if not k.startswith(("translator/", "global/")) and k != "priors"
    }
    return bundle, extra, meta


# ---------------------------------------------------------------------------
# Rehearsal and controlled forgetting
# ---------------------------------------------------------------------------


@torch.no_grad()
def build_rehearsal_set(bundle: GenerativeBundle, per_task: int,
                        rng: torch.Generator | None = None) -> list[RehearsalPair]:
    """Draw `per_task` (noise -> frozen generation) pairs for every task
    already consolidated into `bundle`. Called on the copy frozen at the start
    of the task, so every bundle task is a previous task; with nothing
    consolidated yet the list is empty."""
    pairs: list[RehearsalPair] = []
    if bundle.tasks_seen == 0 or per_task == 0:
        return pairs
    for l in range(bundle.tasks_seen):
        lam_c = torch.randn(per_task, bundle.cont_dim, generator=rng)
        lam_b = None
        if bundle.kind == "vae" and bundle.d_b:
            probs = bundle.binary_priors[l].probs.clamp(0, 1).expand(per_task, -1)
            lam_b = torch.bernoulli(probs, generator=rng)
        targets = bundle.generate(lam_c, lam_b, l)
        for j in range(per_task):
            pairs.append(RehearsalPair(
                lambda_c=lam_c[j], lambda_b=None if lam_b is None else lam_b[j],
                task=l, target=targets[j],
            ))
    return pairs


def stack_pairs(pairs: list[RehearsalPair]):
    lam_c = torch.stack([p.lambda_c for p in pairs])
    lam_b = None if pairs[0].lambda_b is None else torch.stack([p.lambda_b for p in pairs])
    tasks = torch.tensor([p.task for p in pairs], dtype=torch.long)
    targets = torch.stack([p.target for p in pairs])
    return lam_c, lam_b, tasks, targets


def _safe_normalize(v: torch.Tensor) -> torch.Tensor:
    # zero-norm rows normalize to zero, giving cosine similarity 0
    norms = v.norm(dim=1, keepdim=True)
    return torch.where(norms > 0, v / norms.clamp_min(1e-30), torch.zeros_like(v))


@torch.no_grad()
def encode_to_global(bundle: GenerativeBundle, encoder_model: LocalVae,
                     x: torch.Tensor, task: int) -> GlobalLatentSet:
    """Embed current-task images: eval-mode local encoding mapped through the
    current translator with the task's code."""
    out = encode(encoder_model, x)
    code = sample_latent(out, mode="eval", task=task)
    z = bundle.latent_to_global(code.lambda_c, code.lambda_b, task)
    return GlobalLatentSet(vectors=z, images=x)


@torch.no_grad()
def controlled_forgetting(pairs: list[RehearsalPair], current: GlobalLatentSet,
                          bundle: GenerativeBundle, gamma: float) -> list[RehearsalPair]:
    """Substitute a rehearsal target with its most similar current-task
    original whenever the max cosine similarity in Z reaches gamma.

    Similarities are computed in float64 with a 1e-6 threshold slack so that
    exactly parallel embeddings still substitute at gamma = 1."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    if not pairs:
        return []
    if len(current.vectors) == 0:
        raise ContractViolation("controlled forgetting needs a non-empty current latent set")
    lam_c, lam_b, tasks, _ = stack_pairs(pairs)
    z = bundle.latent_to_global(lam_c, lam_b, tasks)
    zn = _safe_normalize(z.double())
    cn = _safe_normalize(current.vectors.double())
    out: list[RehearsalPair] = []
    for start in range(0, len(zn), 2048):
        sims = (zn[start : start + 2048] @ cn.T).clamp(-1.0, 1.0)
        best, arg = sims.max(dim=1)
        for i, (s, a) in enumerate(zip(best.tolist(), arg.tolist())):
            p = pairs[start + i]
            if s >= gamma - 1e-6:
                out.append(RehearsalPair(p.lambda_c, p.lambda_b, p.task,
                                         current.images[a].clone(), substituted=True))
            else:
                out.append(p)
    return out


# ---------------------------------------------------------------------------
# Two-phase consolidation
# ---------------------------------------------------------------------------


def encode_task_once(local: LocalVae, x: torch.Tensor, task_index: int):
    """One fixed deterministic encoding per current-task image (posterior
    means, rounded bits).

    Each image keeps a single latent for the whole consolidation. Resampling
    the posterior per epoch makes the decoder regress toward a posterior-
    smoothed average (measured: roughly 2x worse final FID on the desk-scale
    ladder), so the point encodings are used as the pair sources."""
    lam_c, lam_b = [], []
    with torch.no_grad():
        for start in range(0, len(x), 512):
            out = encode(local, x[start : start + 512])
            code = sample_latent(out, mode="eval", task=task_index)
            lam_c.append(code.lambda_c)
            if code.lambda_b is not None:
                lam_b.append(code.lambda_b)
    return torch.cat(lam_c), torch.cat(lam_b) if lam_b else None


def _current_gan_batch(local: GanModel, n: int, task_index: int, gen: torch.Generator):
    xi = torch.randn(n, local.noise_dim, generator=gen)
    with torch.no_grad():
        targets = local.generate(NoiseBatch(xi=xi, task=task_index))
    return xi, None, targets


def _consolidation_epochs(bundle: GenerativeBundle, frozen: GenerativeBundle, local,
                          x_cur: torch.Tensor, task_index: int, epochs: int,
                          hp: AlignHyper, params, seed: int, stage: str,
                          zset: GlobalLatentSet | None = None, log=None, stats: dict | None = None):
    """Shared epoch loop for both consolidation phases: fresh rehearsal pairs
    each epoch, optional substitution, joint squared-error over the combined
    mini-batch."""
    if epochs <= 0 or not params:
        return
    opt = torch.optim.Adam(params, lr=hp.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=hp.sched_gamma)
    gen = torch.Generator(device="cpu").manual_seed(derive_seed(seed, stage, "noise", task_index))
    shuffle = np.random.default_rng(derive_seed(seed, stage, "order", task_index))

    n = len(x_cur)
    n_batches = (n + hp.batch - 1) // hp.batch
    k_prev = frozen.tasks_seen
    cap_total = int(hp.batch * (k_prev + 1) * hp.cap_factor)
    per_task_per_batch = cap_total // k_prev if k_prev else 0
    cur_c = cur_b = None
    if bundle.kind == "vae":
        cur_c, cur_b = encode_task_once(local, x_cur, task_index)

    for epoch in range(epochs):
        pairs = build_rehearsal_set(frozen, per_task_per_batch * n_batches, rng=gen)
        if pairs and zset is not None:
            pairs = controlled_forgetting(pairs, zset, bundle, hp.gamma)
        if pairs:
            reh_order = shuffle.permutation(len(pairs))
            reh_per_batch = len(pairs) // n_batches
        epoch_loss, epoch_n = 0.0, 0
        for b, idx in enumerate(batch_indices(n, hp.batch, shuffle)):
            if bundle.kind == "vae":
                bidx = torch.as_tensor(idx)
                lam_c, lam_b, targets = cur_c[bidx], None if cur_b is None else cur_b[bidx], x_cur[bidx]
            else:
                lam_c, lam_b, targets = _current_gan_batch(local, len(idx), task_index, gen)
            pred = bundle.generate(lam_c, lam_b, task_index)
            errors = [((pred - targets) ** 2).flatten(1).sum(dim=1)]
            if pairs:
                chunk = [pairs[j] for j in reh_order[b * reh_per_batch : (b + 1) * reh_per_batch]]
                if chunk:
                    if stats is not None:
                        stats["max_rehearsal_per_batch"] = max(stats.get("max_rehearsal_per_batch", 0), len(chunk))
                        stats["cap"] = cap_total
                    r_lam_c, r_lam_b, r_tasks, r_targets = stack_pairs(chunk)
                    r_pred = bundle.generate(r_lam_c, r_lam_b, r_tasks)
                    errors.append(((r_pred - r_targets) ** 2).flatten(1).sum(dim=1))
            loss = torch.cat(errors).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"{stage} loss diverged at task {task_index}, epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(errors[0])
            epoch_n += len(errors[0])
        sched.step()
        if log is not None:
            log({"stage": stage, "task": task_index, "epoch": epoch, "loss": epoch_loss / max(1, epoch_n)})


def train_translator_phase1(bundle: GenerativeBundle, frozen: GenerativeBundle, local,
                            x_cur: torch.Tensor, task_index: int, epochs: int,
                            hp: AlignHyper, seed: int = 0, log=None) -> Translator | None:
    """Shared-knowledge discovery: fit the translator against the frozen
    global model. The global parameters are bitwise unchanged afterwards."""
    if bundle.translator is None or epochs <= 0:
        return bundle.translator
    global_before = _module_hash(bundle.global_model)
    for p in bundle.global_model.parameters():
        p.requires_grad_(False)
    try:
        _consolidation_epochs(
            bundle, frozen, local, x_cur, task_index, epochs, hp,
            params=list(bundle.translator.parameters()), seed=seed, stage="phase1", log=log,
        )
    finally:
        for p in bundle.global_model.parameters():
            p.requires_grad_(True)
    if _module_hash(bundle.global_model) != global_before:
        raise ContractViolation("global model parameters changed during phase 1")
    return bundle.translator


def _module_hash(module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.cpu().numpy().tobytes())
    return h.hexdigest()


def train_joint_phase2(bundle: GenerativeBundle, frozen: GenerativeBundle, local,
                       x_cur: torch.Tensor, task_index: int, epochs: int, hp: AlignHyper,
                       prior: BinaryPrior | None = None, zset: GlobalLatentSet | None = None,
                       seed: int = 0, log=None, stats: dict | None = None) -> GenerativeBundle:
    """Joint optimization of translator and global model; increments
    tasks_seen and appends the task's binary prior."""
    params = list(bundle.parameters())
    _consolidation_epochs(
        bundle, frozen, local, x_cur, task_index, epochs, hp,
        params=params, seed=seed, stage="phase2", zset=zset, log=log, stats=stats,
    )
    bundle.tasks_seen += 1
    if bundle.kind == "vae" and bundle.d_b and prior is not None:
        bundle.binary_priors.append(prior)
    return bundle


def promote_local(local, prior: BinaryPrior | None, taskcode_width: int) -> GenerativeBundle:
    """First-task rule: the local generative half becomes the global one."""
    if isinstance(local, LocalVae):
        bundle = GenerativeBundle(
            kind="vae", translator=copy.deepcopy(local.translator),
            global_model=copy.deepcopy(local.decoder), cont_dim=local.d_c, d_b=local.d_b,
            z_dim=local.z_dim, taskcode_width=taskcode_width, image_shape=local.image_shape,
            arch=local.arch, tasks_seen=1,
            binary_priors=[prior] if (local.d_b and prior is not None) else [],
        )
    elif isinstance(local, GanModel):
        bundle = GenerativeBundle(
            kind="gan", translator=copy.deepcopy(local.translator),
            global_model=copy.deepcopy(local.generator), cont_dim=local.noise_dim, d_b=0,
            z_dim=local.z_dim, taskcode_width=taskcode_width, image_shape=local.image_shape,
            arch=local.arch, tasks_seen=1,
        )
    else:
        raise TypeError(f"cannot promote {type(local).__name__}")
    for m in bundle.modules():
        m.eval()
    return bundle


def consolidate_task(bundle: GenerativeBundle | None, local, prior: BinaryPrior | None,
                     ds: Dataset, task: Task, hp: AlignHyper, seed: int = 0,
                     log=None, stats: dict | None = None) -> GenerativeBundle:
    """Merge a trained local model into the bundle: freeze copies, phase 1
    (translator only), build the current latent set, then phase 2 jointly.
    The local model is not referenced afterwards."""
    if bundle is None:
        return promote_local(local, prior, taskcode_width=getattr(local, "taskcode_width", 8))
    frozen = bundle.frozen_copy()
    x_cur = to_image_tensor(task_images(ds, task))
    if bundle.kind == "gan":
        x_cur = x_cur * 2 - 1
    for m in bundle.modules():
        m.train()
    train_translator_phase1(bundle, frozen, local, x_cur, task.index, hp.phase1_epochs, hp, seed=seed, log=log)
    zset = None
    if bundle.kind == "vae" and hp.controlled_forgetting and bundle.translator is not None:
        sub = x_cur
        if len(sub) > hp.forgetting_max_rows:
            keep = np.random.default_rng(derive_seed(seed, "forgetting_subsample", task.index))
            sub = sub[keep.permutation(len(sub))[: hp.forgetting_max_rows]]
        zset = encode_to_global(bundle, local, sub, task.index)
    bundle = train_joint_phase2(
        bundle, frozen, local, x_cur, task.index, hp.global_epochs, hp,
        prior=prior, zset=zset, seed=seed, log=log, stats=stats,
    )
    for m in bundle.modules():
        m.eval()
    return bundle


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@torch.no_grad()
def sample_global(bundle: GenerativeBundle, n: int, rng: torch.Generator | None = None,
                  task: int | None = None, return_tasks: bool = False):
    """Generate n images: task ids drawn uniformly over consolidated tasks
    (or fixed), continuous latents from N(0, I), binary latents from the
    stored per-task priors."""
    if bundle.tasks_seen < 1:
        raise ContractViolation("cannot sample from a bundle with no consolidated tasks")
    if task is not None and not 0 <= task < bundle.tasks_seen:
        raise ContractViolation(f"task {task} out of range [0, {bundle.tasks_seen})")
    if n == 0:
        empty = torch.empty((0,) + bundle.image_shape)
        return (empty, torch.empty(0, dtype=torch.long)) if return_tasks else empty
    if task is not None:
        tasks = torch.full((n,), task, dtype=torch.long)
    else:
        tasks = torch.randint(0, bundle.tasks_seen, (n,), generator=rng)
    lam_c = torch.randn(n, bundle.cont_dim, generator=rng)
    lam_b = None
    if bundle.kind == "vae" and bundle.d_b:
        prior_mat = torch.stack([p.probs for p in bundle.binary_priors]).clamp(0, 1)
        lam_b = torch.bernoulli(prior_mat[tasks], generator=rng)
    images = []
    for start in range(0, n, 512):
        sl = slice(start, start + 512)
        images.append(bundle.generate(lam_c[sl], None if lam_b is None else lam_b[sl], tasks[sl]))
    images = torch.cat(images)
    return (images, tasks) if return_tasks else images
