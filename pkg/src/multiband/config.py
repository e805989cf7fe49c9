"""Experiment configuration: nested key-value schema with full validation,
paper-default hyperparameters, canonical serialization, and a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import DATASET_NAMES
from .vae import VaeHyper
from .gan import GanHyper
from .alignment import AlignHyper
from .classifier import ClfHyper

METHODS = ("multiband_vae", "multiband_gan", "gr")
SCENARIO_POLICIES = ("class_incremental", "dirichlet", "sequential_datasets")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class ScenarioConfig:
    policy: str = "class_incremental"
    num_tasks: int = 5
    alpha: float = 1.0  # Dirichlet concentration; ignored by other policies


@dataclass
class EpochsConfig:
    local: int = 70
    global_: int = 140  # serialized as "global"
    phase1: int = 5


@dataclass
class EvalConfig:
    budget: int = 5000
    after: str = "each_task"  # each_task | final
    num_clusters: int = 20
    num_angles: int = 1001
    feature_net_epochs: int = 8


@dataclass
class VaeConfig:
    arch: str = "dense"  # dense | conv | conv_celeba
    d_c: int = 8
    d_b: int = 4
    z_dim: int = 384
    temperature: float = 0.67
    lr: float = 1e-3
    sched_gamma: float = 0.98
    batch: int = 64


@dataclass
class GanConfig:
    arch: str = "conv"  # conv | conv_cifar
    noise_dim: int = 8
    z_dim: int = 100
    lambda_gp: float = 10.0
    critic_steps: int = 5
    lr_local: float = 2e-4
    lr_global: float = 1e-3
    sched_gamma: float = 0.99
    batch: int = 64


@dataclass
class ClfConfig:
    enabled: bool = False
    fe_arch: str = "mlp400"
    epochs_fe: int = 100
    epochs_head: int = 20
    batch: int = 256
    lr: float = 1e-3
    sched_gamma: float = 0.99
    fe_pairs_per_task: int = 2000
    replay_per_task: int = 0


@dataclass
class AblationFlags:
    two_step: bool = True
    translator: bool = True
    binary_latent: bool = True
    controlled_forgetting: bool = True
    conv: bool = False


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_root: str = "data"
    method: str = "multiband_vae"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    gamma: float | None = None  # None = per-scenario default (CI: 1.0, Dirichlet: 0.95)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs/experiment"
    epochs: EpochsConfig = field(default_factory=EpochsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    clf: ClfConfig = field(default_factory=ClfConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    taskcode_width: int = 8
    limit_train: int = 0  # 0 = full split; otherwise per-class proportional subsample
    dataset_kwargs: dict = field(default_factory=dict)
    device: str = "cpu"

    def effective_gamma(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return 0.95 if self.scenario.policy == "dirichlet" else 1.0

    # -- hyperparameter views consumed by the training modules ------------

    def vae_hyper(self) -> VaeHyper:
        a = self.ablation
        return VaeHyper(
            arch="conv" if a.conv and self.vae.arch == "dense" else self.vae.arch,
            d_c=self.vae.d_c, d_b=self.vae.d_b if a.binary_latent else 0,
            z_dim=512 if (a.conv and self.vae.z_dim == 384) else self.vae.z_dim,
            temperature=self.vae.temperature, lr=self.vae.lr,
            sched_gamma=self.vae.sched_gamma, batch=self.vae.batch,
            epochs=self.epochs.local, taskcode_width=self.taskcode_width,
            use_translator=a.translator, device=self.device,
        )

    def gan_hyper(self) -> GanHyper:
        return GanHyper(
            arch=self.gan.arch, noise_dim=self.gan.noise_dim, z_dim=self.gan.z_dim,
            lambda_gp=self.gan.lambda_gp, critic_steps=self.gan.critic_steps,
            lr=self.gan.lr_local, sched_gamma=self.gan.sched_gamma, batch=self.gan.batch,
            epochs=self.epochs.local, taskcode_width=self.taskcode_width, device=self.device,
        )

    def align_hyper(self) -> AlignHyper:
        if self.method == "multiband_gan":
            lr, sched = self.gan.lr_global, self.gan.sched_gamma
            batch = self.gan.batch
        else:
            lr, sched = self.vae.lr, self.vae.sched_gamma
            batch = self.vae.batch
        return AlignHyper(
            phase1_epochs=self.epochs.phase1 if self.ablation.translator else 0,
            global_epochs=self.epochs.global_, lr=lr, sched_gamma=sched, batch=batch,
            gamma=self.effective_gamma(),
            controlled_forgetting=self.ablation.controlled_forgetting and self.method == "multiband_vae",
            temperature=self.vae.temperature, device=self.device,
        )

    def clf_hyper(self) -> ClfHyper:
        c = self.clf
        return ClfHyper(
            fe_arch=c.fe_arch, epochs_fe=c.epochs_fe, epochs_head=c.epochs_head,
            batch=c.batch, lr=c.lr, sched_gamma=c.sched_gamma,
            fe_pairs_per_task=c.fe_pairs_per_task, replay_per_task=c.replay_per_task,
            device=self.device,
        )

    def gr_epochs(self) -> int:
        # epoch-budget parity with the aligned pipeline: local + global
        return self.epochs.local + self.epochs.global_

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["epochs"]["global"] = d["epochs"].pop("global_")
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Stable hash of the experiment semantics; environment-only fields
        (output dir, data root) and the seed list are excluded — the seed is
        embedded separately in every artifact name."""
        d = self.to_dict()
        for k in ("out", "data_root", "seeds"):
            d.pop(k)
        return hashlib.sha256(
            json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()[:10]


_RENAMES = {("epochs", "global"): "global_"}


def _fill(dc_type, value: dict, path: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(value).__name__}")
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    kwargs = {}
    for key, raw in value.items():
        name = _RENAMES.get((path, key), key)
        if name not in fields:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{key}")
        f = fields[name]
        if f.type in _NESTED:
            kwargs[name] = _fill(_NESTED[f.type], raw, key)
        else:
            kwargs[name] = raw
    return dc_type(**kwargs)


_NESTED = {
    "ScenarioConfig": ScenarioConfig,
    "EpochsConfig": EpochsConfig,
    "EvalConfig": EvalConfig,
    "VaeConfig": VaeConfig,
    "GanConfig": GanConfig,
    "ClfConfig": ClfConfig,
    "AblationFlags": AblationFlags,
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build and validate a config from a (possibly partial) nested dict;
    unknown keys anywhere are rejected."""
    cfg = _fill(ExperimentConfig, doc, "")
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    import yaml

    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    return config_from_dict(doc)


def validate_config(cfg: ExperimentConfig):
    if cfg.dataset not in DATASET_NAMES:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg.method!r}")
    if cfg.scenario.policy not in SCENARIO_POLICIES:
        raise ConfigError(f"scenario.policy must be one of {SCENARIO_POLICIES}")
    if cfg.scenario.num_tasks < 1:
        raise ConfigError("scenario.num_tasks must be >= 1")
    if cfg.scenario.policy == "dirichlet" and cfg.scenario.alpha <= 0:
        raise ConfigError(f"scenario.alpha must be positive, got {cfg.scenario.alpha}")
    if cfg.gamma is not None and not 0 < cfg.gamma <= 1:
        raise ConfigError(f"gamma must be in (0, 1], got {cfg.gamma}")
    if not cfg.seeds:
        raise ConfigError("seeds must be a non-empty list")
    if cfg.eval.after not in ("each_task", "final"):
        raise ConfigError("eval.after must be 'each_task' or 'final'")
    if cfg.vae.arch not in ("dense", "conv", "conv_celeba"):
        raise ConfigError(f"vae.arch must be dense/conv/conv_celeba, got {cfg.vae.arch!r}")
    if cfg.gan.arch not in ("conv", "conv_cifar"):
        raise ConfigError(f"gan.arch must be conv/conv_cifar, got {cfg.gan.arch!r}")
    if cfg.clf.fe_arch not in ("mlp400", "resnet18", "resnet32"):
        raise ConfigError(f"clf.fe_arch must be mlp400/resnet18/resnet32, got {cfg.clf.fe_arch!r}")
    for name, v in (("epochs.local", cfg.epochs.local), ("epochs.global", cfg.epochs.global_),
                    ("epochs.phase1", cfg.epochs.phase1)):
        if v < 0:
            raise ConfigError(f"{name} must be >= 0")
    if cfg.gan.lambda_gp < 0 or cfg.gan.critic_steps < 1:
        raise ConfigError("gan.lambda_gp must be >= 0 and gan.critic_steps >= 1")
    if cfg.method == "gr" and cfg.clf.enabled:
        raise ConfigError("the classifier stage requires an aligned bundle; method 'gr' cannot enable it")


def ablation_ladder(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """The cumulative ablation ladder, from plain generative replay to the
    full convolutional pipeline, all sharing the base seeds and scenario."""
    steps = [
        ("generative_replay", dict(method="gr")),
        ("+two_step", dict(two_step=True)),
        ("+translator", dict(translator=True)),
        ("+binary_latent", dict(binary_latent=True)),
        ("+controlled_forgetting", dict(controlled_forgetting=True)),
        ("+conv", dict(conv=True)),
    ]
    ladder = []
    flags = dict(two_step=False, translator=False, binary_latent=False,
                 controlled_forgetting=False, conv=False)
    for label, change in steps:
        method = change.pop("method", "multiband_vae")
        flags.update(change)
        cfg = dataclasses.replace(
            base,
            method=method if label == "generative_replay" else "multiband_vae",
            ablation=AblationFlags(**flags),
        )
        ladder.append((label, cfg))
    return ladder
