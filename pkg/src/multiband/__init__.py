"""Continual learning of generative models by aligning per-task latent spaces
into one global latent space, with controlled forgetting, a downstream
classifier over the aligned latents, and a full evaluation harness."""

from .data import (
    Dataset,
    Task,
    TaskStream,
    concat_datasets,
    load_dataset,
    make_toy_stream,
    split_class_incremental,
    split_dirichlet,
    split_sequential,
)
from .vae import (
    BinaryPrior,
    LatentCode,
    LocalVae,
    VaeEncoderOutput,
    VaeHyper,
    elbo_loss,
    encode,
    sample_latent,
    train_local_vae,
)
from .gan import GanHyper, GanModel, NoiseBatch, critic_loss, generator_loss, train_local_gan
from .alignment import (
    AlignHyper,
    GenerativeBundle,
    GlobalLatentSet,
    RehearsalPair,
    build_rehearsal_set,
    consolidate_task,
    controlled_forgetting,
    encode_to_global,
    load_bundle,
    sample_global,
    train_joint_phase2,
    train_translator_phase1,
)
from .classifier import (
    ClassifierHead,
    ClfHyper,
    FeatureExtractor,
    predict,
    train_classifier_head,
    train_feature_extractor,
)
from .metrics import (
    FeatureNet,
    MetricsReport,
    evaluate_after_task,
    fid,
    fid_from_moments,
    precision_recall,
    train_feature_net,
    wasserstein_1d,
)
from .baseline import GrModel, train_gr_task
from .config import ExperimentConfig, config_from_dict, load_config
from .runner import run_ablation, run_experiment, run_toy

__version__ = "0.1.0"
