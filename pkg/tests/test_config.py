import dataclasses

import pytest

from multiband.config import (
    ConfigError,
    ExperimentConfig,
    ablation_ladder,
    config_from_dict,
    load_config,
)


def test_defaults_follow_published_hyperparameters():
    cfg = config_from_dict({})
    assert cfg.epochs.local == 70 and cfg.epochs.global_ == 140 and cfg.epochs.phase1 == 5
    assert cfg.vae.lr == 1e-3 and cfg.vae.sched_gamma == 0.98
    assert cfg.gan.lr_local == 2e-4 and cfg.gan.sched_gamma == 0.99
    assert cfg.gan.lambda_gp == 10.0 and cfg.gan.critic_steps == 5 and cfg.gan.batch == 64
    assert cfg.vae.d_c == 8 and cfg.vae.d_b == 4 and cfg.vae.z_dim == 384
    assert cfg.gan.z_dim == 100
    assert cfg.clf.epochs_fe == 100 and cfg.clf.epochs_head == 20 and cfg.clf.batch == 256


def test_unknown_keys_rejected_at_any_level():
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict({"no_such_key": 1})
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict({"scenario": {"policy": "dirichlet", "typo": 2}})
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict({"vae": {"archh": "dense"}})


def test_invalid_values_rejected_before_training():
    with pytest.raises(ConfigError):
        config_from_dict({"gamma": 1.5})
    with pytest.raises(ConfigError):
        config_from_dict({"method": "magic"})
    with pytest.raises(ConfigError):
        config_from_dict({"scenario": {"policy": "dirichlet", "alpha": -1}})
    with pytest.raises(ConfigError):
        config_from_dict({"seeds": []})
    with pytest.raises(ConfigError):
        config_from_dict({"dataset": "imagenet"})
    with pytest.raises(ConfigError):
        config_from_dict({"method": "gr", "clf": {"enabled": True}})


def test_gamma_defaults_by_scenario():
    ci = config_from_dict({"scenario": {"policy": "class_incremental"}})
    dr = config_from_dict({"scenario": {"policy": "dirichlet"}})
    assert ci.effective_gamma() == 1.0
    assert dr.effective_gamma() == 0.95
    explicit = config_from_dict({"gamma": 0.9})
    assert explicit.effective_gamma() == 0.9


def test_hash_stable_under_key_order_and_environment_fields():
    a = config_from_dict({"dataset": "digits", "scenario": {"num_tasks": 5, "policy": "dirichlet"}})
    b = config_from_dict({"scenario": {"policy": "dirichlet", "num_tasks": 5}, "dataset": "digits"})
    assert a.config_hash() == b.config_hash()
    c = dataclasses.replace(a, out="elsewhere", seeds=[7])
    assert c.config_hash() == a.config_hash()
    d = dataclasses.replace(a, gamma=0.5)
    assert d.config_hash() != a.config_hash()


def test_yaml_roundtrip(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(
        "dataset: digits\n"
        "method: multiband_vae\n"
        "scenario:\n  policy: dirichlet\n  num_tasks: 3\n  alpha: 1.0\n"
        "epochs:\n  local: 2\n  global: 4\n  phase1: 1\n"
    )
    cfg = load_config(p)
    assert cfg.scenario.num_tasks == 3
    assert cfg.epochs.global_ == 4


def test_ablation_ladder_structure():
    base = config_from_dict({"dataset": "digits"})
    ladder = ablation_ladder(base)
    labels = [l for l, _ in ladder]
    assert labels == ["generative_replay", "+two_step", "+translator",
                      "+binary_latent", "+controlled_forgetting", "+conv"]
    assert ladder[0][1].method == "gr"
    for _, cfg in ladder[1:]:
        assert cfg.method == "multiband_vae"
    flags = [dataclasses.asdict(cfg.ablation) for _, cfg in ladder]
    # cumulative: each rung keeps previous flags and adds one
    assert not flags[1]["translator"] and flags[2]["translator"]
    assert not flags[2]["binary_latent"] and flags[3]["binary_latent"]
    assert not flags[3]["controlled_forgetting"] and flags[4]["controlled_forgetting"]
    assert not flags[4]["conv"] and flags[5]["conv"]
    assert all(f["two_step"] for f in flags[1:])


def test_ablation_flags_shape_hypers():
    base = config_from_dict({"dataset": "digits"})
    ladder = dict(ablation_ladder(base))
    two = ladder["+two_step"].vae_hyper()
    assert not two.use_translator and two.d_b == 0
    tr = ladder["+translator"].vae_hyper()
    assert tr.use_translator and tr.d_b == 0
    full = ladder["+conv"].vae_hyper()
    assert full.arch == "conv" and full.z_dim == 512
    # phase 1 only exists once there is a translator to pre-fit
    assert ladder["+two_step"].align_hyper().phase1_epochs == 0
    assert ladder["+translator"].align_hyper().phase1_epochs == 5
    assert not ladder["+translator"].align_hyper().controlled_forgetting
    assert ladder["+controlled_forgetting"].align_hyper().controlled_forgetting
