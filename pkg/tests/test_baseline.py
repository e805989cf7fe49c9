import torch

from multiband import data as D
from multiband.baseline import gr_embed, gr_sample, make_gr_model, train_gr_task
from multiband.vae import VaeHyper


def _setup(blobs):
    train, _ = blobs
    stream = D.split_class_incremental(train, 2, seed=0)
    hp = VaeHyper(epochs=3, d_c=4, d_b=0, z_dim=32, batch=32, use_translator=False)
    return train, stream, hp


def test_gr_first_task_is_plain_vae_training(blobs):
    train, stream, hp = _setup(blobs)
    logs = []
    model = make_gr_model(hp, (1, 28, 28), seed=0)
    model = train_gr_task(model, train, stream.tasks[0], hp, seed=0, log=logs.append)
    assert model.tasks_seen == 1
    assert logs[-1]["loss"] <= logs[0]["loss"]
    # no translator, single latent space
    assert model.vae.translator is None
    assert model.vae.d_b == 0


def test_gr_seeded_determinism(blobs):
    train, stream, hp = _setup(blobs)
    outs = []
    for _ in range(2):
        model = make_gr_model(hp, (1, 28, 28), seed=0)
        for task in stream:
            model = train_gr_task(model, train, task, hp, seed=0)
        outs.append(gr_sample(model, 8, rng=torch.Generator().manual_seed(1)))
    assert torch.equal(outs[0], outs[1])


def test_gr_embedding_is_eval_mode_mean(blobs):
    train, stream, hp = _setup(blobs)
    model = make_gr_model(hp, (1, 28, 28), seed=0)
    model = train_gr_task(model, train, stream.tasks[0], hp, seed=0)
    x = torch.rand(5, 1, 28, 28, generator=torch.Generator().manual_seed(2))
    a = gr_embed(model, x)
    b = gr_embed(model, x)
    assert torch.equal(a, b)
    assert a.shape == (5, 4)


def test_gr_epoch_budget_parity():
    from multiband.config import config_from_dict

    cfg = config_from_dict({"epochs": {"local": 20, "global": 40, "phase1": 5}})
    assert cfg.gr_epochs() == 60  # local + global, discovery epochs excluded
