"""Experiment orchestration: the task loop (local training -> consolidation ->
downstream classifier -> evaluation), checkpoint persistence with resume,
metrics export, sample-grid emission, the ablation ladder, and the toy
three-task experiment."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, replace, field

import numpy as np
import torch

from . import data as D
from .alignment import (
    AlignHyper,
    GenerativeBundle,
    consolidate_task,
    encode_to_global,
    load_bundle,
    sample_global,
)
from .baseline import GrModel, gr_embed, gr_sample, make_gr_model, train_gr_task
from .classifier import (
    ClassifierHead,
    FeatureExtractor,
    make_feature_extractor,
    make_head,
    predict,
    prepare_images,
    train_classifier_head,
    train_feature_extractor,
    train_finetune_classifier,
)
from .config import ExperimentConfig, ablation_ladder
from .gan import GanModel, make_gan, train_local_gan
from .metrics import FeatureNet, MetricsReport, evaluate_after_task, train_feature_net
from .nets import ContractViolation
from .torchutil import chw_shape, derive_seed, to_image_tensor, to_numpy_images
from .vae import train_local_vae


@dataclass
class RunArtifacts:
    """Filesystem outputs of one experiment (all seeds)."""

    out_dir: str
    config_hash: str
    seed_dirs: dict[int, str] = field(default_factory=dict)
    metrics: dict[int, str] = field(default_factory=dict)
    checkpoints: dict[int, list[str]] = field(default_factory=dict)
    samples: dict[int, list[str]] = field(default_factory=dict)
    summaries: dict[int, dict] = field(default_factory=dict)


class _RunLog:
    """Plain-text run log plus a JSON-lines loss stream."""

    def __init__(self, run_dir, resume: bool = False):
        self.txt = open(os.path.join(run_dir, "run.log"), "a")
        self.jsonl = open(os.path.join(run_dir, "losses.jsonl"), "a" if resume else "w")

    def line(self, msg: str):
        self.txt.write(f"[{time.strftime('%H:%M:%S')}] {msg}\n")
        self.txt.flush()

    def loss(self, record: dict):
        self.jsonl.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self.txt.close()
        self.jsonl.close()


def _split_kwargs(cfg: ExperimentConfig, split: str) -> dict:
    # "n" sizes the train split; an explicit "n_test" overrides it for test
    kw = dict(cfg.dataset_kwargs)
    n_test = kw.pop("n_test", None)
    if split == "test" and n_test is not None:
        kw["n"] = n_test
    return kw


def _load_split(cfg: ExperimentConfig, split: str) -> D.Dataset:
    names = cfg.dataset.split("->")
    kw = _split_kwargs(cfg, split)
    parts = [D.load_dataset(n, root=cfg.data_root, split=split, **kw) for n in names]
    return parts[0] if len(parts) == 1 else D.concat_datasets(parts)


def _build_streams(cfg: ExperimentConfig, seed: int):
    sc = cfg.scenario
    if sc.policy == "sequential_datasets":
        names = cfg.dataset.split("->")
        if len(names) < 2:
            raise ContractViolation("sequential_datasets needs 'a->b' style dataset names")
        train_parts = [D.load_dataset(n, root=cfg.data_root, split="train", **_split_kwargs(cfg, "train")) for n in names]
        test_parts = [D.load_dataset(n, root=cfg.data_root, split="test", **_split_kwargs(cfg, "test")) for n in names]
        if cfg.limit_train:
            train_parts = [D.subsample(p, cfg.limit_train // len(names), seed) for p in train_parts]
        train_ds, stream = D.split_sequential(train_parts, sc.num_tasks, seed=seed)
        test_ds, test_stream = D.split_sequential(test_parts, sc.num_tasks, seed=seed)
        return train_ds, test_ds, stream, test_stream
    train_ds = _load_split(cfg, "train")
    test_ds = _load_split(cfg, "test")
    if cfg.limit_train:
        train_ds = D.subsample(train_ds, cfg.limit_train, seed)
    if sc.policy == "class_incremental":
        stream = D.split_class_incremental(train_ds, sc.num_tasks, seed=seed)
        test_stream = D.split_class_incremental(test_ds, sc.num_tasks, seed=seed)
    else:
        stream = D.split_dirichlet(train_ds, sc.num_tasks, sc.alpha, seed=seed)
        test_stream = D.split_dirichlet(test_ds, sc.num_tasks, sc.alpha, seed=seed)
    return train_ds, test_ds, stream, test_stream


_FEATURE_NET_CACHE: dict[tuple, FeatureNet] = {}


def _feature_net(train_ds: D.Dataset, test_ds: D.Dataset, epochs: int, seed: int, device: str) -> FeatureNet:
    key = (train_ds.name, train_ds.images.shape, float(train_ds.images.sum()), epochs, seed)
    if key not in _FEATURE_NET_CACHE:
        _FEATURE_NET_CACHE[key] = train_feature_net(
            train_ds, test_ds, epochs=epochs, seed=seed, device=device
        )
    return _FEATURE_NET_CACHE[key]


def _classes_seen(stream: D.TaskStream, t: int) -> set[int]:
    seen: set[int] = set()
    for task in stream.tasks[: t + 1]:
        seen.update(int(c) for c in task.classes)
    return seen


def _save_checkpoint(path: str, cfg: ExperimentConfig, seed: int, model, clf=None, finetune=None):
    extra = {"rng/torch": torch.get_rng_state().numpy()}
    meta = {"config_hash": cfg.config_hash(), "seed": seed}
    if clf is not None:
        fe, head, prev = clf
        for k, v in fe.net.state_dict().items():
            extra[f"clf/fe/{k}"] = v.cpu().numpy()
        for k, v in head.net.state_dict().items():
            extra[f"clf/head/{k}"] = v.cpu().numpy()
        if prev is not None:
            for k, v in prev[0].net.state_dict().items():
                extra[f"clf/prev_fe/{k}"] = v.cpu().numpy()
            for k, v in prev[1].net.state_dict().items():
                extra[f"clf/prev_head/{k}"] = v.cpu().numpy()
    if finetune is not None:
        for k, v in finetune[0].net.state_dict().items():
            extra[f"fn/fe/{k}"] = v.cpu().numpy()
        for k, v in finetune[1].net.state_dict().items():
            extra[f"fn/head/{k}"] = v.cpu().numpy()
    if isinstance(model, GrModel):
        arrays = {f"gr/{k}": v.cpu().numpy() for k, v in model.vae.state_dict().items()}
        arrays.update(extra)
        tmp = f"{path}.tmp.npz"
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
        meta.update({"kind": "gr", "tasks_seen": model.tasks_seen,
                     "image_shape": list(model.vae.image_shape), "d_c": model.vae.d_c,
                     "arch": model.vae.arch})
        with open(f"{path}.json", "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
    else:
        model.save(path, extra_arrays=extra, metadata=meta)


def _restore_group(data, prefix: str, net: torch.nn.Module):
    state = {k[len(prefix):]: torch.from_numpy(data[k]) for k in data.files if k.startswith(prefix)}
    net.load_state_dict(state)


def _save_local_chain(ckpt_dir: str, t: int, module: torch.nn.Module):
    """Scratch state for the local-model warm-start chain: one file per task,
    pruned so only the last two remain (the local model is temporary memory,
    not part of the persistent bundle)."""
    arrays = {f"local/{k}": v.cpu().numpy() for k, v in module.state_dict().items()}
    np.savez(os.path.join(ckpt_dir, f"local_task_{t:02d}.npz"), **arrays)
    stale = os.path.join(ckpt_dir, f"local_task_{t - 2:02d}.npz")
    if t >= 2 and os.path.exists(stale):
        os.remove(stale)


def _load_local_chain(ckpt_dir: str, t_last: int, build):
    """Rebuild the warm-start source for task t_last+1, or None when the run
    never trained a local model (fresh start)."""
    path = os.path.join(ckpt_dir, f"local_task_{t_last:02d}.npz")
    if not os.path.exists(path):
        raise ContractViolation(
            f"cannot resume exactly: warm-start state {path} is missing "
            "(resume is supported from the most recent task checkpoint)"
        )
    module = build()
    _restore_group(np.load(path), "local/", module)
    module.eval()
    return module


def _run_seed(cfg: ExperimentConfig, seed: int, resume: bool = False) -> dict:
    run_dir = os.path.join(cfg.out, f"{cfg.config_hash()}_s{seed}")
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    samples_dir = os.path.join(run_dir, "samples")
    for d in (run_dir, ckpt_dir, samples_dir):
        os.makedirs(d, exist_ok=True)
    log = _RunLog(run_dir, resume=resume)
    log.line(f"config {cfg.config_hash()} seed {seed} method {cfg.method} dataset {cfg.dataset}")

    train_ds, test_ds, stream, test_stream = _build_streams(cfg, seed)
    stream.save_manifest(os.path.join(run_dir, "stream_manifest.json"))
    fnet = _feature_net(train_ds, test_ds, cfg.eval.feature_net_epochs, seed, cfg.device)
    log.line(f"feature net accuracy {fnet.accuracy:.4f} (valid={fnet.valid})")

    report = MetricsReport(metadata={
        "config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": seed,
        "eval_budget": cfg.eval.budget, "feature_net_accuracy": round(fnet.accuracy, 6),
        "feature_net_valid": fnet.valid,
    })
    metrics_json = os.path.join(run_dir, "metrics.json")
    metrics_csv = os.path.join(run_dir, "metrics.csv")

    model = None  # GenerativeBundle or GrModel
    prev_local_gan: GanModel | None = None
    prev_local_vae = None
    fe = head = prev_clf = None
    fn_fe = fn_head = None
    start_task = 0

    if resume:
        done = sorted(
            int(f.split("_")[1].split(".")[0])
            for f in os.listdir(ckpt_dir)
            if f.startswith("task_") and f.endswith(".bundle")
        )
        if done:
            start_task = done[-1] + 1
            path = os.path.join(ckpt_dir, f"task_{done[-1]:02d}.bundle")
            model, extra, meta = _load_checkpoint(path, cfg)
            if os.path.exists(metrics_json):
                report = MetricsReport.from_json(metrics_json)
            if cfg.clf.enabled and any(k.startswith("clf/") for k in extra):
                fe, head, prev_clf, fn_fe, fn_head = _restore_classifiers(cfg, extra, train_ds, model)
            if cfg.method == "multiband_gan" and start_task < len(stream):
                prev_local_gan = _load_local_chain(
                    ckpt_dir, done[-1], lambda: make_gan(cfg.gan_hyper(), model.image_shape)
                )
            if cfg.method == "multiband_vae" and start_task < len(stream):
                from .vae import make_vae

                prev_local_vae = _load_local_chain(
                    ckpt_dir, done[-1],
                    lambda: make_vae(cfg.vae_hyper(), model.image_shape, task_index=done[-1]),
                )
            log.line(f"resumed after task {done[-1]}")

    stats: dict = {}
    try:
        return _task_loop(cfg, seed, stream, test_stream, train_ds, test_ds, fnet, report,
                          metrics_json, metrics_csv, run_dir, ckpt_dir, samples_dir, log,
                          model, prev_local_gan, prev_local_vae, fe, head, prev_clf,
                          fn_fe, fn_head, start_task, stats)
    except Exception as e:
        # machine-readable failure record; partial artifacts stay on disk
        with open(os.path.join(run_dir, "error.json"), "w") as f:
            json.dump({"error": str(e), "type": type(e).__name__,
                       "config_hash": cfg.config_hash(), "seed": seed}, f, indent=1)
        log.line(f"run failed: {type(e).__name__}: {e}")
        log.close()
        raise


def _task_loop(cfg, seed, stream, test_stream, train_ds, test_ds, fnet, report,
               metrics_json, metrics_csv, run_dir, ckpt_dir, samples_dir, log,
               model, prev_local_gan, prev_local_vae, fe, head, prev_clf,
               fn_fe, fn_head, start_task, stats) -> dict:
    for t in range(start_task, len(stream)):
        task = stream.tasks[t]
        t0 = time.time()
        log.line(f"task {t}: {len(task)} samples, classes {task.classes.tolist()}")
        if cfg.method == "gr":
            hp = replace(cfg.vae_hyper(), epochs=cfg.gr_epochs(), use_translator=False, d_b=0)
            if model is None:
                model = make_gr_model(hp, chw_shape(train_ds.image_shape), seed=derive_seed(seed, "gr"))
            model = train_gr_task(model, train_ds, task, hp, seed=seed, log=log.loss)
        elif cfg.method == "multiband_vae":
            local, prior = train_local_vae(train_ds, task, cfg.vae_hyper(), seed=seed,
                                           log=log.loss, init=prev_local_vae)
            model = consolidate_task(model, local, prior, train_ds, task, cfg.align_hyper(),
                                     seed=seed, log=log.loss, stats=stats)
            prev_local_vae = local
            _save_local_chain(ckpt_dir, t, local)
        else:
            local = train_local_gan(train_ds, task, cfg.gan_hyper(), seed=seed,
                                    init=prev_local_gan, log=log.loss)
            model = consolidate_task(model, local, None, train_ds, task, cfg.align_hyper(),
                                     seed=seed, log=log.loss, stats=stats)
            prev_local_gan = local
            _save_local_chain(ckpt_dir, t, local)

        finetune_accuracy = None
        if cfg.clf.enabled:
            chp = cfg.clf_hyper()
            gdim = model.z_dim if model.task_conditioned else model.cont_dim + model.d_b
            if fe is None:
                fe = make_feature_extractor(chp, chw_shape(train_ds.image_shape), gdim,
                                            seed=derive_seed(seed, "fe_init"))
                head = make_head(gdim, train_ds.num_classes, seed=derive_seed(seed, "head_init"))
                fn_fe = make_feature_extractor(chp, chw_shape(train_ds.image_shape), gdim,
                                               seed=derive_seed(seed, "fn_fe_init"))
                fn_head = make_head(gdim, train_ds.num_classes, seed=derive_seed(seed, "fn_head_init"))
            fe = train_feature_extractor(model, fe, chp, seed=seed, log=log.loss)
            x_cur = to_image_tensor(D.task_images(train_ds, task))
            y_cur = torch.as_tensor(D.task_labels(train_ds, task))
            head = train_classifier_head(model, fe, head, x_cur, y_cur, prev_clf, chp,
                                         seed=seed, log=log.loss)
            prev_clf = (copy.deepcopy(fe), copy.deepcopy(head))
            fn_fe, fn_head = train_finetune_classifier(
                fn_fe, fn_head, prepare_images(model, x_cur), y_cur, chp, seed=derive_seed(seed, "fn", t)
            )
            seen = np.asarray(sorted(_classes_seen(stream, t)))
            mask = np.isin(test_ds.labels, seen)
            ids, _ = predict(fn_fe, fn_head, prepare_images(model, to_image_tensor(test_ds.images[mask])))
            finetune_accuracy = float((ids.numpy() == test_ds.labels[mask]).mean())

        if cfg.eval.after == "each_task" or t == len(stream) - 1:
            rows = evaluate_after_task(
                model, test_stream, test_ds, fnet, t, budget=cfg.eval.budget, seed=seed,
                num_clusters=cfg.eval.num_clusters, num_angles=cfg.eval.num_angles,
                classifier=(fe, head) if cfg.clf.enabled else None,
                classes_seen=_classes_seen(stream, t) if cfg.clf.enabled else None,
                sampler=(lambda n, rng, task=None: gr_sample(model, n, rng)) if cfg.method == "gr" else None,
            )
            for r in rows:
                r["seed"] = seed
                if finetune_accuracy is not None and r.get("accuracy") is not None:
                    r["finetune_accuracy"] = finetune_accuracy
                report.add_row(**r)
            log.line(f"task {t} evaluated: " + "; ".join(
                f"s={r['evaluated']} fid={r['fid']:.2f}" for r in rows))

        _save_checkpoint(os.path.join(ckpt_dir, f"task_{t:02d}.bundle"), cfg, seed, model,
                         clf=(fe, head, prev_clf) if cfg.clf.enabled else None,
                         finetune=(fn_fe, fn_head) if cfg.clf.enabled else None)
        report.to_json(metrics_json)
        log.line(f"task {t} done in {time.time() - t0:.1f}s")

    report.to_csv(metrics_csv)
    report.to_json(metrics_json)
    emit_samples(model, 10, samples_dir, seed=seed)
    summary = {
        "final_mean_fid": report.final_mean("fid"),
        "rows": len(report.rows),
        "stats": dict(stats),
        "run_dir": run_dir,
    }
    acc_rows = [r for r in report.rows if r.get("accuracy") is not None]
    if acc_rows:
        last = max(r["trained_after"] for r in acc_rows)
        summary["final_accuracy"] = max(
            r["accuracy"] for r in acc_rows if r["trained_after"] == last
        )
        fin = [r.get("finetune_accuracy") for r in acc_rows if r["trained_after"] == last]
        if any(v is not None for v in fin):
            summary["final_finetune_accuracy"] = max(v for v in fin if v is not None)
    with open(os.path.join(run_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    log.line(f"run complete: {summary}")
    log.close()
    return summary


def _load_checkpoint(path: str, cfg: ExperimentConfig):
    with open(f"{path}.json") as f:
        meta = json.load(f)
    if meta.get("kind") == "gr":
        hp = replace(cfg.vae_hyper(), epochs=cfg.gr_epochs(), use_translator=False, d_b=0)
        model = make_gr_model(hp, tuple(meta["image_shape"]))
        data = np.load(path)
        _restore_group(data, "gr/", model.vae)
        model.tasks_seen = meta["tasks_seen"]
        model.vae.eval()
        return model, {k: data[k] for k in data.files if not k.startswith("gr/")}, meta
    bundle, extra, meta = load_bundle(path)
    return bundle, extra, meta


def _restore_classifiers(cfg: ExperimentConfig, extra: dict, train_ds: D.Dataset, model):
    chp = cfg.clf_hyper()
    gdim = model.z_dim if model.task_conditioned else model.cont_dim + model.d_b

    class _Arrays:
        files = list(extra)

        def __getitem__(self, k):
            return extra[k]

    arrays = _Arrays()
    fe = make_feature_extractor(chp, chw_shape(train_ds.image_shape), gdim)
    head = make_head(gdim, train_ds.num_classes)
    _restore_group(arrays, "clf/fe/", fe.net)
    _restore_group(arrays, "clf/head/", head.net)
    prev = None
    if any(k.startswith("clf/prev_fe/") for k in extra):
        pfe = make_feature_extractor(chp, chw_shape(train_ds.image_shape), gdim)
        phead = make_head(gdim, train_ds.num_classes)
        _restore_group(arrays, "clf/prev_fe/", pfe.net)
        _restore_group(arrays, "clf/prev_head/", phead.net)
        prev = (pfe, phead)
    fn_fe = make_feature_extractor(chp, chw_shape(train_ds.image_shape), gdim)
    fn_head = make_head(gdim, train_ds.num_classes)
    _restore_group(arrays, "fn/fe/", fn_fe.net)
    _restore_group(arrays, "fn/head/", fn_head.net)
    for m in (fe.net, head.net, fn_fe.net, fn_head.net):
        m.eval()
    return fe, head, prev, fn_fe, fn_head


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> RunArtifacts:
    """Run every seed of the experiment; artifacts land under
    out/<config-hash>_s<seed>/."""
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.json"), "w") as f:
        f.write(cfg.canonical_json())
    art = RunArtifacts(out_dir=cfg.out, config_hash=cfg.config_hash())
    for seed in cfg.seeds:
        summary = _run_seed(cfg, seed, resume=resume)
        run_dir = summary["run_dir"]
        art.seed_dirs[seed] = run_dir
        art.metrics[seed] = os.path.join(run_dir, "metrics.csv")
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        art.checkpoints[seed] = sorted(
            os.path.join(ckpt_dir, f) for f in os.listdir(ckpt_dir) if f.endswith(".bundle")
        )
        sdir = os.path.join(run_dir, "samples")
        art.samples[seed] = sorted(os.path.join(sdir, f) for f in os.listdir(sdir))
        art.summaries[seed] = summary
    return art


# ---------------------------------------------------------------------------
# Sample grids
# ---------------------------------------------------------------------------


def emit_samples(model, n_per_task: int, out_dir, seed: int = 0) -> list[str]:
    """Per-task sample strips plus a combined grid; every row of the grid uses
    the same continuous noise per column. The noise is stored beside the
    images and reused, so re-emission is byte-identical."""
    os.makedirs(out_dir, exist_ok=True)
    noise_path = os.path.join(out_dir, "noise.npy")
    cont_dim = model.cont_dim if isinstance(model, GenerativeBundle) else model.vae.d_c
    if os.path.exists(noise_path):
        lam_c = torch.from_numpy(np.load(noise_path))
        if lam_c.shape != (n_per_task, cont_dim):
            lam_c = None
    else:
        lam_c = None
    if lam_c is None:
        g = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "sample_noise"))
        lam_c = torch.randn(n_per_task, cont_dim, generator=g)
        np.save(noise_path, lam_c.numpy())

    rows = []
    paths = []
    n_rows = model.tasks_seen if getattr(model, "task_conditioned", False) else 1
    g_b = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "sample_binary"))
    with torch.no_grad():
        for t in range(n_rows):
            if isinstance(model, GenerativeBundle):
                lam_b = None
                if model.kind == "vae" and model.d_b:
                    probs = model.binary_priors[t].probs.clamp(0, 1).expand(n_per_task, -1)
                    lam_b = torch.bernoulli(probs, generator=g_b)
                imgs = model.generate(lam_c, lam_b, t)
                if model.kind == "gan":
                    imgs = (imgs + 1) / 2
            else:
                imgs = model.vae.decoder(lam_c)
            rows.append(to_numpy_images(imgs))
    for t, arr in enumerate(rows):
        p = os.path.join(out_dir, f"task_{t:02d}.png")
        _write_grid(p, arr[None])
        paths.append(p)
    grid_path = os.path.join(out_dir, "grid.png")
    _write_grid(grid_path, np.stack(rows))
    paths.append(grid_path)
    return paths


def _write_grid(path, rows: np.ndarray):
    """rows: (R, N, H, W) or (R, N, H, W, C) in [0, 1] -> one PNG grid."""
    from PIL import Image

    r, n = rows.shape[:2]
    h, w = rows.shape[2], rows.shape[3]
    channels = rows.shape[4] if rows.ndim == 5 else 1
    canvas = np.zeros((r * (h + 2) + 2, n * (w + 2) + 2, channels), dtype=np.float32)
    for i in range(r):
        for j in range(n):
            tile = rows[i, j] if rows.ndim == 5 else rows[i, j, :, :, None]
            y, x = 2 + i * (h + 2), 2 + j * (w + 2)
            canvas[y : y + h, x : x + w] = tile
    canvas = (np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(canvas.squeeze(-1) if channels == 1 else canvas)
    img.save(path, format="PNG")


# ---------------------------------------------------------------------------
# Ablation ladder
# ---------------------------------------------------------------------------


def run_ablation(base_cfg: ExperimentConfig) -> tuple[list[dict], str]:
    """Run the cumulative ladder (GR -> +two-step -> +translator -> +binary
    latent -> +controlled forgetting -> +conv) on the same seeds and emit the
    final-average-FID table."""
    os.makedirs(base_cfg.out, exist_ok=True)
    table = []
    for label, cfg in ablation_ladder(base_cfg):
        cfg = replace(cfg, out=os.path.join(base_cfg.out, label.lstrip("+")))
        art = run_experiment(cfg)
        fids = {s: art.summaries[s]["final_mean_fid"] for s in cfg.seeds}
        table.append({
            "modification": label,
            "mean_fid": float(np.mean(list(fids.values()))),
            **{f"fid_seed_{s}": v for s, v in fids.items()},
        })
    path = os.path.join(base_cfg.out, "ablation.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    return table, path


# ---------------------------------------------------------------------------
# Toy three-task experiment
# ---------------------------------------------------------------------------


def _mean_cross_cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    an = a / a.norm(dim=1, keepdim=True).clamp_min(1e-12)
    bn = b / b.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return float((an @ bn.T).mean())


def _normalized_drift(before: torch.Tensor, after: torch.Tensor) -> float:
    bn = before / before.norm(dim=1, keepdim=True).clamp_min(1e-12)
    an = after / after.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return float((an - bn).norm(dim=1).mean())


def run_toy(cfg: ExperimentConfig, per_task: int = 1000, extra_shared: int = 500,
            probe: int = 256) -> dict:
    """Three tasks (one class each, the third re-introducing held-back samples
    of the first class): full aligned training vs. the GR baseline.

    Reports (a) the gap between cross-task same-class cosine similarity and
    cross-class similarity in Z, (b) embedding drift of fixed early-task
    inputs between the second and third task for both methods, and (c) the
    full lower-triangular metric matrix."""
    seed = cfg.seeds[0]
    run_dir = os.path.join(cfg.out, f"toy_{cfg.config_hash()}_s{seed}")
    os.makedirs(run_dir, exist_ok=True)
    log = _RunLog(run_dir)
    train_ds = _load_split(cfg, "train")
    test_ds = _load_split(cfg, "test")
    classes = (1, 0, 2)
    stream = D.make_toy_stream(train_ds, classes=classes, per_task=per_task,
                               extra_shared=extra_shared, seed=seed)
    test_stream = D.make_toy_stream(
        test_ds, classes=classes,
        per_task=max(50, per_task * len(test_ds) // len(train_ds)),
        extra_shared=max(20, extra_shared * len(test_ds) // len(train_ds)), seed=seed,
    )
    fnet = _feature_net(train_ds, test_ds, cfg.eval.feature_net_epochs, seed, cfg.device)
    report = MetricsReport(metadata={"config_hash": cfg.config_hash(), "seed": seed,
                                     "experiment": "toy", "feature_net_accuracy": fnet.accuracy})

    # aligned pipeline, keeping per-task local encoders for probing
    locals_kept = []
    bundle = None
    translator_snapshots = {}
    stats: dict = {}
    for t, task in enumerate(stream):
        local, prior = train_local_vae(train_ds, task, cfg.vae_hyper(), seed=seed, log=log.loss,
                                       init=locals_kept[-1] if locals_kept else None)
        bundle = consolidate_task(bundle, local, prior, train_ds, task, cfg.align_hyper(),
                                  seed=seed, log=log.loss, stats=stats)
        locals_kept.append(local)
        translator_snapshots[t] = copy.deepcopy(bundle.translator)
        rows = evaluate_after_task(bundle, test_stream, test_ds, fnet, t,
                                   budget=min(cfg.eval.budget, 2000), seed=seed,
                                   num_clusters=cfg.eval.num_clusters)
        for r in rows:
            r["seed"] = seed
            report.add_row(**r)
        log.line(f"aligned task {t} done")
    report.to_csv(os.path.join(run_dir, "metrics.csv"))
    report.to_json(os.path.join(run_dir, "metrics.json"))

    # (a) same-class alignment across tasks in final Z
    x1 = to_image_tensor(D.task_images(train_ds, stream.tasks[0])[:probe])
    x0 = to_image_tensor(D.task_images(train_ds, stream.tasks[1])[:probe])
    t3_images = D.task_images(train_ds, stream.tasks[2])
    t3_labels = D.task_labels(train_ds, stream.tasks[2])
    x1_t3 = to_image_tensor(t3_images[t3_labels == classes[0]][:probe])
    z1_t1 = encode_to_global(bundle, locals_kept[0], x1, 0).vectors
    z0 = encode_to_global(bundle, locals_kept[1], x0, 1).vectors
    z1_t3 = encode_to_global(bundle, locals_kept[2], x1_t3, 2).vectors
    same_class = _mean_cross_cosine(z1_t1, z1_t3)
    cross_class = _mean_cross_cosine(torch.cat([z1_t1, z1_t3]), z0)
    cosine_gap = same_class - cross_class

    # (b) drift of fixed class-0 embeddings between tasks 2 and 3
    with torch.no_grad():
        from .vae import encode as vae_encode, sample_latent

        out0 = vae_encode(locals_kept[1], x0)
        code0 = sample_latent(out0, mode="eval", task=1)

        def embed_with(translator):
            saved = bundle.translator
            bundle.translator = translator
            z = bundle.latent_to_global(code0.lambda_c, code0.lambda_b, 1)
            bundle.translator = saved
            return z

        aligned_before = embed_with(translator_snapshots[1])
        aligned_after = embed_with(translator_snapshots[2])
    drift_aligned = _normalized_drift(aligned_before, aligned_after)

    # GR baseline at the same epoch budget
    gr_hp = replace(cfg.vae_hyper(), epochs=cfg.gr_epochs(), use_translator=False, d_b=0)
    gr = make_gr_model(gr_hp, chw_shape(train_ds.image_shape), seed=derive_seed(seed, "gr"))
    gr_snapshots = {}
    for t, task in enumerate(stream):
        gr = train_gr_task(gr, train_ds, task, gr_hp, seed=seed, log=log.loss)
        if t >= 1:
            gr_snapshots[t] = gr_embed(gr, x0)
        log.line(f"gr task {t} done")
    drift_gr = _normalized_drift(gr_snapshots[1], gr_snapshots[2])

    summary = {
        "same_class_cosine": same_class,
        "cross_class_cosine": cross_class,
        "cosine_gap": cosine_gap,
        "drift_aligned": drift_aligned,
        "drift_gr": drift_gr,
        "fid_matrix": [[None if np.isnan(v) else round(float(v), 3) for v in row]
                       for row in report.fid_matrix()],
        "run_dir": run_dir,
    }
    with open(os.path.join(run_dir, "toy_summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    log.line(f"toy summary: {summary}")
    log.close()
    return summary
