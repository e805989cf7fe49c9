"""Generation-quality metrics: feature-space FID, distribution precision and
recall, 1-D Wasserstein channel distance, accuracy, and the per-task transfer
matrix report."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset
from .nets import LeNet, NumericalError
from .torchutil import batch_indices, derive_seed, to_image_tensor


@dataclass
class FeatureNet:
    """LeNet-style classifier trained on the full target dataset; its
    penultimate layer is the FID/PRD feature space."""

    net: LeNet
    feature_dim: int
    accuracy: float
    valid: bool  # test-accuracy gate (>= 0.98 on MNIST-scale data)


def train_feature_net(train_ds: Dataset, test_ds: Dataset, epochs: int = 8,
                      batch: int = 128, lr: float = 1e-3, seed: int = 0,
                      accuracy_gate: float = 0.98, device: str = "cpu") -> FeatureNet:
    torch.manual_seed(derive_seed(seed, "feature_net"))
    x = to_image_tensor(train_ds.images).to(device)
    y = torch.as_tensor(train_ds.labels).to(device)
    net = LeNet(x.shape[1:], train_ds.num_classes).to(device)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(derive_seed(seed, "feature_net_order"))
    net.train()
    for _ in range(epochs):
        for idx in batch_indices(len(x), batch, rng):
            loss = torch.nn.functional.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    xt = to_image_tensor(test_ds.images).to(device)
    yt = torch.as_tensor(test_ds.labels).to(device)
    with torch.no_grad():
        preds = torch.cat([net(xt[i : i + 512]).argmax(1) for i in range(0, len(xt), 512)])
    acc = float((preds == yt).float().mean())
    valid = acc >= accuracy_gate
    if not valid:
        warnings.warn(
            f"feature net test accuracy {acc:.3f} below gate {accuracy_gate}; "
            "FID/PRD values are flagged as lower-confidence",
            stacklevel=2,
        )
    return FeatureNet(net=net, feature_dim=LeNet.FEATURE_DIM, accuracy=acc, valid=valid)


@torch.no_grad()
def extract_features(fnet: FeatureNet, images) -> np.ndarray:
    """Penultimate-layer features for numpy images or (N, C, H, W) tensors in [0, 1]."""
    x = images if isinstance(images, torch.Tensor) else to_image_tensor(images)
    feats = [fnet.net.features(x[i : i + 512]) for i in range(0, len(x), 512)]
    return torch.cat(feats).cpu().numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------


def _sqrt_eigvals(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2
    w = np.linalg.eigvalsh(m)
    return np.sqrt(np.clip(w, 0, None))


def fid_from_moments(mu_r, cov_r, mu_g, cov_g, jitter: float = 1e-6) -> float:
    """||mu_r - mu_g||^2 + tr(C_r + C_g - 2 (C_r C_g)^{1/2}), square root via
    eigendecomposition of the symmetrized product, with an eps*I retry."""
    mu_r, mu_g = np.asarray(mu_r, dtype=np.float64), np.asarray(mu_g, dtype=np.float64)
    cov_r, cov_g = np.atleast_2d(np.asarray(cov_r, dtype=np.float64)), np.atleast_2d(np.asarray(cov_g, dtype=np.float64))
    for attempt in range(2):
        if attempt:
            cov_r = cov_r + jitter * np.eye(len(cov_r))
            cov_g = cov_g + jitter * np.eye(len(cov_g))
        w_r, v_r = np.linalg.eigh((cov_r + cov_r.T) / 2)
        sr = (v_r * np.sqrt(np.clip(w_r, 0, None))) @ v_r.T
        tr_sqrt = _sqrt_eigvals(sr @ cov_g @ sr).sum()
        value = float(((mu_r - mu_g) ** 2).sum() + np.trace(cov_r) + np.trace(cov_g) - 2 * tr_sqrt)
        if np.isfinite(value):
            return value
    raise NumericalError("FID matrix square root is non-finite even after jitter")


def fid(real_feats: np.ndarray, gen_feats: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    real_feats = np.asarray(real_feats, dtype=np.float64)
    gen_feats = np.asarray(gen_feats, dtype=np.float64)
    if real_feats.ndim != 2 or gen_feats.ndim != 2:
        raise ValueError("feature sets must be 2-D (n, F)")
    mu_r, mu_g = real_feats.mean(0), gen_feats.mean(0)
    cov_r = np.cov(real_feats, rowvar=False)
    cov_g = np.cov(gen_feats, rowvar=False)
    return fid_from_moments(mu_r, cov_r, mu_g, cov_g)


# ---------------------------------------------------------------------------
# Distribution precision / recall (PRD)
# ---------------------------------------------------------------------------


def prd_curve(ref_hist: np.ndarray, eval_hist: np.ndarray, num_angles: int = 1001):
    """PRD curve over a shared cluster histogram pair: alpha(lambda) =
    sum_i min(lambda * p_i, q_i) with recall alpha/lambda, lambda = tan(angle)."""
    p = np.asarray(ref_hist, dtype=np.float64)
    q = np.asarray(eval_hist, dtype=np.float64)
    angles = np.linspace(1e-6, np.pi / 2 - 1e-6, num_angles)
    lam = np.tan(angles)
    precision = np.minimum(lam[:, None] * p[None, :], q[None, :]).sum(axis=1)
    recall = precision / lam
    return np.clip(precision, 0, 1), np.clip(recall, 0, 1)


def _max_f_beta(precision: np.ndarray, recall: np.ndarray, beta: float) -> float:
    b2 = beta * beta
    denom = b2 * precision + recall
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(denom > 0, (1 + b2) * precision * recall / denom, 0.0)
    return float(f.max())


def precision_recall(real_feats: np.ndarray, gen_feats: np.ndarray,
                     num_angles: int = 1001, num_clusters: int = 20,
                     seed: int = 0) -> tuple[float, float]:
    """PRD summary pair over joint k-means cluster histograms: precision is
    the curve's max F_{1/8}, recall its max F_8."""
    from sklearn.cluster import KMeans

    real_feats = np.asarray(real_feats, dtype=np.float64)
    gen_feats = np.asarray(gen_feats, dtype=np.float64)
    if len(real_feats) == 0 or len(gen_feats) == 0:
        raise ValueError("both feature sets must be non-empty")
    if num_clusters > len(real_feats) + len(gen_feats):
        raise ValueError(
            f"num_clusters={num_clusters} exceeds total samples {len(real_feats) + len(gen_feats)}"
        )
    joint = np.concatenate([real_feats, gen_feats])
    km = KMeans(n_clusters=num_clusters, n_init=10, random_state=seed).fit(joint)
    labels_r = km.labels_[: len(real_feats)]
    labels_g = km.labels_[len(real_feats):]
    p = np.bincount(labels_r, minlength=num_clusters) / len(labels_r)
    q = np.bincount(labels_g, minlength=num_clusters) / len(labels_g)
    precision_curve, recall_curve = prd_curve(p, q, num_angles)
    return _max_f_beta(precision_curve, recall_curve, 1 / 8), _max_f_beta(precision_curve, recall_curve, 8)


# ---------------------------------------------------------------------------
# 1-D Wasserstein
# ---------------------------------------------------------------------------


def wasserstein_1d(a, b) -> float:
    """W1 between two sample sets via the exact quantile-coupling formula."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if len(a) == 0 or len(b) == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    if len(a) == len(b):
        return float(np.abs(a - b).mean())
    qa = np.arange(1, len(a) + 1) / len(a)
    qb = np.arange(1, len(b) + 1) / len(b)
    edges = np.union1d(qa, qb)
    widths = np.diff(np.concatenate([[0.0], edges]))
    mids = edges - widths / 2
    ia = np.searchsorted(qa, mids, side="left")
    ib = np.searchsorted(qb, mids, side="left")
    return float((widths * np.abs(a[ia] - b[ib])).sum())


def channel_wasserstein(real_images: np.ndarray, gen_images: np.ndarray) -> list[float]:
    """Per-channel W1 between total-intensity distributions (the generic form
    of the calorimeter channel-distance metric)."""
    r = np.asarray(real_images, dtype=np.float64)
    g = np.asarray(gen_images, dtype=np.float64)
    if r.ndim == 3:
        r = r[..., None]
    if g.ndim == 3:
        g = g[..., None]
    return [
        wasserstein_1d(r[..., c].reshape(len(r), -1).sum(1), g[..., c].reshape(len(g), -1).sum(1))
        for c in range(r.shape[-1])
    ]


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

_CSV_FIELDS = ("trained_after", "evaluated", "fid", "precision", "recall", "accuracy", "wasserstein", "seed")


@dataclass
class MetricsReport:
    """Per-(trained-after, evaluated) metric rows plus run metadata."""

    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add_row(self, **kw):
        self.rows.append(kw)

    def fid_matrix(self) -> np.ndarray:
        """Lower-triangular (k, k) FID matrix; unevaluated entries are NaN."""
        pairs = [(r["trained_after"], r["evaluated"]) for r in self.rows if r.get("evaluated") is not None]
        if not pairs:
            return np.full((0, 0), np.nan)
        k = max(max(t, s) for t, s in pairs) + 1
        m = np.full((k, k), np.nan)
        for r in self.rows:
            if r.get("evaluated") is not None and r.get("fid") is not None:
                m[r["trained_after"], r["evaluated"]] = r["fid"]
        return m

    def final_mean(self, key: str = "fid") -> float:
        last = max(r["trained_after"] for r in self.rows)
        vals = [r[key] for r in self.rows if r["trained_after"] == last and r.get(key) is not None]
        return float(np.mean(vals))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=_CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                row = dict(r)
                if isinstance(row.get("wasserstein"), (list, tuple)):
                    row["wasserstein"] = "|".join(repr(v) for v in row["wasserstein"])
                w.writerow(row)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump({"metadata": self.metadata, "rows": self.rows}, f, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        with open(path) as f:
            doc = json.load(f)
        return cls(rows=doc["rows"], metadata=doc["metadata"])


def evaluate_after_task(bundle, stream_test, test_ds: Dataset, fnet: FeatureNet, t: int,
                        budget: int = 5000, seed: int = 0, num_clusters: int = 20,
                        num_angles: int = 1001, classifier=None, classes_seen=None,
                        sampler=None) -> list[dict]:
    """Metric rows after training through task t.

    Task-conditioned bundles are scored per task s <= t against that task's
    test reference; unconditioned ones get a single row against the whole test
    split (evaluated = None). Accuracy, when a classifier is given, covers all
    test samples of classes seen so far. `sampler` overrides the generation
    source (used by the GR baseline)."""
    from .alignment import sample_global  # local import to avoid a cycle
    from .torchutil import to_numpy_images

    rng = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "eval", t))
    to_unit = (lambda x: (x + 1) / 2) if bundle.kind == "gan" else (lambda x: x)
    draw = sampler or (lambda n, rng, task=None: sample_global(bundle, n, rng=rng, task=task))
    rows = []
    accuracy = None
    if classifier is not None:
        from .classifier import predict, prepare_images

        fe, head = classifier
        mask = np.isin(test_ds.labels, np.asarray(sorted(classes_seen)))
        xt = prepare_images(bundle, to_image_tensor(test_ds.images[mask]))
        ids, _ = predict(fe, head, xt)
        accuracy = float((ids.numpy() == test_ds.labels[mask]).mean())

    def _score(ref_images, gen_images, s):
        rf = extract_features(fnet, ref_images)
        gf = extract_features(fnet, gen_images)
        prec, rec = precision_recall(rf, gf, num_angles=num_angles, num_clusters=num_clusters,
                                     seed=derive_seed(seed, "prd", t, s if s is not None else -1))
        return {
            "trained_after": t, "evaluated": s, "fid": fid(rf, gf),
            "precision": prec, "recall": rec,
            "wasserstein": channel_wasserstein(ref_images, to_numpy_images(gen_images)),
        }

    if bundle.task_conditioned:
        for s in range(t + 1):
            ref = test_ds.images[stream_test.tasks[s].samples]
            gen = to_unit(draw(budget, rng, task=s))
            row = _score(ref, gen, s)
            row["accuracy"] = accuracy if s == t else None
            rows.append(row)
    else:
        gen = to_unit(draw(budget, rng))
        row = _score(test_ds.images, gen, None)
        row["accuracy"] = accuracy
        rows.append(row)
    return rows
