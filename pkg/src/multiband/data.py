"""Dataset loading and continual-learning task-stream construction.

Images are always normalized to [0, 1]; the GAN training boundary rescales
to [-1, 1] internally. Labels are used only for splitting and evaluation.
"""

from __future__ import annotations

import gzip
import json
import os
import pickle
import struct
from dataclasses import dataclass, field

import numpy as np

DATASET_NAMES = (
    "mnist",
    "fashion_mnist",
    "omniglot",
    "cifar10",
    "cifar100",
    "celeba",
    "synthetic",
    "digits",
)

POLICIES = ("class_incremental", "dirichlet", "sequential_datasets", "custom")


class ConfigurationError(ValueError):
    """Invalid name, parameter, or incompatible inputs."""


class DataLoadError(RuntimeError):
    """Missing or corrupt dataset files; message names the offending path."""


class SplitError(RuntimeError):
    """A split policy could not produce a valid task stream."""


@dataclass
class Dataset:
    """Labeled image collection with pixels in [0, 1]."""

    images: np.ndarray  # (N, H, W) or (N, H, W, C), float32 in [0, 1]
    labels: np.ndarray  # (N,), int64, values in [0, num_classes)
    name: str
    split: str  # "train" or "test"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConfigurationError(
                f"images/labels length mismatch: {len(self.images)} vs {len(self.labels)}"
            )

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


@dataclass
class Task:
    """One portion of the stream: sample indices into the source dataset."""

    index: int
    samples: np.ndarray  # indices, int64
    class_histogram: np.ndarray  # counts per class, length num_classes

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int64)
        self.class_histogram = np.asarray(self.class_histogram, dtype=np.int64)

    def __len__(self):
        return len(self.samples)

    @property
    def classes(self) -> np.ndarray:
        return np.nonzero(self.class_histogram)[0]


@dataclass
class TaskStream:
    """Ordered tasks partitioning a dataset's index set."""

    tasks: list[Task]
    policy: str
    seed: int
    alpha: float | None = None
    source: str = ""

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown split policy {self.policy!r}")
        if len(self.tasks) < 1:
            raise ConfigurationError("a task stream needs at least one task")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def to_manifest(self) -> dict:
        """JSON-serializable manifest for exact replay."""
        return {
            "policy": self.policy,
            "seed": self.seed,
            "alpha": self.alpha,
            "source": self.source,
            "tasks": [t.samples.tolist() for t in self.tasks],
        }

    def save_manifest(self, path):
        with open(path, "w") as f:
            json.dump(self.to_manifest(), f)


def stream_from_manifest(manifest: dict, ds: Dataset) -> TaskStream:
    tasks = [
        _make_task(i, np.asarray(idx, dtype=np.int64), ds)
        for i, idx in enumerate(manifest["tasks"])
    ]
    return TaskStream(
        tasks=tasks,
        policy=manifest["policy"],
        seed=int(manifest["seed"]),
        alpha=manifest.get("alpha"),
        source=manifest.get("source", ""),
    )


def load_manifest(path, ds: Dataset) -> TaskStream:
    with open(path) as f:
        return stream_from_manifest(json.load(f), ds)


def task_images(ds: Dataset, task: Task) -> np.ndarray:
    return ds.images[task.samples]


def task_labels(ds: Dataset, task: Task) -> np.ndarray:
    return ds.labels[task.samples]


def _make_task(index: int, samples: np.ndarray, ds: Dataset) -> Task:
    if len(samples) == 0:
        raise SplitError(f"task {index} received no samples")
    hist = np.bincount(ds.labels[samples], minlength=ds.num_classes)
    return Task(index=index, samples=samples, class_histogram=hist)


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def load_dataset(name: str, root=None, split: str = "train", download: bool = False, **kwargs) -> Dataset:
    """Load a named dataset, normalized to [0, 1].

    `root` is the dataset directory for file-backed datasets. `synthetic` and
    `digits` are generated/bundled and need no files. Loading is deterministic
    given the files on disk.
    """
    if name not in DATASET_NAMES:
        raise ConfigurationError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    if name == "synthetic":
        return _synthetic(split=split, **kwargs)
    if name == "digits":
        return _digits(split=split, **kwargs)
    if download:
        # The loaders below read standard on-disk layouts; this build has no
        # general network access, so downloading is not implemented.
        raise ConfigurationError("download is not supported in this environment; provide files under root")
    if root is None:
        raise ConfigurationError(f"dataset {name!r} requires a root directory")
    if name in ("mnist", "fashion_mnist"):
        return _idx_dataset(name, root, split)
    if name == "cifar10":
        return _cifar10(root, split)
    if name == "cifar100":
        return _cifar100(root, split)
    if name == "omniglot":
        return _omniglot(root, split, **kwargs)
    if name == "celeba":
        return _celeba(root, split, **kwargs)
    raise ConfigurationError(f"no loader for {name!r}")


def _find_file(candidates) -> str:
    for c in candidates:
        if os.path.isfile(c):
            return c
    raise DataLoadError(f"dataset file not found; looked for: {', '.join(candidates)}")


def _read_idx(path: str) -> np.ndarray:
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            magic = struct.unpack(">I", f.read(4))[0]
            ndim = magic & 0xFF
            dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
            data = np.frombuffer(f.read(), dtype=np.uint8)
    except (OSError, struct.error) as e:
        raise DataLoadError(f"corrupt IDX file {path}: {e}") from e
    if data.size != int(np.prod(dims)):
        raise DataLoadError(f"corrupt IDX file {path}: size mismatch")
    return data.reshape(dims)


def _idx_dataset(name: str, root, split: str) -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    bases = [os.path.join(root, name), os.path.join(root, name.upper(), "raw"), str(root)]
    img_path = _find_file(
        [os.path.join(b, f"{prefix}-images-idx3-ubyte{ext}") for b in bases for ext in ("", ".gz")]
    )
    lab_path = _find_file(
        [os.path.join(b, f"{prefix}-labels-idx1-ubyte{ext}") for b in bases for ext in ("", ".gz")]
    )
    images = _read_idx(img_path).astype(np.float32) / 255.0
    labels = _read_idx(lab_path).astype(np.int64)
    return Dataset(images=images, labels=labels, name=name, split=split)


def _cifar_pickle(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            return pickle.load(f, encoding="bytes")
    except (OSError, pickle.UnpicklingError) as e:
        raise DataLoadError(f"corrupt CIFAR file {path}: {e}") from e


def _cifar10(root, split: str) -> Dataset:
    base = os.path.join(root, "cifar-10-batches-py")
    if not os.path.isdir(base):
        base = os.path.join(root, "cifar10", "cifar-10-batches-py")
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    images, labels = [], []
    for n in names:
        d = _cifar_pickle(_find_file([os.path.join(base, n)]))
        images.append(np.asarray(d[b"data"], dtype=np.uint8))
        labels.extend(d[b"labels"])
    x = np.concatenate(images).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(images=x.astype(np.float32) / 255.0, labels=np.asarray(labels), name="cifar10", split=split)


def _cifar100(root, split: str) -> Dataset:
    base = os.path.join(root, "cifar-100-python")
    if not os.path.isdir(base):
        base = os.path.join(root, "cifar100", "cifar-100-python")
    d = _cifar_pickle(_find_file([os.path.join(base, split if split == "train" else "test")]))
    x = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(
        images=x.astype(np.float32) / 255.0,
        labels=np.asarray(d[b"fine_labels"]),
        name="cifar100",
        split=split,
    )


def _omniglot(root, split: str, image_size: int = 28) -> Dataset:
    from PIL import Image

    base = os.path.join(root, "omniglot", "images_background")
    if not os.path.isdir(base):
        base = os.path.join(root, "images_background")
    if not os.path.isdir(base):
        raise DataLoadError(f"omniglot directory not found under {root}")
    images, labels = [], []
    class_id = 0
    for alphabet in sorted(os.listdir(base)):
        adir = os.path.join(base, alphabet)
        if not os.path.isdir(adir):
            continue
        for character in sorted(os.listdir(adir)):
            cdir = os.path.join(adir, character)
            files = sorted(os.listdir(cdir))
            # deterministic per-character 80/20 split by filename order
            cut = max(1, int(0.8 * len(files)))
            chosen = files[:cut] if split == "train" else files[cut:]
            for fn in chosen:
                img = Image.open(os.path.join(cdir, fn)).convert("L").resize((image_size, image_size))
                # stroke-on-white originals; invert so ink is bright like MNIST
                images.append(1.0 - np.asarray(img, dtype=np.float32) / 255.0)
                labels.append(class_id)
            class_id += 1
    if not images:
        raise DataLoadError(f"no omniglot images found under {base}")
    return Dataset(images=np.stack(images), labels=np.asarray(labels), name="omniglot", split=split)


_CELEBA_ATTRS = ("Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair", "Bald", "Wearing_Hat")


def _celeba(root, split: str, image_size: int = 64, limit: int = 0) -> Dataset:
    from PIL import Image

    base = os.path.join(root, "celeba")
    if not os.path.isdir(base):
        base = str(root)
    attr_path = _find_file([os.path.join(base, "list_attr_celeba.txt")])
    img_dir = os.path.join(base, "img_align_celeba")
    if not os.path.isdir(img_dir):
        raise DataLoadError(f"celeba image directory not found: {img_dir}")
    with open(attr_path) as f:
        f.readline()
        header = f.readline().split()
        cols = [header.index(a) for a in _CELEBA_ATTRS]
        images, labels = [], []
        for i, line in enumerate(f):
            parts = line.split()
            vals = [int(parts[1 + c]) for c in cols]
            if 1 not in vals:
                continue
            # standard CelebA split boundaries: train < 162771 <= val < 182638 <= test
            in_train = i < 162770
            if (split == "train") != in_train:
                continue
            img = Image.open(os.path.join(img_dir, parts[0])).convert("RGB")
            w, h = img.size
            s = min(w, h)
            img = img.crop(((w - s) // 2, (h - s) // 2, (w + s) // 2, (h + s) // 2))
            images.append(np.asarray(img.resize((image_size, image_size)), dtype=np.float32) / 255.0)
            labels.append(vals.index(1))
            if limit and len(images) >= limit:
                break
    if not images:
        raise DataLoadError(f"no usable celeba images under {img_dir}")
    return Dataset(images=np.stack(images), labels=np.asarray(labels), name="celeba", split=split)


def _synthetic(split: str, n: int = 256, classes: int = 2, shape=(16, 16), seed: int = 0) -> Dataset:
    """Generator-defined fixture: one bright blob per class at a class-specific
    location plus mild noise. Train/test use disjoint sub-seeds."""
    if n < 1 or classes < 1:
        raise ConfigurationError("synthetic dataset needs n >= 1 and classes >= 1")
    rng = np.random.default_rng(seed * 2 + (0 if split == "train" else 1))
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, h, w), dtype=np.float32)
    for i, c in enumerate(labels):
        ang = 2 * np.pi * c / classes
        cy = h / 2 + 0.28 * h * np.sin(ang) + rng.normal(0, 0.03 * h)
        cx = w / 2 + 0.28 * w * np.cos(ang) + rng.normal(0, 0.03 * w)
        blob = np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * (0.12 * h) ** 2)))
        images[i] = blob + rng.normal(0, 0.02, size=shape)
    return Dataset(images=np.clip(images, 0.0, 1.0), labels=labels, name="synthetic", split=split)


def _digits(split: str, n: int = 0, image_size: int = 28, seed: int = 0) -> Dataset:
    """Bundled real handwritten digits (sklearn's 8x8 set) upsampled to
    `image_size` and, when n exceeds the base pool, deterministically expanded
    with small shifts/rotations. A desk-scale stand-in when MNIST files are
    unavailable."""
    from scipy import ndimage
    from sklearn.datasets import load_digits

    base = load_digits()
    x = base.images.astype(np.float32) / 16.0
    y = base.target.astype(np.int64)
    # stratified 80/20 split, deterministic
    rng = np.random.default_rng(1234)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.nonzero(y == c)[0]
        idx = idx[rng.permutation(len(idx))]
        cut = int(0.8 * len(idx))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    chosen = np.asarray(sorted(train_idx if split == "train" else test_idx))
    x, y = x[chosen], y[chosen]
    zoom = image_size / x.shape[1]
    x = np.stack([np.clip(ndimage.zoom(im, zoom, order=1), 0.0, 1.0) for im in x])
    if n and n > len(x):
        x, y = _expand_images(x, y, n, seed=seed + (0 if split == "train" else 7919))
    elif n:
        x, y = x[:n], y[:n]
    return Dataset(images=x, labels=y, name="digits", split=split)


def _expand_images(x: np.ndarray, y: np.ndarray, n: int, seed: int):
    """Grow a pool to n images with affine-jittered copies (rotation <=25 deg,
    scale 0.75..1.25, shift <=3 px). The jitter is deliberately strong so the
    expanded pool has real intra-class diversity instead of near-duplicates."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    h, w = x.shape[1:]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    out_x = [x]
    out_y = [y]
    total = len(x)
    while total < n:
        take = min(len(x), n - total)
        idx = rng.permutation(len(x))[:take]
        batch = []
        for i in idx:
            ang = np.deg2rad(rng.uniform(-25, 25))
            scale = rng.uniform(0.75, 1.25)
            cos, sin = np.cos(ang), np.sin(ang)
            # output -> input map: inverse rotation divided by the zoom
            m = np.array([[cos, -sin], [sin, cos]]) / scale
            offset = center - m @ center + rng.uniform(-3, 3, size=2)
            im = ndimage.affine_transform(x[i], m, offset=offset, order=1, mode="constant")
            batch.append(np.clip(im, 0.0, 1.0).astype(np.float32))
        out_x.append(np.stack(batch))
        out_y.append(y[idx])
        total += take
    return np.concatenate(out_x), np.concatenate(out_y)


def subsample(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Deterministic per-class proportional subsample to ~n images."""
    if n <= 0 or n >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    keep = []
    frac = n / len(ds)
    for c in range(ds.num_classes):
        idx = np.nonzero(ds.labels == c)[0]
        take = max(1, int(round(frac * len(idx))))
        keep.extend(idx[rng.permutation(len(idx))[:take]])
    keep = np.asarray(sorted(keep))
    return Dataset(images=ds.images[keep], labels=ds.labels[keep], name=ds.name, split=ds.split)


# ---------------------------------------------------------------------------
# Split policies
# ---------------------------------------------------------------------------


def split_class_incremental(ds: Dataset, num_tasks: int, seed: int = 0) -> TaskStream:
    """Disjoint contiguous class groups in ascending order (classes {0,1} first).

    The seed permutes only within-task sample order, never the class-to-task
    assignment."""
    c = ds.num_classes
    if num_tasks > c:
        raise ConfigurationError(f"num_tasks={num_tasks} exceeds class count {c}")
    if num_tasks < 1:
        raise ConfigurationError("num_tasks must be >= 1")
    groups = np.array_split(np.arange(c), num_tasks)
    rng = np.random.default_rng(seed)
    tasks = []
    for t, group in enumerate(groups):
        idx = np.nonzero(np.isin(ds.labels, group))[0]
        idx = idx[rng.permutation(len(idx))]
        tasks.append(_make_task(t, idx, ds))
    return TaskStream(tasks=tasks, policy="class_incremental", seed=seed, source=ds.name)


def split_dirichlet(ds: Dataset, num_tasks: int, alpha: float, seed: int = 0) -> TaskStream:
    """Distribute each class over tasks by a draw from Dir(alpha/k, ..., alpha/k).

    Small alpha concentrates a class in one or two tasks; large alpha splits
    classes near-equally. If a draw leaves some task empty the whole split is
    redrawn with seed+attempt, up to 10 attempts."""
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    if num_tasks < 1:
        raise ConfigurationError("num_tasks must be >= 1")
    k = num_tasks
    conc = np.full(k, alpha / k)
    for attempt in range(10):
        assignment = np.empty(len(ds), dtype=np.int64)
        for c in range(ds.num_classes):
            # per-class sub-seeded stream so train and test splits of the same
            # source draw the same task-proportion vector q for each class
            rng_c = np.random.default_rng([seed + attempt, c])
            idx = np.nonzero(ds.labels == c)[0]
            q = rng_c.dirichlet(conc)
            assignment[idx] = rng_c.choice(k, size=len(idx), p=q)
        counts = np.bincount(assignment, minlength=k)
        if counts.min() > 0:
            tasks = []
            for t in range(k):
                rng_t = np.random.default_rng([seed + attempt, 1_000_000 + t])
                idx = np.nonzero(assignment == t)[0]
                idx = idx[rng_t.permutation(len(idx))]
                tasks.append(_make_task(t, idx, ds))
            return TaskStream(tasks=tasks, policy="dirichlet", seed=seed, alpha=alpha, source=ds.name)
    raise SplitError(f"dirichlet split left an empty task after 10 redraws (alpha={alpha}, k={k})")


def concat_datasets(datasets: list[Dataset]) -> Dataset:
    """Concatenate datasets with class-id ranges offset to be disjoint."""
    if not datasets:
        raise ConfigurationError("need at least one dataset")
    shape = datasets[0].image_shape
    for d in datasets[1:]:
        if d.image_shape != shape:
            raise ConfigurationError(
                f"image shape mismatch: {d.name} has {d.image_shape}, expected {shape}"
            )
    images = np.concatenate([d.images for d in datasets])
    labels, offset = [], 0
    for d in datasets:
        labels.append(d.labels + offset)
        offset += d.num_classes
    name = "->".join(d.name for d in datasets)
    return Dataset(images=images, labels=np.concatenate(labels), name=name, split=datasets[0].split)


def split_sequential(datasets: list[Dataset], tasks_per_dataset: int, seed: int = 0):
    """Concatenation of per-dataset class-incremental streams, in order.

    Returns the merged dataset (labels offset to disjoint ranges) and the
    combined stream over it."""
    merged = concat_datasets(datasets)
    tasks = []
    offset_idx = 0
    offset_cls = 0
    for d in datasets:
        sub = split_class_incremental(d, tasks_per_dataset, seed=seed)
        for t in sub:
            samples = t.samples + offset_idx
            tasks.append(_make_task(len(tasks), samples, merged))
        offset_idx += len(d)
        offset_cls += d.num_classes
    stream = TaskStream(tasks=tasks, policy="sequential_datasets", seed=seed, source=merged.name)
    return merged, stream


def make_toy_stream(ds: Dataset, classes=(1, 0, 2), per_task: int = 1000, extra_shared: int = 500, seed: int = 0) -> TaskStream:
    """Three-task fixture: task 0 = first class, task 1 = second class,
    task 2 = third class plus held-back extras of the first class."""
    a, b, c = classes
    rng = np.random.default_rng(seed)
    idx_a = np.nonzero(ds.labels == a)[0]
    idx_a = idx_a[rng.permutation(len(idx_a))]
    idx_b = np.nonzero(ds.labels == b)[0]
    idx_b = idx_b[rng.permutation(len(idx_b))][:per_task]
    idx_c = np.nonzero(ds.labels == c)[0]
    idx_c = idx_c[rng.permutation(len(idx_c))][:per_task]
    n_a = min(per_task, max(1, len(idx_a) - extra_shared))
    first = idx_a[:n_a]
    held_back = idx_a[n_a : n_a + extra_shared]
    tasks = [
        _make_task(0, first, ds),
        _make_task(1, idx_b, ds),
        _make_task(2, np.concatenate([idx_c, held_back]), ds),
    ]
    return TaskStream(tasks=tasks, policy="custom", seed=seed, source=ds.name)
