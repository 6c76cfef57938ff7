"""Dataset loaders and the synthetic activity-recognition generator."""
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
HAR_CHANNELS = 9
HAR_WINDOW = 100
NORM_EPS = 1e-8


@dataclass
class Dataset:
    """Samples, integer labels and disjoint split indices.

    ``norm`` records the normalization that was applied to ``x`` so it is
    never applied twice.
    """

    x: np.ndarray
    y: np.ndarray
    splits: dict = field(default_factory=dict)
    num_classes: int = 0
    norm: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if not self.num_classes:
            self.num_classes = int(self.y.max()) + 1 if self.y.size else 0
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        seen = set()
        for name, idx in self.splits.items():
            idx = set(np.asarray(idx).tolist())
            if seen & idx:
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= idx

    def split(self, name):
        idx = np.asarray(self.splits[name], dtype=np.int64)
        return self.x[idx], self.y[idx]

    def __len__(self):
        return len(self.y)


# CIFAR-10 --------------------------------------------------------------------

def read_cifar_batch(path):
    """Decode one binary batch: ``(images NHWC float64 in [0,1], labels)``."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        off = raw.size - raw.size % CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {off} "
                          f"(file size {raw.size} is not a multiple of {CIFAR_RECORD})")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
    # stored channel-major (1024 R, 1024 G, 1024 B), row-major inside a plane
    img = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return img.astype(np.float64) / 255.0, labels


def load_cifar10(path, subset=None, test_subset=None, seed=0):
    """Load the binary CIFAR-10 release found in ``path``.

    ``subset``/``test_subset`` keep a seeded random selection of the train
    and test records for desk-scale runs.
    """
    files = [os.path.join(path, f) for f in CIFAR_TRAIN_FILES if os.path.exists(os.path.join(path, f))]
    test = os.path.join(path, CIFAR_TEST_FILE)
    if not files and not os.path.exists(test):
        raise FileNotFoundError(f"no CIFAR-10 batch files in {path}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for f in files:
        x, y = read_cifar_batch(f)
        xs.append(x)
        ys.append(y)
    xtr = np.concatenate(xs) if xs else np.zeros((0, 32, 32, 3))
    ytr = np.concatenate(ys) if ys else np.zeros(0, np.int64)
    if subset is not None and subset < len(ytr):
        keep = np.sort(rng.choice(len(ytr), subset, replace=False))
        xtr, ytr = xtr[keep], ytr[keep]
    if os.path.exists(test):
        xte, yte = read_cifar_batch(test)
    else:
        xte, yte = np.zeros((0, 32, 32, 3)), np.zeros(0, np.int64)
    if test_subset is not None and test_subset < len(yte):
        keep = np.sort(rng.choice(len(yte), test_subset, replace=False))
        xte, yte = xte[keep], yte[keep]
    n = len(ytr)
    return Dataset(np.concatenate([xtr, xte]), np.concatenate([ytr, yte]),
                   {"train": np.arange(n), "test": np.arange(n, n + len(yte))},
                   num_classes=10, norm={"scale": 1 / 255.0})


# activity recognition --------------------------------------------------------

def _read_har_rows(path):
    values, labels, subjects = [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        first = next(reader, None)
        if first is None:
            raise FormatError(f"{path}: empty file")
        header = None
        try:
            [float(c) for c in first]
            rows = [first]
        except ValueError:
            header = [c.strip().lower() for c in first]
            rows = []
        has_subject = header is not None and "subject" in header
        ncols = HAR_CHANNELS + 1 + has_subject
        for rownum, row in enumerate(_chain(rows, reader), start=1 if header is None else 2):
            if not row:
                continue
            if len(row) != ncols:
                raise FormatError(f"{path}: row {rownum} has {len(row)} columns, expected {ncols}")
            parsed = []
            for col, cell in enumerate(row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise FormatError(f"{path}: non-numeric cell {cell!r} at row {rownum}, "
                                      f"column {col + 1}") from None
            values.append(parsed[:HAR_CHANNELS])
            labels.append(int(parsed[HAR_CHANNELS]))
            if has_subject:
                subjects.append(int(parsed[HAR_CHANNELS + 1]))
    return (np.asarray(values, dtype=np.float64).reshape(-1, HAR_CHANNELS),
            np.asarray(labels, dtype=np.int64),
            np.asarray(subjects, dtype=np.int64) if subjects else None)


def _chain(first, rest):
    yield from first
    yield from rest


def load_har_csv(path, window=HAR_WINDOW, stride=None, num_classes=12, val_fraction=0.2, seed=0):
    """Window a sensor CSV into ``(N, 9, window)`` samples.

    Columns are the nine channels, the activity label and optionally a
    ``subject`` column (named in a header row). Windows take the majority
    label (ties go to the smaller label). With subjects the split is
    subject-wise, otherwise window-wise; either way ``val_fraction`` of it
    is held out. Channels are z-normalized with train-split statistics.
    """
    stride = stride or window
    values, labels, subjects = _read_har_rows(path)
    starts = np.arange(0, len(values) - window + 1, stride)
    if starts.size == 0:
        raise FormatError(f"{path}: {len(values)} rows is shorter than one window of {window}")
    x = np.stack([values[s:s + window].T for s in starts])
    y = np.array([np.bincount(labels[s:s + window]).argmax() for s in starts])
    rng = np.random.default_rng(seed)
    if subjects is not None:
        subj = np.array([np.bincount(subjects[s:s + window]).argmax() for s in starts])
        ids = np.unique(subj)
        n_val = max(1, int(round(val_fraction * len(ids)))) if len(ids) > 1 else 0
        val_ids = set(rng.choice(ids, n_val, replace=False).tolist())
        is_val = np.array([s in val_ids for s in subj])
        split_kind = "subject"
    else:
        perm = rng.permutation(len(starts))
        is_val = np.zeros(len(starts), bool)
        is_val[perm[:int(round(val_fraction * len(starts)))]] = True
        split_kind = "window"
    train_idx, val_idx = np.nonzero(~is_val)[0], np.nonzero(is_val)[0]
    ref = x[train_idx] if train_idx.size else x
    mu = ref.mean(axis=(0, 2))
    sd = ref.std(axis=(0, 2))
    x = (x - mu[None, :, None]) / np.maximum(sd, NORM_EPS)[None, :, None]
    return Dataset(x, y, {"train": train_idx, "val": val_idx},
                   num_classes=max(num_classes, int(y.max()) + 1),
                   norm={"mean": mu.tolist(), "std": sd.tolist(), "split": split_kind})


def synth_har(seed=0, n=1200, classes=12, noise=0.5, window=HAR_WINDOW, val_fraction=0.2):
    """Class-conditional multichannel sinusoids standing in for sensor data.

    Class ``c`` drives channel ``j`` with a sinusoid whose frequency,
    amplitude and phase are drawn once per class from the seeded generator
    (frequencies 1-8 cycles per window, amplitudes 0.5-1.5). Each sample adds
    a random time shift of up to a tenth of a period and i.i.d. Gaussian noise
    of standard deviation ``noise``. Labels cycle through the classes, so
    class counts differ by at most one.
    """
    if n < classes:
        raise ValueError(f"need at least one sample per class (n={n}, classes={classes})")
    rng = np.random.default_rng(seed)
    freq = rng.uniform(1.0, 8.0, (classes, HAR_CHANNELS))
    amp = rng.uniform(0.5, 1.5, (classes, HAR_CHANNELS))
    phase = rng.uniform(0.0, 2 * np.pi, (classes, HAR_CHANNELS))
    y = np.arange(n) % classes
    rng.shuffle(y)
    t = np.arange(window) / window
    jitter = rng.uniform(-0.1, 0.1, (n, 1, 1)) * 2 * np.pi if noise > 0 else np.zeros((n, 1, 1))
    arg = 2 * np.pi * freq[y][:, :, None] * t[None, None, :] + phase[y][:, :, None] + jitter
    x = amp[y][:, :, None] * np.sin(arg)
    if noise > 0:
        x = x + rng.normal(0.0, noise, x.shape)
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return Dataset(x, y, {"train": np.sort(perm[n_val:]), "val": np.sort(perm[:n_val])},
                   num_classes=classes, norm={"generator": "synth_har", "seed": seed, "noise": noise})
