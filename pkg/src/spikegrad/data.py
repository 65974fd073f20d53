"""Frozen Poisson rasters, PBM bitmap targets and a synthetic spike-pattern
classification dataset.

Rasters are ``[T, N]`` float arrays holding 0/1. Bitmaps are ``[height,
width]`` images with 1 = black; as a target the image rows are neurons and
the columns are timesteps, so ``raster = image.T``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, PreconditionError
from .rng import CounterRNG, as_counter_rng

MAX_PBM_SIDE = 16384

def check_binary(raster, what="raster"):
    r = np.asarray(raster)
    if r.size == 0 or r.ndim < 2:
        raise PreconditionError(f"{what} must be a non-empty 2-D array")
    if not np.all((r == 0) | (r == 1)):
        raise FormatError(f"{what} is not binary")
    return r.astype(np.float64)


def poisson_raster(N, T, rate, dt=1.0, seed=0):
    """Frozen ``[T, N]`` raster with i.i.d. ``Ber(rate * dt / 1000)`` cells (rate in Hz, dt in ms)."""
    p = rate * dt / 1000.0
    if not 0 <= p < 1:
        raise PreconditionError(f"rate {rate} Hz is too high for dt = {dt} ms (p = {p})")
    if N <= 0 or T <= 0:
        raise PreconditionError("N and T must be positive")
    rng = seed if isinstance(seed, CounterRNG) else CounterRNG(seed)
    return (rng.child(5).uniform((T, N)) < p).astype(np.float64)


# PBM ----------------------------------------------------------------------

def _tokens(text: bytes):
    return re.sub(rb"#[^\n]*", b" ", text).split()


def read_pbm(path, max_side=MAX_PBM_SIDE):
    """Read a plain (P1) or raw (P4) portable bitmap as a ``[height, width]`` 0/1 array."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P1", b"P4"):
        raise FormatError(f"{path}: not a PBM file (magic {magic!r})")
    if magic == b"P1":
        tok = _tokens(data[2:])
        if len(tok) < 2:
            raise FormatError(f"{path}: truncated header")
        try:
            w, h = int(tok[0]), int(tok[1])
        except ValueError:
            raise FormatError(f"{path}: malformed header") from None
        _check_dims(w, h, max_side, path)
        # pixels may be written without separators
        bits = b"".join(tok[2:])
        if len(bits) != w * h or not set(bits) <= {ord("0"), ord("1")}:
            raise FormatError(f"{path}: expected {w * h} pixels of 0/1")
        return (np.frombuffer(bits, dtype=np.uint8) - ord("0")).reshape(h, w).astype(np.float64)
    m = re.match(rb"P4(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s", data)
    if m is None:
        raise FormatError(f"{path}: malformed header")
    w, h = int(m.group(1)), int(m.group(2))
    _check_dims(w, h, max_side, path)
    row_bytes = (w + 7) // 8
    body = data[m.end():]
    if len(body) < row_bytes * h:
        raise FormatError(f"{path}: truncated pixel data")
    rows = np.frombuffer(body[:row_bytes * h], dtype=np.uint8).reshape(h, row_bytes)
    return np.unpackbits(rows, axis=1)[:, :w].astype(np.float64)


def _check_dims(w, h, max_side, path):
    if not (0 < w <= max_side and 0 < h <= max_side):
        raise FormatError(f"{path}: dimensions {w}x{h} outside 1..{max_side}")


def write_pbm(path, image, binary=False):
    img = check_binary(image, "image").astype(np.uint8)
    h, w = img.shape
    if binary:
        payload = np.packbits(img, axis=1).tobytes()
        Path(path).write_bytes(f"P4\n{w} {h}\n".encode() + payload)
        return
    lines = ["P1", f"{w} {h}"]
    lines += [" ".join(map(str, row)) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")


def load_pbm_target(path, max_side=MAX_PBM_SIDE):
    """Target raster ``[T, N]`` from a bitmap of width T and height N."""
    return read_pbm(path, max_side).T.copy()


def save_pbm_target(path, raster, binary=False):
    write_pbm(path, np.asarray(raster).T, binary)


def thin_raster(raster, min_isi):
    """Drop spikes closer than ``min_isi`` steps to the previous kept spike of the same neuron."""
    r = np.asarray(raster, dtype=np.float64)
    out = np.zeros_like(r)
    for i in range(r.shape[1]):
        last = None
        for t in np.flatnonzero(r[:, i]):
            if last is None or t - last >= min_isi:
                out[t, i] = 1.0
                last = t
    return out


def default_target_image(n_neurons=200, T=198, n_columns=3, plinth_spacing=8, min_isi=4):
    """Line drawing of a dome on columns above a dotted plinth.

    Rows are neurons and columns are timesteps. Each neuron fires a handful of
    isolated spikes (at least ``min_isi`` steps apart), which keeps the target
    within reach of a 500-epoch run.
    """
    i, n = np.mgrid[0:n_neurons, 0:T] / np.array([n_neurons, T])[:, None, None]
    img = np.zeros((n_neurons, T))
    r = np.sqrt((n - 0.5) ** 2 + ((i - 0.45) / 0.9) ** 2)
    img[(np.abs(r - 0.28) < 0.004) & (i < 0.45)] = 1
    for c in np.linspace(0.3, 0.7, n_columns):
        img[int(0.45 * n_neurons):int(0.8 * n_neurons), int(c * T)] = 1
    for row in (0.82, 0.88):
        img[int(row * n_neurons), int(0.12 * T):int(0.88 * T):plinth_spacing] = 1
    return thin_raster(img.T, min_isi).T


def load_default_target():
    """Shipped 200-neuron x 198-step target raster ``[T, N]``."""
    ref = resources.files("spikegrad").joinpath("assets/target.pbm")
    with resources.as_file(ref) as p:
        return load_pbm_target(p)


# synthetic classification --------------------------------------------------

@dataclass(frozen=True)
class SyntheticClassSpec:
    n_classes: int = 4
    n_in: int = 40
    T: int = 50
    jitter: float = 2.0
    n_samples: int = 25
    rate: float = 30.0
    dt: float = 2.0
    deletion: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise PreconditionError("n_classes must be >= 2")
        if not 0 <= self.deletion < 1 or self.jitter < 0:
            raise PreconditionError("deletion must lie in [0, 1) and jitter must be >= 0")


@dataclass
class Dataset:
    x: np.ndarray  # [M, T, n_in]
    y: np.ndarray  # [M]
    spec: SyntheticClassSpec | None = None

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.spec)


def prototypes(spec: SyntheticClassSpec):
    root = CounterRNG(spec.seed)
    return np.stack([poisson_raster(spec.n_in, spec.T, spec.rate, spec.dt, root.child(c))
                     for c in range(spec.n_classes)])


def jitter_sample(proto, jitter, deletion, rng: CounterRNG):
    """Shift each spike by ``round(N(0, jitter))`` steps (clipped to the trial) and delete with prob ``deletion``."""
    T, N = proto.shape
    t, i = np.nonzero(proto)
    shift = np.rint(rng.child(0).normal(t.size) * jitter).astype(int) if jitter > 0 else 0
    keep = rng.child(1).uniform(t.size) >= deletion
    out = np.zeros_like(proto)
    out[np.clip(t + shift, 0, T - 1)[keep], i[keep]] = 1.0
    return out


def synthetic_classes(spec: SyntheticClassSpec) -> Dataset:
    """Jittered, thinned copies of one frozen prototype per class; sample order is
    class-major. A pure function of ``spec``."""
    protos = prototypes(spec)
    root = CounterRNG(spec.seed).child(7)
    xs, ys = [], []
    for c in range(spec.n_classes):
        for k in range(spec.n_samples):
            xs.append(jitter_sample(protos[c], spec.jitter, spec.deletion, root.child(c, k)))
            ys.append(c)
    return Dataset(np.stack(xs), np.array(ys, dtype=np.int64), spec)


def train_val_split(ds: Dataset, val_fraction=0.2, seed=0):
    """Stratified split; the permutation within each class is seeded."""
    rng = as_counter_rng(seed).child(8).generator()
    tr, va = [], []
    for c in np.unique(ds.y):
        idx = np.flatnonzero(ds.y == c)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(val_fraction * idx.size))
        va.extend(idx[:n_val])
        tr.extend(idx[n_val:])
    return ds.subset(np.sort(tr)), ds.subset(np.sort(va))


def dataset_checksum(ds: Dataset):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.x, dtype=np.uint8).tobytes())
    h.update(np.ascontiguousarray(ds.y, dtype=np.int64).tobytes())
    return h.hexdigest()


def manifest(ds: Dataset):
    return json.dumps({"spec": asdict(ds.spec) if ds.spec else None, "checksum": dataset_checksum(ds)},
                      sort_keys=True)
