"""Synthetic paired modalities, the tensor container format, augmentation and batching."""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from scipy.ndimage import gaussian_filter

# ---------------------------------------------------------------------------
# tensor container: little-endian
#   magic "TNSR" | version u16 | count u32
#   per entry: name_len u16 | name | dtype u8 | ndim u8 | ndim x u64 | raw data

MAGIC = b"TNSR"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
CODE_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3, np.dtype(np.int64): 4}


class ContainerError(ValueError):
    def __init__(self, message: str, offset: int, entry: Optional[str] = None):
        where = f" in entry {entry!r}" if entry is not None else ""
        super().__init__(f"{message}{where} at byte offset {offset}")
        self.offset = offset
        self.entry = entry


def encode_container(tensors: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(tensors))
    for name, arr in tensors.items():
        try:
            raw_name = name.encode("ascii")
        except UnicodeEncodeError:
            raise ValueError(f"container entry names must be ASCII: {name!r}") from None
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"container entry name too long: {name[:32]!r}...")
        arr = np.asarray(arr)
        code = CODE_FOR_DTYPE.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise ValueError(f"unsupported container dtype {arr.dtype} for entry {name!r}")
        if arr.ndim > 255:
            raise ValueError(f"too many dimensions for entry {name!r}")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return bytes(out)


def write_container(path, tensors: dict) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("duplicate container entry names")
    Path(path).write_bytes(encode_container(tensors))


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    size = len(buf)

    def need(offset: int, n: int, what: str, entry=None):
        if offset + n > size:
            raise ContainerError(f"truncated {what}: need {n} bytes, {size - offset} left", offset, entry)

    need(0, 10, "header")
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {bytes(buf[:4])!r}", 0)
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}", 4)
    pos = 10
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        label = f"#{i}"
        need(pos, 2, "name length", label)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen, "name", label)
        try:
            name = bytes(buf[pos : pos + nlen]).decode("ascii")
        except UnicodeDecodeError:
            raise ContainerError("non-ASCII entry name", pos, label) from None
        pos += nlen
        if name in out:
            raise ContainerError("duplicate entry name", pos - nlen, name)
        need(pos, 2, "dtype/ndim", name)
        code, ndim = struct.unpack_from("<BB", buf, pos)
        if code not in DTYPE_CODES:
            raise ContainerError(f"unknown dtype code {code}", pos, name)
        pos += 2
        need(pos, 8 * ndim, "extents", name)
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        nbytes = DTYPE_CODES[code].itemsize
        for n in shape:
            nbytes *= n
        if any(n > size for n in shape):
            raise ContainerError(f"implausible extents {shape}", pos - 8 * ndim, name)
        need(pos, nbytes, "data", name)
        arr = np.frombuffer(buf, dtype=DTYPE_CODES[code], count=nbytes // DTYPE_CODES[code].itemsize, offset=pos)
        out[name] = arr.reshape(shape).astype(DTYPE_CODES[code].newbyteorder("="), copy=True)
        pos += nbytes
    if pos != size:
        raise ContainerError(f"{size - pos} trailing bytes after last entry", pos)
    return out


def read_container(path) -> dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    per_class: int = 150
    image_size: int = 16
    latent_dim: int = 8
    separation: float = 3.0
    jitter: float = 1.0
    smoothness: float = 1.5  # gaussian blur sigma of the rendering patterns, pixels
    noise: float = 0.1
    a_scale: float = 1.0  # modality A: tanh(a_scale * raw)
    gain_min: float = 0.1  # modality B: log-uniform per-sample gain
    gain_max: float = 10.0
    speckle_looks: float = 4.0  # modality B: gamma speckle, 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need num_classes >= 2")
        if self.image_size < 8:
            raise ValueError("need image_size >= 8")
        if self.per_class < 4:
            raise ValueError("need per_class >= 4")
        if self.latent_dim < 1 or self.separation < 0 or self.jitter < 0 or self.noise < 0:
            raise ValueError("latent_dim must be >= 1; separation, jitter and noise non-negative")
        if not 0 < self.gain_min <= self.gain_max:
            raise ValueError("need 0 < gain_min <= gain_max")
        if self.speckle_looks < 0:
            raise ValueError("speckle_looks must be >= 0")

    def spec_hash(self) -> str:
        text = ";".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "full"
    modality: str = "A"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"dataset images must be [N,C,H,W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split, self.modality)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def simplex_prototypes(num_classes: int, latent_dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Scaled regular-simplex vertices embedded in the latent space.

    With ``num_classes - 1 > latent_dim`` a regular simplex does not fit; the
    centered vertices are then pushed through a random orthonormal-row map,
    which keeps them distinct but no longer equidistant.
    """
    vert = np.eye(num_classes) - 1.0 / num_classes
    vert /= np.linalg.norm(vert, axis=1, keepdims=True)
    if num_classes - 1 <= latent_dim:
        # orthonormal basis of the simplex plane, then place it into latent coords
        basis, _ = np.linalg.qr(vert.T)
        coords = vert @ basis[:, : num_classes - 1]
        embed = np.linalg.qr(rng.standard_normal((latent_dim, latent_dim)))[0][:, : num_classes - 1]
        protos = coords @ embed.T
    else:
        q, _ = np.linalg.qr(rng.standard_normal((num_classes, num_classes)))
        protos = vert @ q[:, :latent_dim]
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return scale * protos


def _patterns(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    h = spec.image_size
    pats = rng.standard_normal((spec.latent_dim, h, h))
    if spec.smoothness > 0:
        pats = np.stack([gaussian_filter(p, spec.smoothness, mode="wrap") for p in pats])
    pats /= np.sqrt((pats**2).mean(axis=(1, 2), keepdims=True))
    return pats / np.sqrt(spec.latent_dim)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Paired modality-A / modality-B datasets sharing latents and labels.

    A = tanh(a_scale * raw) + noise; B = signed sqrt(gain * raw * speckle) + noise,
    with ``raw`` the fixed smooth linear rendering of latent = prototype + jitter.
    """
    rng = np.random.default_rng(spec.seed)
    protos = simplex_prototypes(spec.num_classes, spec.latent_dim, spec.separation, rng)
    pats = _patterns(spec, rng)
    n = spec.num_classes * spec.per_class
    labels = rng.permutation(np.repeat(np.arange(spec.num_classes), spec.per_class))
    latents = protos[labels] + spec.jitter * rng.standard_normal((n, spec.latent_dim))
    raw = np.einsum("nl,lhw->nhw", latents, pats)

    img_a = np.tanh(spec.a_scale * raw) + spec.noise * rng.standard_normal(raw.shape)

    gain = np.exp(rng.uniform(np.log(spec.gain_min), np.log(spec.gain_max), size=(n, 1, 1)))
    amp = gain * raw
    if spec.speckle_looks > 0:
        amp = amp * rng.gamma(spec.speckle_looks, 1.0 / spec.speckle_looks, size=raw.shape)
    img_b = np.sign(amp) * np.sqrt(np.abs(amp)) + spec.noise * rng.standard_normal(raw.shape)

    a = Dataset(img_a[:, None].astype(np.float32), labels, spec.num_classes, "full", "A")
    b = Dataset(img_b[:, None].astype(np.float32), labels.copy(), spec.num_classes, "full", "B")
    return a, b


def stratified_split(
    n_labels: np.ndarray, seed: int, fractions=(0.70, 0.15, 0.15)
) -> dict[str, np.ndarray]:
    """Per-class index split into train/val/test."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(n_labels)
    parts = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(fractions[0] * idx.size))
        n_val = int(round(fractions[1] * idx.size))
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train : n_train + n_val])
        parts["test"].append(idx[n_train + n_val :])
    return {k: np.sort(np.concatenate(v)) for k, v in parts.items()}


def split_pair(a: Dataset, b: Dataset, seed: int) -> dict[str, tuple[Dataset, Dataset]]:
    if not np.array_equal(a.labels, b.labels):
        raise ValueError("paired datasets must carry identical label sequences")
    idx = stratified_split(a.labels, seed)
    return {s: (a.subset(i, s), b.subset(i, s)) for s, i in idx.items()}


def save_dataset(ds: Dataset, directory, spec_hash: str = "external") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_container(directory / "images.tnsr", {"images": ds.images})
    write_container(directory / "labels.tnsr", {"labels": ds.labels.astype(np.int64)})
    manifest = (
        f"num_classes = {ds.num_classes}\nmodality = {ds.modality}\nsplit = {ds.split}\n"
        f"count = {len(ds)}\nshape = {'x'.join(map(str, ds.images.shape[1:]))}\nspec_hash = {spec_hash}\n"
    )
    (directory / "manifest.txt").write_text(manifest, encoding="utf-8")
    return directory


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_dataset(directory) -> Dataset:
    """Load any directory holding images.tnsr, labels.tnsr and manifest.txt."""
    directory = Path(directory)
    meta = read_manifest(directory / "manifest.txt")
    images = read_container(directory / "images.tnsr")["images"]
    labels = read_container(directory / "labels.tnsr")["labels"]
    if images.dtype not in (np.float32, np.float64):
        images = images.astype(np.float32)
    return Dataset(images, labels, int(meta["num_classes"]), meta.get("split", "full"), meta.get("modality", "A"))


# ---------------------------------------------------------------------------
# augmentation

_POLICY_RE = re.compile(r"^(rotate90|horizontal-flip|translate|gaussian-noise)(?:\(([-+0-9.eE]+)\))?$")


def parse_policy(policy) -> list[tuple[str, float]]:
    if isinstance(policy, str):
        policy = [p for p in policy.replace(";", ",").split(",") if p.strip()] if policy.strip() else []
    out = []
    for item in policy:
        m = _POLICY_RE.match(item.strip())
        if not m:
            raise ValueError(f"unknown augmentation {item!r}")
        kind, arg = m.group(1), m.group(2)
        default = {"translate": 2.0, "gaussian-noise": 0.1}.get(kind, 0.0)
        out.append((kind, float(arg) if arg is not None else default))
    return out


def rotate90(img: np.ndarray, k: int = 1) -> np.ndarray:
    return np.rot90(img, k, axes=(-2, -1)).copy()


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content right by dx and down by dy; vacated pixels are zero."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = img[..., src_y, src_x]
    return out


def augment(image: np.ndarray, policy, seed) -> np.ndarray:
    """Random label-preserving transform of one [C,H,W] image."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _apply_policy(image, parse_policy(policy), rng)


def _apply_policy(image: np.ndarray, parsed: list, rng: np.random.Generator) -> np.ndarray:
    out = np.array(image, copy=True)
    for kind, arg in parsed:
        if kind == "rotate90":
            out = rotate90(out, int(rng.integers(4)))
        elif kind == "horizontal-flip":
            if rng.random() < 0.5:
                out = hflip(out)
        elif kind == "translate":
            r = int(arg)
            out = translate(out, int(rng.integers(-r, r + 1)), int(rng.integers(-r, r + 1)))
        else:
            out = out + (arg * rng.standard_normal(out.shape)).astype(out.dtype)
    return out


@dataclass
class MultiviewedBatch:
    images: np.ndarray  # [2B, C, H, W]
    labels: np.ndarray  # [2B]
    origin: np.ndarray  # [2B] index into the original batch


def make_multiviewed_batch(images: np.ndarray, labels, policy, seed) -> MultiviewedBatch:
    """Two independent augmentations per sample; views 2i and 2i+1 come from sample i."""
    labels = np.asarray(labels, dtype=np.int64)
    b = len(labels)
    if b < 2:
        raise ValueError("multiviewed batch needs at least 2 samples")
    counts = np.bincount(labels)
    if np.any(counts == 1):
        lonely = int(np.flatnonzero(counts == 1)[0])
        raise ValueError(
            f"class {lonely} has a single sample in the batch; use class-complete batch sampling"
        )
    parsed = parse_policy(policy)
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(2 * b)
    views = np.empty((2 * b,) + images.shape[1:], dtype=images.dtype)
    for i in range(2 * b):
        views[i] = _apply_policy(images[i // 2], parsed, np.random.default_rng(children[i]))
    origin = np.repeat(np.arange(b), 2)
    return MultiviewedBatch(views, labels[origin], origin)


# ---------------------------------------------------------------------------
# few-shot budgets and batch streams


@dataclass(frozen=True)
class FewShotBudget:
    n: Optional[int] = None  # None means the full dataset
    balanced: bool = True

    @classmethod
    def parse(cls, text: Union[str, int, None], balanced: bool = True) -> "FewShotBudget":
        if text is None or str(text).strip().lower() == "full":
            return cls(None, balanced)
        n = int(text)
        if n < 1:
            raise ValueError("few-shot budget must be positive or 'full'")
        return cls(n, balanced)

    def __str__(self) -> str:
        return "full" if self.n is None else str(self.n)


def subsample_labeled(dataset: Dataset, budget: FewShotBudget, seed) -> tuple[Dataset, Dataset]:
    """Split into (labeled subset, unlabeled pool).

    The pool keeps its labels for evaluation only; training code reads images.
    """
    n_total = len(dataset)
    if budget.n is None:
        return dataset, dataset.subset(np.arange(0))
    n = budget.n
    if n > n_total:
        raise ValueError(f"budget {n} exceeds dataset size {n_total}")
    rng = np.random.default_rng(seed)
    k = dataset.num_classes
    if budget.balanced:
        if n < k:
            raise ValueError(f"budget {n} cannot cover {k} classes with balancing")
        by_class = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(k)]
        avail = np.array([len(ix) for ix in by_class])
        quota = np.full(k, n // k)
        quota[rng.permutation(k)[: n % k]] += 1
        short = quota > avail
        if short.any():
            raise ValueError(f"classes {np.flatnonzero(short).tolist()} have too few samples for budget {n}")
        chosen = np.concatenate([ix[:q] for ix, q in zip(by_class, quota)])
    else:
        chosen = rng.choice(n_total, n, replace=False)
    chosen = np.sort(chosen)
    rest = np.setdiff1d(np.arange(n_total), chosen)
    return dataset.subset(chosen), dataset.subset(rest)


class BatchStream:
    """Endless fixed-size batches drawn from reshuffled epochs of ``n`` indices."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot batch an empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._buf = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self._buf.size < self.batch_size:
            self._buf = np.concatenate([self._buf, self.rng.permutation(self.n)])
        out, self._buf = self._buf[: self.batch_size], self._buf[self.batch_size :]
        return out


def class_complete_batches(labels, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of batches in which every present class has >= 2 samples.

    Each class is cut into groups of two (three for an odd remainder); groups
    are shuffled and packed whole into batches of at most ``batch_size``.
    """
    labels = np.asarray(labels)
    groups = []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if idx.size < 2:
            continue
        cut = [idx[i : i + 2] for i in range(0, idx.size - idx.size % 2, 2)]
        if idx.size % 2:
            cut[-1] = np.append(cut[-1], idx[-1])
        groups.extend(cut)
    order = rng.permutation(len(groups))
    batch: list = []
    fill = 0
    for gi in order:
        g = groups[gi]
        if fill + g.size > batch_size and batch:
            yield np.concatenate(batch)
            batch, fill = [], 0
        batch.append(g)
        fill += g.size
    if batch:
        yield np.concatenate(batch)
