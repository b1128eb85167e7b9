"""Dataset ingestion, k-classes-out splitting, colorization, and augmentation.

Images travel through the package as float32 arrays of shape (N, C, H, W)
with values in [-1, 1]. Three sources are supported: big-endian IDX pairs,
an image-folder layout (root/<class>/[anomalous/]*.png|jpg), and a procedural
"synthetic" source that renders digit glyphs so the full pipeline can run
without any external download.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, ImageDraw, ImageEnhance, ImageFilter, ImageFont, ImageOps

from .errors import ConfigurationError, IngestionError, InputError, ProtocolError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

# background palette for the colorized digit corpus
DEFAULT_PALETTE = {
    "red": (220, 40, 40),
    "green": (60, 200, 60),
    "blue": (50, 80, 230),
    "cyan": (40, 210, 210),
    "yellow": (230, 220, 50),
    "purple": (150, 50, 200),
    "violet": (210, 120, 230),
    "brown": (140, 90, 40),
    "dark_green": (20, 90, 30),
    "orange": (240, 150, 40),
}


@dataclass
class LabeledImages:
    """A dataset slice: images plus integer class labels and stable sample ids.

    `extra` carries aligned per-sample arrays such as background-color labels
    or anomaly flags.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or len(self.ids) != n:
            raise InputError("images, labels, and ids must have equal length")
        for key, arr in self.extra.items():
            if len(arr) != n:
                raise InputError(f"extra array {key!r} has length {len(arr)} != {n}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(len(np.unique(self.labels)))

    def subset(self, indices: np.ndarray) -> "LabeledImages":
        return LabeledImages(
            images=self.images[indices],
            labels=self.labels[indices],
            ids=self.ids[indices],
            extra={k: v[indices] for k, v in self.extra.items()},
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset comes from and how to shape it."""

    source: str  # "idx_pair" | "image_folder" | "synthetic"
    path: Optional[str] = None
    image_size: int = 32
    channels: int = 1
    class_names: Optional[tuple[str, ...]] = None
    # synthetic source only
    synthetic_count: int = 12000
    synthetic_seed: int = 0

    def __post_init__(self):
        if self.source not in ("idx_pair", "image_folder", "synthetic"):
            raise ConfigurationError(f"unknown dataset source {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ConfigurationError(f"source {self.source!r} requires a path")


@dataclass(frozen=True)
class SplitSpec:
    """k-classes-out split parameters."""

    anomaly_class: Union[int, str]  # class id, or "external" for anomaly-flagged corpora
    train_fraction: float = 0.8
    seed: int = 0
    balance_test: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class SplitResult:
    train: LabeledImages
    test: LabeledImages
    class_mapping: dict[int, int]  # original class id -> dense training label
    spec: SplitSpec


@dataclass(frozen=True)
class AugmentPolicy:
    """Enabled augmentation ops with conservative parameter ranges."""

    sharpen: bool = True
    emboss: bool = True
    equalize: bool = True
    brightness_contrast: bool = True
    hflip: bool = True
    affine: bool = True
    op_probability: float = 0.5
    sharpen_range: tuple[float, float] = (1.1, 1.8)
    brightness_range: tuple[float, float] = (0.85, 1.15)
    contrast_range: tuple[float, float] = (0.85, 1.15)
    max_rotation_deg: float = 15.0
    max_translate_frac: float = 0.10
    scale_range: tuple[float, float] = (0.9, 1.1)

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(sharpen=False, emboss=False, equalize=False,
                   brightness_contrast=False, hflip=False, affine=False)


# ---------------------------------------------------------------------------
# pixel-scale helpers

def to_unit_range(uint8_images: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (uint8_images.astype(np.float32) / 255.0) * 2.0 - 1.0


def to_uint8(images: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8 [0, 255] with clipping."""
    arr = np.clip((images + 1.0) * 0.5, 0.0, 1.0) * 255.0
    return np.round(arr).astype(np.uint8)


def _resize_stack(uint8_chw: np.ndarray, target: int) -> np.ndarray:
    """Bilinear-resize a (N, C, H, W) uint8 stack to (N, C, target, target)."""
    n, c, h, w = uint8_chw.shape
    if h == target and w == target:
        return uint8_chw
    out = np.empty((n, c, target, target), dtype=np.uint8)
    for i in range(n):
        if c == 1:
            img = Image.fromarray(uint8_chw[i, 0], mode="L")
            out[i, 0] = np.asarray(img.resize((target, target), Image.BILINEAR))
        else:
            img = Image.fromarray(np.moveaxis(uint8_chw[i], 0, 2), mode="RGB")
            out[i] = np.moveaxis(np.asarray(img.resize((target, target), Image.BILINEAR)), 2, 0)
    return out


def _convert_channels(uint8_chw: np.ndarray, channels: int) -> np.ndarray:
    c = uint8_chw.shape[1]
    if c == channels:
        return uint8_chw
    if c == 1 and channels == 3:
        return np.repeat(uint8_chw, 3, axis=1)
    if c == 3 and channels == 1:
        lum = (0.299 * uint8_chw[:, 0] + 0.587 * uint8_chw[:, 1] + 0.114 * uint8_chw[:, 2])
        return np.round(lum)[:, None].astype(np.uint8)
    raise IngestionError(f"cannot convert {c}-channel images to {channels} channels")


# ---------------------------------------------------------------------------
# IDX ingestion

def read_idx(path: Union[str, Path]) -> np.ndarray:
    """Parse a big-endian IDX file into a numpy array (uint8 payload)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    if len(raw) < 4:
        raise IngestionError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    ndim = magic & 0xFF
    if magic >> 8 != 0x000008 or ndim < 1 or ndim > 3:
        raise IngestionError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IngestionError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    if payload.size != count:
        raise IngestionError(f"{path}: payload has {payload.size} bytes, header promises {count}")
    return payload.reshape(dims)


def _idx_magic(path: Path) -> Optional[int]:
    try:
        with open(path, "rb") as f:
            head = f.read(4)
    except OSError:
        return None
    if len(head) < 4:
        return None
    return struct.unpack(">I", head)[0]


def _load_idx_pair(spec: DatasetSpec) -> LabeledImages:
    root = Path(spec.path)
    if not root.exists():
        raise IngestionError(f"dataset path {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.is_file()) if root.is_dir() else [root]
    image_files = [p for p in files if _idx_magic(p) == IDX_IMAGES_MAGIC]
    label_files = [p for p in files if _idx_magic(p) == IDX_LABELS_MAGIC]
    if not image_files or not label_files:
        raise IngestionError(f"{root}: need at least one IDX image file (magic 0x{IDX_IMAGES_MAGIC:08x}) and one label file (magic 0x{IDX_LABELS_MAGIC:08x})")
    if len(image_files) != len(label_files):
        raise IngestionError(f"{root}: {len(image_files)} image files but {len(label_files)} label files")

    all_images, all_labels, all_ids = [], [], []
    for img_path, lbl_path in zip(image_files, label_files):
        images = read_idx(img_path)
        labels = read_idx(lbl_path)
        if images.ndim != 3:
            raise IngestionError(f"{img_path}: expected 3-d image tensor, got shape {images.shape}")
        if labels.ndim != 1 or len(labels) != len(images):
            raise IngestionError(f"{lbl_path}: label count {labels.shape} does not match {len(images)} images")
        all_images.append(images[:, None])  # add channel axis
        all_labels.append(labels.astype(np.int64))
        all_ids.extend(f"{img_path.stem}/{i}" for i in range(len(images)))

    stack = np.concatenate(all_images)
    stack = _convert_channels(stack, spec.channels)
    stack = _resize_stack(stack, spec.image_size)
    return LabeledImages(
        images=to_unit_range(stack),
        labels=np.concatenate(all_labels),
        ids=np.asarray(all_ids),
    )


# ---------------------------------------------------------------------------
# image-folder ingestion

def _load_image_file(path: Path, channels: int, target: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            img = img.resize((target, target), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.uint8)
    except Exception as e:  # PIL raises a zoo of types for malformed files
        raise IngestionError(f"cannot decode {path}: {e}") from e
    if channels == 1:
        return arr[None]
    return np.moveaxis(arr, 2, 0)


def _load_image_folder(spec: DatasetSpec) -> LabeledImages:
    root = Path(spec.path)
    if not root.is_dir():
        raise IngestionError(f"dataset path {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise IngestionError(f"{root}: need at least two class directories, found {len(class_dirs)}")

    images, labels, ids, anomalous = [], [], [], []
    for label, cdir in enumerate(class_dirs):
        normal_files = sorted(p for p in cdir.iterdir()
                              if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        anomaly_dir = cdir / "anomalous"
        anomaly_files = sorted(p for p in anomaly_dir.iterdir()
                               if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS) if anomaly_dir.is_dir() else []
        for path, flag in [(p, 0) for p in normal_files] + [(p, 1) for p in anomaly_files]:
            images.append(_load_image_file(path, spec.channels, spec.image_size))
            labels.append(label)
            ids.append(str(path.relative_to(root)))
            anomalous.append(flag)
    if not images:
        raise IngestionError(f"{root}: no images found")
    return LabeledImages(
        images=to_unit_range(np.stack(images)),
        labels=np.asarray(labels, dtype=np.int64),
        ids=np.asarray(ids),
        extra={"anomalous_flag": np.asarray(anomalous, dtype=np.int64)},
    )


# ---------------------------------------------------------------------------
# synthetic digit rendering

def _font_paths() -> list[str]:
    import matplotlib

    ttf = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    names = ["DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf",
             "DejaVuSerif-Bold.ttf", "DejaVuSansMono.ttf", "DejaVuSansMono-Bold.ttf"]
    found = [str(ttf / n) for n in names if (ttf / n).exists()]
    if not found:
        raise IngestionError("no TTF fonts available for the synthetic digit source")
    return found


def make_synthetic_digits(count: int, image_size: int, seed: int) -> LabeledImages:
    """Render a balanced 10-class corpus of digit glyphs, bright-on-dark.

    Glyphs vary in font, size, position, and rotation, with mild pixel noise,
    giving enough intra-class variability for the training pipeline to be
    exercised end to end without external data.
    """
    rng = np.random.default_rng(seed)
    fonts = _font_paths()
    canvas = 64  # render large, then downscale for soft edges
    font_cache = {}
    images = np.empty((count, 1, image_size, image_size), dtype=np.uint8)
    labels = rng.integers(0, 10, size=count, dtype=np.int64)
    for i in range(count):
        digit = int(labels[i])
        font_path = fonts[rng.integers(len(fonts))]
        size = int(rng.integers(34, 54))
        key = (font_path, size)
        if key not in font_cache:
            font_cache[key] = ImageFont.truetype(font_path, size)
        font = font_cache[key]
        img = Image.new("L", (canvas, canvas), 0)
        draw = ImageDraw.Draw(img)
        left, top, right, bottom = draw.textbbox((0, 0), str(digit), font=font)
        gw, gh = right - left, bottom - top
        max_dx = max(canvas - gw - 8, 1)
        max_dy = max(canvas - gh - 8, 1)
        x = 4 + int(rng.integers(max_dx))
        y = 4 + int(rng.integers(max_dy))
        draw.text((x - left, y - top), str(digit), fill=255, font=font)
        angle = float(rng.uniform(-12.0, 12.0))
        img = img.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
        img = img.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
        arr += rng.normal(0.0, 6.0, size=arr.shape)
        images[i, 0] = np.clip(arr, 0, 255).astype(np.uint8)
    return LabeledImages(
        images=to_unit_range(images),
        labels=labels,
        ids=np.asarray([f"synthetic/{i}" for i in range(count)]),
    )


def load_dataset(spec: DatasetSpec) -> LabeledImages:
    """Ingest, resize to the target size, and scale pixels to [-1, 1]."""
    if spec.source == "idx_pair":
        data = _load_idx_pair(spec)
    elif spec.source == "image_folder":
        data = _load_image_folder(spec)
    else:
        data = make_synthetic_digits(spec.synthetic_count, spec.image_size, spec.synthetic_seed)
        if spec.channels == 3:
            data = LabeledImages(np.repeat(data.images, 3, axis=1), data.labels, data.ids, data.extra)
    if data.num_classes < 2:
        raise IngestionError("dataset must contain at least two classes")
    return data


# ---------------------------------------------------------------------------
# k-classes-out split

def k_classes_out_split(data: LabeledImages, split: SplitSpec) -> SplitResult:
    """Hold one class (or the externally flagged samples) out as the anomaly.

    Training keeps train_fraction of the normal data with labels remapped to a
    dense 0..N-1 range; the test set combines the remaining normal samples with
    the anomalous pool, optionally balanced by subsampling the larger side.
    """
    rng = np.random.default_rng(split.seed)
    if split.anomaly_class == "external":
        flags = data.extra.get("anomalous_flag")
        if flags is None:
            raise ProtocolError('anomaly_class="external" needs an anomalous_flag column (image-folder layout with anomalous/ subdirectories)')
        anomaly_mask = flags.astype(bool)
    else:
        if split.anomaly_class not in data.labels:
            raise ProtocolError(f"anomaly class {split.anomaly_class} not present in the data")
        anomaly_mask = data.labels == split.anomaly_class

    normal_idx = np.flatnonzero(~anomaly_mask)
    anomaly_idx = np.flatnonzero(anomaly_mask)
    if len(anomaly_idx) == 0:
        raise ProtocolError("no anomalous samples in the data")

    order = rng.permutation(len(normal_idx))
    n_train = int(len(normal_idx) * split.train_fraction)
    train_idx = normal_idx[order[:n_train]]
    normal_test_idx = normal_idx[order[n_train:]]

    if split.balance_test:
        n_norm, n_anom = len(normal_test_idx), len(anomaly_idx)
        if n_anom < n_norm:
            warnings.warn(
                f"anomalous pool ({n_anom}) smaller than the normal test pool ({n_norm}); "
                "downsampling the normal side to balance"
            )
            normal_test_idx = normal_test_idx[rng.permutation(n_norm)[:n_anom]]
        elif n_norm < n_anom:
            anomaly_idx = anomaly_idx[rng.permutation(n_anom)[:n_norm]]

    normal_classes = sorted(int(c) for c in np.unique(data.labels[train_idx]))
    mapping = {orig: dense for dense, orig in enumerate(normal_classes)}

    train = data.subset(train_idx)
    train = LabeledImages(
        images=train.images,
        labels=np.asarray([mapping[int(c)] for c in train.labels], dtype=np.int64),
        ids=train.ids,
        extra=dict(train.extra),
    )

    test_idx = np.concatenate([normal_test_idx, anomaly_idx])
    test = data.subset(test_idx)
    anomaly_flags = np.concatenate([
        np.zeros(len(normal_test_idx), dtype=np.int64),
        np.ones(len(anomaly_idx), dtype=np.int64),
    ])
    test = LabeledImages(
        images=test.images,
        labels=test.labels,
        ids=test.ids,
        extra={**test.extra, "anomaly": anomaly_flags, "orig_class": test.labels.copy()},
    )

    # one-class guarantee: audit that nothing anomalous leaked into training
    if split.anomaly_class == "external":
        assert not data.extra["anomalous_flag"][train_idx].any()
    else:
        assert not (data.labels[train_idx] == split.anomaly_class).any()

    return SplitResult(train=train, test=test, class_mapping=mapping, spec=split)


def write_split_manifest(result: SplitResult, path: Union[str, Path]) -> None:
    """Record the exact sample ids of each partition for reproducibility."""
    doc = {
        "anomaly_class": result.spec.anomaly_class,
        "train_fraction": result.spec.train_fraction,
        "seed": result.spec.seed,
        "balance_test": result.spec.balance_test,
        "class_mapping": {str(k): v for k, v in result.class_mapping.items()},
        "train_ids": [str(i) for i in result.train.ids],
        "test_ids": [str(i) for i in result.test.ids],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# colorized digits

def make_color_mnist(
    data: LabeledImages,
    palette: Optional[dict[str, tuple[int, int, int]]] = None,
    seed: int = 0,
) -> LabeledImages:
    """Paint thresholded grayscale digits black on uniformly colored backgrounds.

    Pixels above mid-intensity count as strokes and stay dark; everything else
    takes a background color drawn uniformly from the palette. Returns RGB
    images with the digit labels preserved and color labels in extra["color"].
    """
    if data.images.shape[1] != 1:
        raise InputError("colorization expects single-channel images")
    palette = dict(palette or DEFAULT_PALETTE)
    rng = np.random.default_rng(seed)
    colors = np.asarray(list(palette.values()), dtype=np.float32)  # (K, 3)
    colors = colors / 255.0 * 2.0 - 1.0
    color_labels = rng.integers(0, len(colors), size=len(data), dtype=np.int64)

    stroke = data.images[:, 0] > 0.0  # (N, H, W), mid-intensity threshold
    out = np.empty((len(data), 3) + stroke.shape[1:], dtype=np.float32)
    for ch in range(3):
        background = colors[color_labels, ch][:, None, None]
        out[:, ch] = np.where(stroke, -1.0, background)
    return LabeledImages(
        images=out,
        labels=data.labels.copy(),
        ids=data.ids.copy(),
        extra={**{k: v.copy() for k, v in data.extra.items()}, "color": color_labels},
    )


# ---------------------------------------------------------------------------
# augmentation

def _to_pil(image_chw: np.ndarray) -> Image.Image:
    arr = to_uint8(image_chw)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    return Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB")


def _from_pil(img: Image.Image, channels: int) -> np.ndarray:
    arr = np.asarray(img, dtype=np.uint8)
    if channels == 1:
        if arr.ndim == 3:
            arr = arr[..., 0]
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, 2, 0)
    return to_unit_range(arr)


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply one randomized composition of the enabled ops to a (C, H, W) image."""
    channels = image.shape[0]
    img = _to_pil(image)

    if policy.sharpen and rng.random() < policy.op_probability:
        img = ImageEnhance.Sharpness(img).enhance(float(rng.uniform(*policy.sharpen_range)))
    if policy.emboss and rng.random() < policy.op_probability:
        img = img.filter(ImageFilter.EMBOSS)
    if policy.equalize and rng.random() < policy.op_probability:
        img = ImageOps.equalize(img)
    if policy.brightness_contrast and rng.random() < policy.op_probability:
        img = ImageEnhance.Brightness(img).enhance(float(rng.uniform(*policy.brightness_range)))
        img = ImageEnhance.Contrast(img).enhance(float(rng.uniform(*policy.contrast_range)))
    if policy.hflip and rng.random() < policy.op_probability:
        img = img.transpose(Image.FLIP_LEFT_RIGHT)
    if policy.affine and rng.random() < policy.op_probability:
        angle = float(rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg))
        w, h = img.size
        tx = float(rng.uniform(-policy.max_translate_frac, policy.max_translate_frac)) * w
        ty = float(rng.uniform(-policy.max_translate_frac, policy.max_translate_frac)) * h
        scale = float(rng.uniform(*policy.scale_range))
        img = img.rotate(angle, resample=Image.BILINEAR, translate=(tx, ty),
                         center=(w / 2, h / 2), fillcolor=0)
        if scale != 1.0:
            new = img.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.BILINEAR)
            img = ImageOps.fit(new, (w, h)) if scale > 1.0 else ImageOps.pad(new, (w, h))

    return _from_pil(img, channels)


def augment_dataset(
    data: LabeledImages,
    policy: AugmentPolicy,
    seed: int,
    multiplier: int = 5,
) -> LabeledImages:
    """Enlarge a corpus to `multiplier` times its size with randomized copies."""
    if multiplier < 1:
        raise ConfigurationError(f"multiplier must be >= 1, got {multiplier}")
    rng = np.random.default_rng(seed)
    stacks = [data.images]
    labels = [data.labels]
    ids = [data.ids]
    extras = {k: [v] for k, v in data.extra.items()}
    for rep in range(1, multiplier):
        aug = np.stack([augment(img, policy, rng) for img in data.images])
        stacks.append(aug)
        labels.append(data.labels)
        ids.append(np.asarray([f"{i}#aug{rep}" for i in data.ids]))
        for k, v in data.extra.items():
            extras[k].append(v)
    return LabeledImages(
        images=np.concatenate(stacks),
        labels=np.concatenate(labels),
        ids=np.concatenate(ids),
        extra={k: np.concatenate(v) for k, v in extras.items()},
    )


# ---------------------------------------------------------------------------
# batching

def batch_indices(
    n: int,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    drop_last: bool = True,
) -> list[np.ndarray]:
    """Seeded per-epoch shuffle split into batches.

    Training streams drop the final short batch, which keeps every batch large
    enough for the residual shuffle; evaluation passes drop_last=False.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng((seed, epoch)).permutation(n)
    if drop_last:
        order = order[: (n // batch_size) * batch_size]
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
