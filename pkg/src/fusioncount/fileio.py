"""On-disk formats: density maps, checkpoints, annotations, images, manifests.

DMAP files are ``b"DMAP"`` + u32 height + u32 width (little-endian) +
height*width float32 values, row-major.  Checkpoints are ``b"IFNW"`` +
u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 rank,
one u32 per dim, float32 values.  Both round-trip bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .errors import CheckpointError, DataError
from .groundtruth import DensityMap, PointAnnotation

DMAP_MAGIC = b"DMAP"
CHECKPOINT_MAGIC = b"IFNW"


# ---------------------------------------------------------------------------
# density maps


def write_dmap(path, dmap: DensityMap):
    values = np.ascontiguousarray(dmap.values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(DMAP_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(values.tobytes())


def read_dmap(path) -> DensityMap:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DMAP_MAGIC:
            raise DataError(f"{path}: bad density-map magic {magic!r}")
        h, w = struct.unpack("<II", f.read(8))
        raw = f.read(4 * h * w)
        if len(raw) != 4 * h * w:
            raise DataError(f"{path}: truncated density map")
        values = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    return DensityMap(values.copy())


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, params: dict[str, Tensor]):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def read_checkpoint(path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            size = int(np.prod(shape)) if rank else 1
            raw = f.read(4 * size)
            if len(raw) != 4 * size:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            data = np.frombuffer(raw, dtype="<f4").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# annotations and images


def write_annotations(path, entries):
    """``entries`` is a list of (image_name, PointAnnotation)."""
    records = [
        {"image": name, "points": [[float(x), float(y)] for x, y in ann.points]}
        for name, ann in entries
    ]
    with open(path, "w") as f:
        json.dump(records, f, indent=1)
        f.write("\n")


def read_annotations(path, image_sizes):
    """Load annotation records; ``image_sizes`` maps image name -> (H, W)."""
    with open(path) as f:
        records = json.load(f)
    out = []
    for rec in records:
        name = rec["image"]
        if name not in image_sizes:
            raise DataError(f"annotation references missing image {name!r}")
        pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2)
        out.append((name, PointAnnotation(pts, image_sizes[name])))
    return out


def write_image(path, image):
    """Save a float [0,1] (or uint8) array as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def read_image(path):
    """Load a PNG as float32 HxWx3 in [0,1]; grayscale is replicated."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def resize_image_and_points(image, ann: PointAnnotation, new_hw):
    """Bilinear-resize an image and rescale its annotation accordingly."""
    h, w = image.shape[:2]
    nh, nw = new_hw
    if (nh, nw) == (h, w):
        return image, ann
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    resized = Image.fromarray(arr).resize((nw, nh), Image.BILINEAR)
    out = np.asarray(resized, dtype=np.float32) / 255.0
    pts = ann.points.copy()
    if pts.size:
        pts[:, 0] = np.clip(pts[:, 0] * (nw / w), 0, nw - 1e-6)
        pts[:, 1] = np.clip(pts[:, 1] * (nh / h), 0, nh - 1e-6)
    return out, PointAnnotation(pts, (nh, nw))


# ---------------------------------------------------------------------------
# run manifests


def content_hash(paths):
    """Stable hex digest over a set of files (sorted name + content)."""
    digest = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        digest.update(p.name.encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()


def write_manifest(path, command, seed, config, inputs_hash, outputs):
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "inputs_hash": inputs_hash,
        "outputs": sorted(str(o) for o in outputs),
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest
