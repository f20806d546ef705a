"""On-disk formats: tensor dumps, checkpoints, CSV tables and PGM/PPM images.

A tensor dump ``name.bin`` holds little-endian float32 values in row-major
order; its sidecar ``name.json`` records ``{"name", "shape", "dtype"}``.
A checkpoint is a directory of dumps plus ``manifest.json`` listing the
tensors and the model configuration.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DUMP_DTYPE = "<f4"


def _dump_paths(path: str | os.PathLike) -> tuple[Path, Path]:
    # tensor names contain dots, so suffixes are appended rather than replaced
    path = Path(path)
    base = path.name
    for ext in (".bin", ".json"):
        if base.endswith(ext):
            base = base[: -len(ext)]
    return path.parent / (base + ".bin"), path.parent / (base + ".json")


def save_tensor(path: str | os.PathLike, array: np.ndarray, name: str | None = None) -> Path:
    bin_path, meta_path = _dump_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    bin_path.write_bytes(np.ascontiguousarray(array, dtype=DUMP_DTYPE).tobytes())
    meta = {"name": name or bin_path.name[:-4], "shape": list(array.shape), "dtype": "float32"}
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return bin_path


def load_tensor(path: str | os.PathLike, dtype=np.float64) -> np.ndarray:
    bin_path, meta_path = _dump_paths(path)
    meta = json.loads(meta_path.read_text())
    if meta.get("dtype") != "float32":
        raise ValueError(f"unsupported dump dtype {meta.get('dtype')!r}")
    flat = np.frombuffer(bin_path.read_bytes(), dtype=DUMP_DTYPE)
    shape = tuple(meta["shape"])
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{bin_path}: {flat.size} values do not fill shape {shape}")
    return flat.reshape(shape).astype(dtype)


def save_checkpoint(directory: str | os.PathLike, params: Mapping[str, np.ndarray], config: Mapping) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for name in names:
        save_tensor(directory / name, params[name], name=name)
    manifest = {"config": dict(config), "tensors": names}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_checkpoint(directory: str | os.PathLike, dtype=np.float64) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {name: load_tensor(directory / name, dtype) for name in manifest["tensors"]}
    return params, manifest["config"]


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def to_pixels(x: np.ndarray) -> np.ndarray:
    """Model space [-1, 1] -> uint8, ``clamp((x + 1) / 2) * 255``."""
    v = np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return np.round(v * 255.0).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray, model_space: bool = True) -> Path:
    """Binary P5 greyscale image from a 2-D array."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    pix = to_pixels(image) if model_space else np.asarray(image, dtype=np.uint8)
    h, w = pix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
    return path


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> Path:
    """Binary P6 colour image from a ``3 x h x w`` array in model space."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM needs a 3 x h x w image, got shape {image.shape}")
    pix = to_pixels(image).transpose(1, 2, 0)
    h, w, _ = pix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pix).tobytes())
    return path


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    body = np.frombuffer(parts[4], dtype=np.uint8)
    if magic == b"P5":
        return body.reshape(h, w)
    if magic == b"P6":
        return body.reshape(h, w, 3)
    raise ValueError(f"unsupported image magic {magic!r}")


def heatmap(feature: np.ndarray) -> np.ndarray:
    """Min-max scale a feature map (channel mean if 3-D) to uint8 for PGM output."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim == 3:
        f = f.mean(axis=0)
    lo, hi = f.min(), f.max()
    scaled = np.zeros_like(f) if hi == lo else (f - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)


def write_json(path: str | os.PathLike, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
