"""Image files and dataset manifests.

Manifests are plain text, one ``relative/path<TAB>class_id`` per line,
resolved against the manifest's own directory. Blank lines and ``#``
comments are skipped.
"""
from pathlib import Path

import numpy as np
from PIL import Image


def read_rgb(path) -> np.ndarray:
    """Load PNG/PGM/PPM/JPEG as a float32 ``(3, H, W)`` array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / np.float32(255)


def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary (P5) 8-bit grayscale."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_rgb(path, rgb: np.ndarray) -> None:
    """Save a ``(3, H, W)`` [0, 1] array; format from the suffix."""
    arr = np.clip(np.round(np.asarray(rgb).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def read_manifest(path) -> list:
    """Return ``[(absolute_path, class_id), ...]``."""
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'relative/path<TAB>class_id'")
        entries.append((root / parts[0], int(parts[1])))
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = []
    for p, cls in entries:
        p = Path(p)
        rel = p.resolve().relative_to(root) if p.is_absolute() else p
        lines.append(f"{rel.as_posix()}\t{int(cls)}")
    path.write_text("\n".join(lines) + "\n")


def split_manifest(entries, test_fraction: float, seed: int):
    """Seeded shuffle split into ``(train, test)``; used for datasets without an official split."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(entries))
    n_test = int(round(len(entries) * test_fraction))
    test = [entries[i] for i in sorted(order[:n_test])]
    train = [entries[i] for i in sorted(order[n_test:])]
    return train, test
