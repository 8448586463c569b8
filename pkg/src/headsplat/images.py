"""Image file I/O (binary PPM) and a deterministic synthetic portrait."""
from __future__ import annotations

import numpy as np

from .seeding import seeded_rng


class ImageFormatError(ValueError):
    pass


def write_ppm(path, image: np.ndarray) -> None:
    """Save an (H, W, 3) float image in [0, 1] as binary P6, maxval 255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3), got {image.shape}")
    data = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Load binary P6 into (H, W, 3) float32 in [0, 1].  Comments allowed."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ImageFormatError("not a binary PPM (P6) file")
    # header is ASCII tokens with optional comment lines
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in fields)
    except ValueError as e:
        raise ImageFormatError(f"bad PPM header fields {fields}") from e
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}")
    need = w * h * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ImageFormatError(
            f"pixel payload has {len(body)} bytes, expected {need}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0)


def synthetic_portrait(seed: int = 0, height: int = 256, width: int = 256
                       ) -> np.ndarray:
    """Head-and-shoulders test image: black ground, oval head, torso band.

    Deterministic in the seed; float32 (H, W, 3) in [0, 1].
    """
    rng = seeded_rng(seed, 7001)
    ys, xs = np.mgrid[0:height, 0:width]
    u = (xs + 0.5) / width
    v = (ys + 0.5) / height

    img = np.zeros((height, width, 3), dtype=np.float64)

    # head oval in the upper-middle of the frame
    du = (u - 0.5) / 0.27
    dv = (v - 0.40) / 0.33
    head = du * du + dv * dv <= 1.0
    base = np.array([0.78, 0.62, 0.52]) + rng.uniform(-0.05, 0.05, 3)
    wob = 0.08 * np.sin(6.0 * u + rng.uniform(0, 2 * np.pi)) \
        * np.cos(5.0 * v + rng.uniform(0, 2 * np.pi))
    for c in range(3):
        img[:, :, c] = np.where(head, np.clip(base[c] + wob, 0.0, 1.0), 0.0)

    # torso: trapezoid widening toward the bottom edge
    torso_top = 0.68
    half_w = 0.18 + 0.5 * np.clip(v - torso_top, 0.0, None)
    torso = (v >= torso_top) & (np.abs(u - 0.5) <= half_w)
    cloth = np.array([0.20, 0.28, 0.45]) + rng.uniform(-0.05, 0.05, 3)
    shade = 1.0 - 0.25 * np.abs(u - 0.5)
    for c in range(3):
        img[:, :, c] = np.where(torso & ~head,
                                np.clip(cloth[c] * shade, 0.0, 1.0),
                                img[:, :, c])
    return img.astype(np.float32)
