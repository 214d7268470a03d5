"""PPM (P6, 8-bit) and PFM (grayscale float32) readers and writers.

PFM files follow the usual convention: rows stored bottom-to-top, scale
header -1.0 for little-endian data. Color images round-trip through 8-bit
quantization; depth images round-trip exactly at float32 precision.
"""

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_pfm", "read_pfm"]


def write_ppm(image, path):
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path):
    """Read a binary P6 file into an (H, W, 3) float array in [0, 1]."""
    with open(path, "rb") as f:
        header = _read_token(f)
        if header != b"P6":
            raise ValueError(f"{path}: not a P6 PPM file (magic {header!r})")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data ({len(raw)} of {w * h * 3} bytes)")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def _read_token(f):
    """Next whitespace-delimited token, skipping # comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ValueError("unexpected end of file in header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def write_pfm(image, path):
    """Write an (H, W) float image as little-endian grayscale PFM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected (H, W) image, got {image.shape}")
    h, w = image.shape
    data = np.flipud(image).astype("<f4")
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(data.tobytes())


def read_pfm(path):
    """Read a grayscale PFM into an (H, W) float32 array."""
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM file (magic {magic!r})")
        w = int(_read_token(f))
        h = int(_read_token(f))
        scale = float(_read_token(f))
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read(w * h * 4)
    if len(raw) != w * h * 4:
        raise ValueError(f"{path}: truncated pixel data ({len(raw)} of {w * h * 4} bytes)")
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.flipud(img).astype(np.float32)
