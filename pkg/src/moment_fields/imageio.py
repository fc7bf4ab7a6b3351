"""PPM previews, PFM exact images and CSV tables."""

import csv

import numpy as np


def tone_map_variance(v):
    """``v / (v + median)``: spreads heavy-tailed variance over [0, 1)."""
    v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    m = float(np.median(v))
    if m <= 0:
        peak = v.max()
        return v / peak if peak > 0 else np.zeros_like(v)
    return v / (v + m)


def write_ppm(path, img):
    """8-bit binary PPM (P6); grey images are replicated to RGB.  Values in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W) or (H, W, 3) image")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit P6 files are supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3)


def write_pfm(path, img):
    """32-bit little-endian PFM (scale -1).  Rows are stored bottom to top."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        kind = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        kind = "PF"
    else:
        raise ValueError("PFM needs an (H, W) or (H, W, 3) image")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{kind}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = (int(t) for t in fh.readline().split())
        scale = float(fh.readline())
        data = fh.read()
    if kind not in (b"PF", b"Pf"):
        raise ValueError(f"{path}: not a PFM file")
    ch = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(data, dtype=dtype, count=w * h * ch).reshape(h, w, ch)[::-1]
    img = img.astype(np.float32)
    return img[..., 0] if ch == 1 else img


def format_float(x):
    """Shortest round-trip repr; empty cell for None or NaN."""
    if x is None:
        return ""
    x = float(x)
    if x != x:
        return ""
    return repr(x)


def write_csv(path, header, rows):
    """Header plus rows with a fixed column order, '.' decimals and LF endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([format_float(v) if isinstance(v, float) else v for v in row])


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
