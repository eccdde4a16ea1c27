"""Procedural depth scenes, augmentation, and the raw/PGM file formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, UsageError

RAW_MAGIC = b"TSTF"


@dataclass
class DepthSample:
    rgb: np.ndarray  # 3 x H x W in [0, 1]
    depth: np.ndarray  # 1 x H x W, meters
    mask: np.ndarray  # 1 x H x W bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ConfigError(f"rgb must be 3 x H x W, got {self.rgb.shape}")
        hw = self.rgb.shape[1:]
        if self.depth.shape != (1,) + hw or self.mask.shape != (1,) + hw:
            raise ConfigError(
                f"shapes disagree: rgb {self.rgb.shape}, depth {self.depth.shape}, mask {self.mask.shape}"
            )

    @property
    def hw(self) -> tuple[int, int]:
        return self.rgb.shape[1:]


# -- synthetic scenes -------------------------------------------------------------
@dataclass
class SceneLayer:
    kind: str  # background | rect | ellipse
    region: np.ndarray  # H x W bool
    depth: np.ndarray  # H x W depth of this surface
    albedo: np.ndarray  # 3 colour


def scene_layers(seed: int, height: int, width: int, max_depth: float) -> list[SceneLayer]:
    """Background plane plus 3-8 rectangles/ellipses, each at its own depth."""
    if height < 32 or width < 32:
        raise ConfigError(f"scene must be at least 32x32, got {height}x{width}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    v, u = yy / (height - 1), xx / (width - 1)

    far = rng.uniform(0.7, 0.98) * max_depth
    near = rng.uniform(0.25, 0.5) * max_depth
    tilt = rng.uniform(-0.1, 0.1) * max_depth
    bg_depth = far + (near - far) * v + tilt * (u - 0.5)
    layers = [
        SceneLayer("background", np.ones((height, width), bool), bg_depth, rng.uniform(0.3, 0.9, 3))
    ]
    for _ in range(int(rng.integers(3, 9))):
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        cy, cx = rng.uniform(0.1, 0.9, 2)
        hh, hw = rng.uniform(0.08, 0.3, 2)
        if kind == "rect":
            region = (np.abs(v - cy) <= hh) & (np.abs(u - cx) <= hw)
        else:
            region = ((v - cy) / hh) ** 2 + ((u - cx) / hw) ** 2 <= 1.0
        base = rng.uniform(0.1, 0.75) * max_depth
        slope = rng.uniform(-0.05, 0.05, 2) * max_depth
        obj_depth = base + slope[0] * (v - cy) + slope[1] * (u - cx)
        layers.append(SceneLayer(kind, region, obj_depth, rng.uniform(0.1, 1.0, 3)))
    return layers


def synth_scene(seed: int, height: int = 64, width: int = 64, max_depth: float = 10.0) -> DepthSample:
    """Deterministic procedural scene; nearer surfaces occlude farther ones."""
    layers = scene_layers(seed, height, width, max_depth)
    depth = np.full((height, width), np.inf)
    albedo = np.zeros((3, height, width))
    for layer in layers:
        closer = layer.region & (layer.depth < depth)
        depth = np.where(closer, layer.depth, depth)
        albedo[:, closer] = layer.albedo[:, None]
    depth = np.clip(depth, 0.05 * max_depth, max_depth)
    shade = 0.35 + 0.65 * (1.0 - depth / max_depth)
    # faint stripes give the network texture to key on
    yy, xx = np.mgrid[0:height, 0:width]
    stripes = 0.05 * np.sin(2 * np.pi * (xx + yy) / 8.0)
    rgb = np.clip(albedo * shade[None] + stripes[None], 0.0, 1.0)
    return DepthSample(
        rgb.astype(np.float32),
        depth[None].astype(np.float32),
        np.ones((1, height, width), bool),
        {"seed": seed, "objects": len(layers) - 1},
    )


def synth_dataset(count: int, seed: int = 0, height: int = 64, width: int = 64, max_depth: float = 10.0) -> list[DepthSample]:
    return [synth_scene(seed * 100_003 + i, height, width, max_depth) for i in range(count)]


# -- augmentation -----------------------------------------------------------------
@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_color: float = 0.5
    p_cutdepth: float = 0.25
    crop: Optional[tuple[int, int]] = None
    color_range: tuple[float, float] = (0.75, 1.25)
    cutdepth_width: tuple[float, float] = (0.25, 0.75)
    max_depth: float = 10.0

    def __post_init__(self):
        for name in ("p_hflip", "p_color", "p_cutdepth"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        return cls(p_hflip=0.0, p_color=0.0, p_cutdepth=0.0, **kw)


def augment(sample: DepthSample, rng: np.random.Generator, cfg: AugmentConfig) -> DepthSample:
    """Crop, flip, colour jitter and vertical CutDepth; geometry is shared by rgb/depth/mask.

    Every call draws the same number of random values so the stream stays aligned
    whatever gets applied.
    """
    h, w = sample.hw
    hc, wc = cfg.crop if cfg.crop is not None else (h, w)
    if hc > h or wc > w:
        raise UsageError(f"crop {hc}x{wc} is larger than sample {h}x{w}")
    top = int(rng.integers(0, h - hc + 1))
    left = int(rng.integers(0, w - wc + 1))
    u_flip, u_color, u_cut = rng.random(3)
    lo, hi = cfg.color_range
    bright, contrast, gamma = rng.uniform(lo, hi, 3)
    channel = rng.uniform(lo, hi, 3)
    frac = rng.uniform(*cfg.cutdepth_width)
    pos = rng.random()

    rgb = sample.rgb[:, top : top + hc, left : left + wc]
    depth = sample.depth[:, top : top + hc, left : left + wc]
    mask = sample.mask[:, top : top + hc, left : left + wc]
    meta = dict(sample.meta)

    if u_flip < cfg.p_hflip:
        rgb, depth, mask = rgb[:, :, ::-1], depth[:, :, ::-1], mask[:, :, ::-1]
        meta["hflip"] = True
    rgb = np.array(rgb)
    if u_color < cfg.p_color:
        mu = rgb.mean()
        jittered = (rgb * bright - mu) * contrast + mu
        jittered = np.clip(jittered, 0.0, 1.0) ** gamma
        rgb = np.clip(jittered * channel[:, None, None], 0.0, 1.0).astype(sample.rgb.dtype)
        meta["color"] = (float(bright), float(contrast), float(gamma))
    if u_cut < cfg.p_cutdepth:
        strip = max(1, int(round(frac * wc)))
        x0 = int(pos * (wc - strip + 1))
        x0 = min(x0, wc - strip)
        norm = np.clip(depth[0, :, x0 : x0 + strip] / cfg.max_depth, 0.0, 1.0)
        rgb[:, :, x0 : x0 + strip] = norm[None].astype(rgb.dtype)
        meta["cutdepth"] = (x0, x0 + strip)
    return DepthSample(rgb, np.array(depth), np.array(mask), meta)


# -- file formats -----------------------------------------------------------------
def write_raw_f32(path, array) -> None:
    """magic 'TSTF', u32 rank, u32 dims, then little-endian f32 row-major payload."""
    arr = np.asarray(getattr(array, "data", array), dtype="<f4")
    header = RAW_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_raw_f32(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header: expected at least 8 bytes, got {len(blob)}")
    if blob[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0 (expected {RAW_MAGIC!r})")
    (rank,) = struct.unpack_from("<I", blob, 4)
    need_header = 8 + 4 * rank
    if len(blob) < need_header:
        raise FormatError(
            f"{path}: truncated header at byte {len(blob)}: expected {need_header} bytes"
        )
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    expected = need_header + 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload length mismatch at byte {need_header}: expected {expected} bytes total, got {len(blob)}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=need_header).reshape(dims).astype(np.float32)


def write_depth_pgm(path, depth) -> None:
    """16-bit binary PGM, millimetres, clipped to [0, 65535]."""
    d = np.asarray(getattr(depth, "data", depth), dtype=np.float64)
    d = np.squeeze(d)
    if d.ndim != 2:
        raise ConfigError(f"depth map must be 2-d after squeezing, got {d.shape}")
    mm = np.clip(np.rint(d * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(mm.tobytes())


def read_depth_pgm(path) -> np.ndarray:
    """Returns depth in meters as float32, H x W."""
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at byte {pos}")
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: bad magic {tokens[0]!r} at byte 0 (expected b'P5')")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    bpp = 2 if maxval > 255 else 1
    expected = pos + w * h * bpp
    if len(blob) < expected:
        raise FormatError(
            f"{path}: truncated payload at byte {len(blob)}: expected {expected} bytes"
        )
    dt = ">u2" if bpp == 2 else "u1"
    mm = np.frombuffer(blob, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return (mm.astype(np.float64) / 1000.0).astype(np.float32)


def write_sample(stem, sample: DepthSample) -> None:
    """``<stem>.rgb.f32`` plus ``<stem>.depth.pgm``; invalid pixels are stored as 0."""
    write_raw_f32(f"{stem}.rgb.f32", sample.rgb)
    write_depth_pgm(f"{stem}.depth.pgm", np.where(sample.mask, sample.depth, 0.0))


def read_sample(stem) -> DepthSample:
    stem = str(stem)
    for suffix in (".rgb.f32", ".depth.pgm"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    rgb = read_raw_f32(f"{stem}.rgb.f32")
    if rgb.ndim == 4 and rgb.shape[0] == 1:
        rgb = rgb[0]
    depth = read_depth_pgm(f"{stem}.depth.pgm")[None]
    return DepthSample(rgb, depth, depth > 0, {"path": stem})


def list_samples(directory) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{directory}: not a directory")
    return sorted(str(p)[: -len(".rgb.f32")] for p in d.glob("*.rgb.f32"))


def parse_synth_spec(spec: str) -> dict:
    """``synth:count=8,seed=1,size=64x64,max_depth=10`` -> keyword dict."""
    body = spec.split(":", 1)[1] if ":" in spec else ""
    out = {"count": 8, "seed": 0, "height": 64, "width": 64, "max_depth": 10.0}
    for part in filter(None, body.split(",")):
        key, _, val = part.partition("=")
        key = key.strip()
        if key == "size":
            h, w = val.lower().split("x")
            out["height"], out["width"] = int(h), int(w)
        elif key in ("count", "seed"):
            out[key] = int(val)
        elif key == "max_depth":
            out[key] = float(val)
        else:
            raise ConfigError(f"unknown synth key {key!r}")
    return out


def load_dataset(source: str) -> list[DepthSample]:
    """A ``synth:...`` spec or a directory of ``*.rgb.f32``/``*.depth.pgm`` pairs."""
    if source.startswith("synth"):
        return synth_dataset(**parse_synth_spec(source))
    return [read_sample(stem) for stem in list_samples(source)]


def batches(samples: Sequence[DepthSample], batch_size: int, order: Sequence[int]) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield (
            np.stack([samples[i].rgb for i in idx]),
            np.stack([samples[i].depth for i in idx]),
            np.stack([samples[i].mask for i in idx]),
        )
