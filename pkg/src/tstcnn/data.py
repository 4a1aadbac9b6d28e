"""Synthetic fine-grained action corpus with analytically exact optical flow.

Every clip shows the same static textured background and the same two-blob
actor (a body and a smaller satellite); classes differ only in the motion
program (rotation direction, tempo, satellite orbit direction, or irregular
"no stroke" wobble for the rejection class 0). Motion programs are smooth in
time and the flow channels carry the exact inter-frame displacement of the
moving content in pixels/frame, so a bilinear warp of frame t by flow t
reproduces frame t+1 up to interpolation error.

All randomness is drawn from seeds; generation is a pure function of
(spec, seed) and clips regenerate bit-exactly from the dataset manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import ConfigError
from .tensor import read_tensor, write_tensor

__all__ = [
    "SceneSpec",
    "Clip",
    "AugmentParams",
    "DatasetParams",
    "Dataset",
    "class_programs",
    "generate_clip",
    "augment_spatial",
    "augment_temporal",
    "build_dataset",
    "generate_dataset",
    "load_dataset",
    "regenerate_clip_bytes",
]

MAX_CLASSES = 24


@dataclass(frozen=True)
class SceneSpec:
    """Geometry plus the class-indexed motion program for one clip."""

    class_id: int
    frames: int  # rendered source frames (window + temporal-jitter slack)
    height: int
    width: int
    background_seed: int
    period_frames: int  # the training window length; laps are per window
    program: Optional[str] = None  # None -> class program; "static"/"translate_x" for tests


@dataclass
class Clip:
    """One labeled sample: RGB volume, exact flow volume, class id, seed."""

    rgb: np.ndarray  # (3, T, H, W) float32 in [0, 1]
    flow: np.ndarray  # (2, T, H, W) float32, (v_x, v_y) pixels/frame
    label: int
    seed: int


def class_programs(n_classes: int) -> List[dict]:
    """Motion programs per class; class 0 is the irregular rejection class.

    The body motion is drawn from one shared distribution for every class
    (random direction, shared tempo jitter, one lap of the same circular
    track), and the two satellites draw their orbit-rate magnitudes from
    shared ranges too, so every blob's temporal smear is class-independent
    and the mean frame carries no class signal. Class identity lies purely
    in motion relationships: the absolute orbit direction of each
    satellite, a rigidly locked antipodal satellite pair, or irregular
    (speed-modulated) orbits for the rejection class.
    """
    if not 2 <= n_classes <= MAX_CLASSES:
        raise ConfigError(f"n_classes must be within 2..{MAX_CLASSES}, got {n_classes}")
    base = [
        dict(sat1=0, sat2=0, locked=False, modulated=True),  # rejection / no stroke
        dict(sat1=+1, sat2=+1, locked=False, modulated=False),
        dict(sat1=+1, sat2=-1, locked=False, modulated=False),
        dict(sat1=-1, sat2=+1, locked=False, modulated=False),
        dict(sat1=-1, sat2=-1, locked=False, modulated=False),
        dict(sat1=0, sat2=0, locked=True, modulated=False),
    ]
    extra = []
    for locked in (True, False):
        for modulated in (False, True):
            for sat1 in (+1, -1, 0):
                for sat2 in (+1, -1, 0):
                    extra.append(dict(sat1=sat1, sat2=sat2, locked=locked, modulated=modulated))
    table = list(base)
    for p in extra:
        if p not in table:
            table.append(p)
    return table[:n_classes]


def _motion_angles(spec: SceneSpec, program: dict, rng: np.random.Generator,
                   tgrid: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Body angle and the two satellites' world angles per frame.

    Draw order is fixed so that every class consumes the rng identically;
    all magnitudes come from class-independent ranges and only signs /
    couplings differ, which keeps every blob's time-averaged smear free of
    class information.
    """
    period = float(spec.period_frames)
    theta0 = rng.uniform(0.0, 2 * np.pi)
    tempo = rng.uniform(0.85, 1.2)
    body_dir = 1.0 if rng.random() < 0.5 else -1.0
    theta = theta0 + 2 * np.pi * body_dir * tempo / period * tgrid

    def sat_angle(sign_spec):
        psi0 = rng.uniform(0.0, 2 * np.pi)
        revs = rng.uniform(1.7, 2.6)
        sign = sign_spec if sign_spec != 0 else (1 if rng.random() < 0.5 else -1)
        psi = psi0 + 2 * np.pi * revs * sign / period * tgrid
        if program["modulated"]:
            amp = rng.uniform(0.9, 1.4)
            freq = rng.integers(2, 4)
            phase = rng.uniform(0.0, 2 * np.pi)
            psi = psi + amp * np.sin(2 * np.pi * freq * tgrid / period + phase)
        return psi, revs

    psi1, revs1 = sat_angle(program["sat1"])
    if program["locked"]:
        psi2 = psi1 + np.pi  # rigid antipodal pair sharing one rotation
    else:
        psi2, revs2 = sat_angle(program["sat2"])
        # keep unlocked rates visibly apart so only the locked class shows a
        # rigidly co-rotating pair (marginal rate stats are unchanged)
        for _ in range(16):
            if abs(revs2 - revs1) >= 0.2:
                break
            psi2, revs2 = sat_angle(program["sat2"])
    return theta, psi1, psi2


def generate_clip(spec: SceneSpec, seed: int) -> Clip:
    """Render one clip; deterministic in (spec, seed)."""
    if min(spec.frames, spec.height, spec.width) < 2:
        raise ConfigError(f"degenerate clip geometry {spec.frames}x{spec.height}x{spec.width}")
    T, H, W = spec.frames, spec.height, spec.width
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFF, 0xC119])))

    scale = min(H, W)
    sigma_body = 0.070 * scale
    sigma_s1 = 0.036 * scale
    sigma_s2 = 0.042 * scale
    orbit1 = 0.105 * scale
    orbit2 = 0.160 * scale
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0

    tgrid = np.arange(T + 1, dtype=np.float64)
    if spec.program == "static":
        bx = np.full(T + 1, cx + 0.15 * scale)
        by = np.full(T + 1, cy)
        s1x, s1y = bx + orbit1, by.copy()
        s2x, s2y = bx - orbit2, by.copy()
    elif spec.program == "translate_x":
        bx = cx - 0.2 * scale + tgrid  # 1 px/frame to the right
        by = np.full(T + 1, cy)
        s1x, s1y = bx + orbit1, by.copy()
        s2x, s2y = bx - orbit2, by.copy()
    else:
        program = class_programs(max(spec.class_id + 1, 2))[spec.class_id]
        track = 0.220 * scale + rng.uniform(-0.4, 0.4)
        theta, psi1, psi2 = _motion_angles(spec, program, rng, tgrid)
        bx = cx + track * np.cos(theta)
        by = cy + track * np.sin(theta)
        s1x = bx + orbit1 * np.cos(psi1)
        s1y = by + orbit1 * np.sin(psi1)
        s2x = bx + orbit2 * np.cos(psi2)
        s2y = by + orbit2 * np.sin(psi2)

    background = _background(spec.background_seed, H, W)  # (3, H, W)
    colors = (
        np.array([0.85, 0.30, 0.25]),  # body
        np.array([0.95, 0.90, 0.40]),  # inner satellite
        np.array([0.35, 0.55, 0.95]),  # outer satellite
    )
    sigmas = (sigma_body, sigma_s1, sigma_s2)
    paths = ((bx, by), (s1x, s1y), (s2x, s2y))

    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    rgb = np.empty((3, T, H, W), dtype=np.float32)
    flow = np.zeros((2, T, H, W), dtype=np.float32)
    alpha_cutoff = 0.02

    for t in range(T):
        frame = background
        w_sum = np.zeros((H, W))
        vx_acc = np.zeros((H, W))
        vy_acc = np.zeros((H, W))
        for (px, py), sig, color in zip(paths, sigmas, colors):
            alpha = np.exp(-(((xs - px[t]) ** 2) + ((ys - py[t]) ** 2)) / (2 * sig**2))
            frame = frame * (1.0 - alpha) + color[:, None, None] * alpha
            w_sum = w_sum + alpha
            vx_acc = vx_acc + alpha * (px[t + 1] - px[t])
            vy_acc = vy_acc + alpha * (py[t + 1] - py[t])
        rgb[:, t] = frame.astype(np.float32)
        inv = np.where(w_sum > alpha_cutoff, 1.0 / np.maximum(w_sum, 1e-12), 0.0)
        flow[0, t] = (vx_acc * inv).astype(np.float32)
        flow[1, t] = (vy_acc * inv).astype(np.float32)

    return Clip(rgb=rgb, flow=flow, label=spec.class_id, seed=int(seed))


def _background(background_seed: int, H: int, W: int) -> np.ndarray:
    """Smooth piecewise-bilinear texture, identical for a whole corpus."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(background_seed) & 0xFFFFFFFFFFFF, 0xB6])))
    out = np.full((3, H, W), 0.5)
    for nodes, amp in ((4, 0.07), (8, 0.05)):
        low = rng.uniform(-1.0, 1.0, size=(3, nodes, nodes))
        out += amp * _bilinear_resize(low, H, W)
    return np.clip(out, 0.05, 0.95)


def _resize_matrix(dst: int, src: int) -> np.ndarray:
    pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0, src - 1)
    i0 = np.minimum(np.floor(pos).astype(int), src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    w = pos - i0
    mat = np.zeros((dst, src))
    np.add.at(mat, (np.arange(dst), i0), 1 - w)
    np.add.at(mat, (np.arange(dst), i1), w)
    return mat


def _bilinear_resize(low: np.ndarray, H: int, W: int) -> np.ndarray:
    mh = _resize_matrix(H, low.shape[-2])
    mw = _resize_matrix(W, low.shape[-1])
    return mh @ low @ mw.T


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    translate_frac: float = 0.05

    def validate(self) -> None:
        if not 0.0 <= self.rotation_deg <= 180.0:
            raise ConfigError(f"rotation_deg must be within [0, 180], got {self.rotation_deg}")
        if not 0.5 <= self.scale_min <= self.scale_max <= 2.0:
            raise ConfigError(f"scale range [{self.scale_min}, {self.scale_max}] out of bounds")
        if not 0.0 <= self.translate_frac <= 0.25:
            raise ConfigError(f"translate_frac must be within [0, 0.25], got {self.translate_frac}")


def augment_spatial(clip: Clip, params: AugmentParams, seed: int) -> Clip:
    """Rotation + homothety + translation, one transform for the whole clip.

    Frames are resampled bilinearly with edge clamping. Flow vectors
    transform covariantly: sampled at the source location, then rotated by
    the drawn angle and scaled by the homothety ratio. Positive angles
    rotate the +x axis toward +y (clockwise on screen with y pointing down).
    """
    params.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFF, 0xA5])))
    theta = np.deg2rad(rng.uniform(-params.rotation_deg, params.rotation_deg))
    s = rng.uniform(params.scale_min, params.scale_max)
    _, T, H, W = clip.rgb.shape
    tx = rng.uniform(-params.translate_frac * W, params.translate_frac * W)
    ty = rng.uniform(-params.translate_frac * H, params.translate_frac * H)

    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    # inverse map: undo translation, then rotation/scale about the center
    dx = xs - cx - tx
    dy = ys - cy - ty
    px = (cos_t * dx + sin_t * dy) / s + cx
    py = (-sin_t * dx + cos_t * dy) / s + cy

    sx = np.clip(px, 0.0, W - 1.0)
    sy = np.clip(py, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(sx).astype(int), W - 1)
    y0 = np.minimum(np.floor(sy).astype(int), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (sx - x0)
    wy = (sy - y0)
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx

    def resample(vol):  # (C, T, H, W) -> same, gathered at the source points
        flat = vol.reshape(vol.shape[0] * vol.shape[1], H, W)
        out = (
            flat[:, y0, x0] * w00
            + flat[:, y0, x1] * w01
            + flat[:, y1, x0] * w10
            + flat[:, y1, x1] * w11
        )
        return out.reshape(vol.shape)

    rgb = resample(clip.rgb.astype(np.float64)).astype(np.float32)
    fsrc = resample(clip.flow.astype(np.float64))
    vx = s * (cos_t * fsrc[0] - sin_t * fsrc[1])
    vy = s * (sin_t * fsrc[0] + cos_t * fsrc[1])
    flow = np.stack([vx, vy]).astype(np.float32)
    return Clip(rgb=rgb, flow=flow, label=clip.label, seed=clip.seed)


def augment_temporal(source: Clip, frames: int, jitter: int, seed: int) -> Clip:
    """Extract a ``frames``-long window, start jittered by up to +-jitter.

    Redraws (bounded) when the window would leave the source, then clamps.
    """
    T = source.rgb.shape[1]
    if frames > T:
        raise ConfigError(f"window of {frames} frames exceeds source length {T}")
    if jitter < 0:
        raise ConfigError("jitter must be non-negative")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFF, 0x7E])))
    base = (T - frames) // 2
    start = base
    for _ in range(8):
        offset = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
        start = base + offset
        if 0 <= start <= T - frames:
            break
    start = int(np.clip(start, 0, T - frames))
    return Clip(
        rgb=source.rgb[:, start : start + frames].copy(),
        flow=source.flow[:, start : start + frames].copy(),
        label=source.label,
        seed=source.seed,
    )


# ---------------------------------------------------------------------------
# Dataset assembly and disk format


@dataclass(frozen=True)
class DatasetParams:
    n_classes: int = 6
    per_class: int = 40
    frames: int = 16  # training window length
    height: int = 32
    width: int = 32
    jitter: int = 1  # temporal slack rendered on each side
    split: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    @property
    def source_frames(self) -> int:
        return self.frames + 2 * self.jitter


SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: int
    class_id: int
    seed: int
    split: str


def build_dataset(n_classes: int, per_class: int, split_ratios, seed: int) -> List[ClipRecord]:
    """Deterministic, exactly class-balanced split assignment."""
    ratios = tuple(float(r) for r in split_ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"split must be three non-negative ratios, got {split_ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n_val = int(per_class * ratios[1])
    n_test = int(per_class * ratios[2])
    n_train = per_class - n_val - n_test
    for name, ratio, count in (("train", ratios[0], n_train), ("val", ratios[1], n_val),
                               ("test", ratios[2], n_test)):
        if ratio > 0 and count < 1:
            raise ConfigError(
                f"per_class={per_class} leaves no clips for the {name} split at ratio {ratio}"
            )
    records = []
    clip_id = 0
    for class_id in range(n_classes):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), class_id, 0x591])))
        order = rng.permutation(per_class)
        split_of = {}
        for pos, idx in enumerate(order):
            if pos < n_train:
                split_of[idx] = "train"
            elif pos < n_train + n_val:
                split_of[idx] = "val"
            else:
                split_of[idx] = "test"
        for idx in range(per_class):
            clip_seed = int(np.random.SeedSequence([int(seed), class_id, idx, 0xC1]).generate_state(1)[0])
            records.append(ClipRecord(clip_id, class_id, clip_seed, split_of[idx]))
            clip_id += 1
    return records


@dataclass
class Dataset:
    params: DatasetParams
    records: List[ClipRecord]
    rgb: np.ndarray  # (N, 3, source_frames, H, W)
    flow: np.ndarray  # (N, 2, source_frames, H, W)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.records])

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return np.array([i for i, r in enumerate(self.records) if r.split == split])


def _spec_for(params: DatasetParams, class_id: int) -> SceneSpec:
    return SceneSpec(
        class_id=class_id,
        frames=params.source_frames,
        height=params.height,
        width=params.width,
        background_seed=params.seed,
        period_frames=params.frames,
    )


def render_dataset(params: DatasetParams) -> Dataset:
    """Generate the whole corpus in memory."""
    records = build_dataset(params.n_classes, params.per_class, params.split, params.seed)
    n = len(records)
    rgb = np.empty((n, 3, params.source_frames, params.height, params.width), dtype=np.float32)
    flow = np.empty((n, 2, params.source_frames, params.height, params.width), dtype=np.float32)
    for i, rec in enumerate(records):
        clip = generate_clip(_spec_for(params, rec.class_id), rec.seed)
        rgb[i] = clip.rgb
        flow[i] = clip.flow
    return Dataset(params=params, records=records, rgb=rgb, flow=flow)


MANIFEST_NAME = "manifest.csv"


def generate_dataset(params: DatasetParams, out_dir) -> Dataset:
    """Write manifest + one clip file per sample; returns the in-memory dataset."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    ds = render_dataset(params)
    lines = [
        "# tstcnn-dataset v1",
        f"# n_classes={params.n_classes} per_class={params.per_class} frames={params.frames} "
        f"height={params.height} width={params.width} jitter={params.jitter} "
        f"split={params.split[0]},{params.split[1]},{params.split[2]} seed={params.seed}",
        "clip_id,class,seed,split",
    ]
    for i, rec in enumerate(ds.records):
        lines.append(f"{rec.clip_id:05d},{rec.class_id},{rec.seed},{rec.split}")
        with open(out / "clips" / f"clip_{rec.clip_id:05d}.tnsr", "wb") as fp:
            write_tensor(fp, ds.rgb[i])
            write_tensor(fp, ds.flow[i])
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ds


def _parse_manifest(path: Path) -> Tuple[DatasetParams, List[ClipRecord]]:
    text = path.read_text(encoding="utf-8").strip().splitlines()
    header = {}
    rows = []
    for line in text:
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    k, v = token.split("=", 1)
                    header[k] = v
        elif line and not line.startswith("clip_id"):
            rows.append(line)
    try:
        split = tuple(float(x) for x in header["split"].split(","))
        params = DatasetParams(
            n_classes=int(header["n_classes"]),
            per_class=int(header["per_class"]),
            frames=int(header["frames"]),
            height=int(header["height"]),
            width=int(header["width"]),
            jitter=int(header["jitter"]),
            split=split,
            seed=int(header["seed"]),
        )
    except KeyError as missing:
        raise ConfigError(f"{path}: manifest header missing {missing}") from None
    records = []
    for row in rows:
        clip_id, class_id, seed, split_name = row.split(",")
        records.append(ClipRecord(int(clip_id), int(class_id), int(seed), split_name))
    return params, records


def load_dataset(directory) -> Dataset:
    """Load manifest + clip files written by generate_dataset."""
    root = Path(directory)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise ConfigError(f"no dataset manifest at {manifest}")
    params, records = _parse_manifest(manifest)
    n = len(records)
    rgb = np.empty((n, 3, params.source_frames, params.height, params.width), dtype=np.float32)
    flow = np.empty((n, 2, params.source_frames, params.height, params.width), dtype=np.float32)
    for i, rec in enumerate(records):
        with open(root / "clips" / f"clip_{rec.clip_id:05d}.tnsr", "rb") as fp:
            rgb[i] = read_tensor(fp)
            flow[i] = read_tensor(fp)
    return Dataset(params=params, records=records, rgb=rgb, flow=flow)


def regenerate_clip_bytes(params: DatasetParams, record: ClipRecord) -> bytes:
    """Re-render one clip from its manifest row, in the on-disk byte format."""
    import io

    clip = generate_clip(_spec_for(params, record.class_id), record.seed)
    buf = io.BytesIO()
    write_tensor(buf, clip.rgb)
    write_tensor(buf, clip.flow)
    return buf.getvalue()
