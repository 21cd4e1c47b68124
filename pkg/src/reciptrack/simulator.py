"""Synthetic tracking sequences with exact ground truth.

A sequence is a textured ellipse or rectangle moving over a smooth cluttered
background, optionally changing size, accompanied by look-alike distractors
or partially covered by an occluder.  Containers are stored as

    <seq>/manifest.json     spec, frame count, size
    <seq>/frames.raw        concatenated HxWx3 uint8 frames
    <seq>/groundtruth.csv   frame,x0,y0,x1,y1
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .assignment import VideoSequence
from .io_utils import atomic_write_bytes, atomic_write_text

STRATA = ("easy", "scale", "distractor", "occlusion")
MARGIN = 2.0


@dataclass
class TargetSpec:
    shape: str = "ellipse"  # "ellipse" | "rect"
    color: tuple = (200, 60, 60)
    texture_seed: int = 0
    size: tuple = (24.0, 18.0)  # base (w, h) in pixels


@dataclass
class SequenceSpec:
    frames: int = 100
    frame_size: tuple = (128, 128)  # (W, H)
    target: TargetSpec = field(default_factory=TargetSpec)
    start: Optional[tuple] = None  # initial center; None = frame center
    velocity: tuple = (0.0, 0.0)  # px / frame
    turn_sigma: float = 0.0  # per-frame heading noise, radians
    scale_curve: Optional[list] = None  # per-frame size factor; None = constant 1
    distractors: int = 0
    similarity: float = 0.8  # fraction of target color kept by distractors
    occluder: Optional[dict] = None  # {"start", "end", "coverage"}
    noise_sigma: float = 0.0
    seed: int = 0
    stratum: str = "easy"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceSpec":
        d = dict(d)
        d["target"] = TargetSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["target"].items()})
        for key in ("frame_size", "velocity", "start"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SequenceContainer:
    manifest: dict
    frames: np.ndarray  # (T, H, W, 3) uint8
    gt: np.ndarray  # (T, 4) float64

    @property
    def name(self) -> str:
        return self.manifest.get("name", "seq")

    def to_sequence(self) -> VideoSequence:
        return VideoSequence(self.name, self.frames, self.gt)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _texture_params(seed: int) -> dict:
    r = np.random.default_rng(seed)
    return {
        "freq": r.uniform(1.5, 4.0),
        "angle": r.uniform(0, math.pi),
        "kind": int(r.integers(3)),
        "phase": r.uniform(0, 2 * math.pi),
        "amp": r.uniform(0.25, 0.45),
    }


def _background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    coarse = rng.uniform(40, 200, size=(6, 6, 3)).astype(np.float32)
    fine = rng.uniform(-25, 25, size=(24, 24, 3)).astype(np.float32)
    bg = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    bg += cv2.resize(fine, (w, h), interpolation=cv2.INTER_LINEAR)
    return bg


def _paint(canvas: np.ndarray, shape: str, cx: float, cy: float, w: float, h: float, color, tex: dict) -> None:
    """Draw a textured shape in place; pixel (i, j) is inside if its center is."""
    H, W = canvas.shape[:2]
    x_lo, x_hi = max(int(math.floor(cx - w / 2)), 0), min(int(math.ceil(cx + w / 2)) + 1, W)
    y_lo, y_hi = max(int(math.floor(cy - h / 2)), 0), min(int(math.ceil(cy + h / 2)) + 1, H)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    xs = (np.arange(x_lo, x_hi) + 0.5 - cx) / (w / 2)
    ys = (np.arange(y_lo, y_hi) + 0.5 - cy) / (h / 2)
    u, v = np.meshgrid(xs, ys)
    if shape == "ellipse":
        inside = u * u + v * v <= 1.0
    else:
        inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    c, s = math.cos(tex["angle"]), math.sin(tex["angle"])
    a = (u * c + v * s) * tex["freq"] * math.pi + tex["phase"]
    b = (-u * s + v * c) * tex["freq"] * math.pi
    if tex["kind"] == 0:
        pattern = np.sin(a)
    elif tex["kind"] == 1:
        pattern = np.sign(np.sin(a) * np.sin(b))
    else:
        pattern = np.sin(a) * np.cos(b)
    shade = 1.0 + tex["amp"] * pattern
    patch = canvas[y_lo:y_hi, x_lo:x_hi]
    col = np.asarray(color, dtype=np.float32)
    patch[inside] = (shade[inside, None] * col[None, :]).astype(np.float32)


def _trajectory(spec: SequenceSpec, rng: np.random.Generator, sizes: np.ndarray):
    W, H = spec.frame_size
    cx, cy = spec.start if spec.start is not None else (W / 2, H / 2)
    vx, vy = spec.velocity
    centers = []
    for t in range(spec.frames):
        w, h = sizes[t]
        lo_x, hi_x = w / 2 + MARGIN, W - w / 2 - MARGIN
        lo_y, hi_y = h / 2 + MARGIN, H - h / 2 - MARGIN
        if lo_x > hi_x or lo_y > hi_y:
            raise ValueError(f"target of size {w:.1f}x{h:.1f} cannot fit in a {W}x{H} frame")
        if t > 0:
            if spec.turn_sigma:
                ang = rng.normal(0.0, spec.turn_sigma)
                c, s = math.cos(ang), math.sin(ang)
                vx, vy = c * vx - s * vy, s * vx + c * vy
            cx, cy = cx + vx, cy + vy
        # bounce off the borders so the whole target stays visible
        if cx < lo_x:
            cx, vx = 2 * lo_x - cx, abs(vx)
        elif cx > hi_x:
            cx, vx = 2 * hi_x - cx, -abs(vx)
        if cy < lo_y:
            cy, vy = 2 * lo_y - cy, abs(vy)
        elif cy > hi_y:
            cy, vy = 2 * hi_y - cy, -abs(vy)
        cx = min(max(cx, lo_x), hi_x)
        cy = min(max(cy, lo_y), hi_y)
        centers.append((cx, cy))
    return np.array(centers)


def generate(spec: SequenceSpec, name: str = "seq") -> SequenceContainer:
    """Render ``spec``; identical specs give byte-identical containers."""
    W, H = spec.frame_size
    if spec.frames < 1:
        raise ValueError("a sequence needs at least one frame")
    rng = np.random.default_rng(spec.seed)
    curve = np.ones(spec.frames) if spec.scale_curve is None else np.asarray(spec.scale_curve, dtype=np.float64)
    if curve.shape != (spec.frames,) or np.any(curve <= 0):
        raise ValueError("scale_curve needs one positive factor per frame")
    base = np.asarray(spec.target.size, dtype=np.float64)
    sizes = curve[:, None] * base[None, :]
    if spec.start is not None:
        sx, sy = spec.start
        w0, h0 = sizes[0]
        if sx + w0 / 2 <= 0 or sx - w0 / 2 >= W or sy + h0 / 2 <= 0 or sy - h0 / 2 >= H:
            raise ValueError("target starts fully outside the frame")
    centers = _trajectory(spec, rng, sizes)

    bg = _background(rng, W, H)
    tex = _texture_params(spec.target.texture_seed)

    # Distractors: same color family and shape, different texture seed.
    distractors = []
    for k in range(spec.distractors):
        d_tex = _texture_params(spec.target.texture_seed + 7919 * (k + 1))
        d_color = tuple(
            spec.similarity * c + (1 - spec.similarity) * o
            for c, o in zip(spec.target.color, rng.uniform(30, 230, size=3))
        )
        d_size = base * rng.uniform(0.8, 1.2)
        d_start = (rng.uniform(d_size[0], W - d_size[0]), rng.uniform(d_size[1], H - d_size[1]))
        speed = math.hypot(*spec.velocity) or 1.0
        ang = rng.uniform(0, 2 * math.pi)
        d_spec = SequenceSpec(
            frames=spec.frames,
            frame_size=spec.frame_size,
            start=d_start,
            velocity=(speed * math.cos(ang), speed * math.sin(ang)),
            turn_sigma=spec.turn_sigma,
        )
        d_sizes = np.repeat(d_size[None, :], spec.frames, axis=0)
        distractors.append((d_tex, d_color, d_sizes, _trajectory(d_spec, rng, d_sizes)))

    frames = np.empty((spec.frames, H, W, 3), dtype=np.uint8)
    gt = np.empty((spec.frames, 4), dtype=np.float64)
    occ = spec.occluder
    for t in range(spec.frames):
        canvas = bg.copy()
        for d_tex, d_color, d_sizes, d_centers in distractors:
            _paint(canvas, spec.target.shape, *d_centers[t], *d_sizes[t], d_color, d_tex)
        cx, cy = centers[t]
        w, h = sizes[t]
        _paint(canvas, spec.target.shape, cx, cy, w, h, spec.target.color, tex)
        if occ and occ["start"] <= t < occ["end"]:
            ow = w * occ["coverage"]
            x0 = int(round(cx + w / 2 - ow))
            y0 = int(round(cy - h / 2 - 2))
            canvas[max(y0, 0) : int(round(cy + h / 2 + 2)), max(x0, 0) : int(round(cx + w / 2 + 2))] = (
                np.float32(110.0),
                np.float32(110.0),
                np.float32(110.0),
            )
        if spec.noise_sigma:
            canvas += rng.normal(0.0, spec.noise_sigma, size=canvas.shape).astype(np.float32)
        frames[t] = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        gt[t] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    manifest = {"name": name, "spec": spec.to_dict(), "frames": spec.frames, "size": [W, H]}
    return SequenceContainer(manifest, frames, gt)


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


def gt_csv(gt: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "x0", "y0", "x1", "y1"])
    for t, row in enumerate(gt):
        w.writerow([t] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_gt_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x0"]), float(r["y0"]), float(r["x1"]), float(r["y1"])] for r in rows])


def write_container(container: SequenceContainer, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_text(d / "manifest.json", json.dumps(container.manifest, sort_keys=True, indent=1) + "\n")
    atomic_write_bytes(d / "frames.raw", container.frames.tobytes())
    atomic_write_text(d / "groundtruth.csv", gt_csv(container.gt))
    return d


def read_container(directory) -> SequenceContainer:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    W, H = manifest["size"]
    n = manifest["frames"]
    raw = (d / "frames.raw").read_bytes()
    if len(raw) != n * W * H * 3:
        raise ValueError(f"{d}: frames.raw holds {len(raw)} bytes, expected {n * W * H * 3}")
    frames = np.frombuffer(raw, dtype=np.uint8).reshape(n, H, W, 3)
    gt = read_gt_csv(d / "groundtruth.csv")
    if len(gt) != n:
        raise ValueError(f"{d}: groundtruth.csv has {len(gt)} rows, expected {n}")
    return SequenceContainer(manifest, frames, gt)


def container_digest(container: SequenceContainer) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(container.manifest, sort_keys=True).encode())
    h.update(container.frames.tobytes())
    h.update(container.gt.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def _stratum_counts(n: int, mix: Sequence[float]) -> list[int]:
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (len(STRATA),) or np.any(mix < 0) or mix.sum() <= 0:
        raise ValueError(f"mix needs {len(STRATA)} non-negative weights")
    quota = mix / mix.sum() * n
    counts = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def random_spec(stratum: str, seed: int, frames: int = 100, frame_size=(128, 128)) -> SequenceSpec:
    """Draw a sequence spec for one difficulty stratum."""
    if stratum not in STRATA:
        raise ValueError(f"unknown stratum {stratum!r}")
    r = np.random.default_rng(seed)
    W, H = frame_size
    short = min(W, H)
    aspect = r.uniform(0.6, 1.6)
    base = r.uniform(0.14, 0.24) * short
    size = (base * math.sqrt(aspect), base / math.sqrt(aspect))
    speed = r.uniform(0.5, 2.0)
    ang = r.uniform(0, 2 * math.pi)
    color = tuple(float(c) for c in r.uniform(30, 230, size=3))
    target = TargetSpec(
        shape=str(r.choice(["ellipse", "rect"])),
        color=color,
        texture_seed=int(r.integers(1 << 30)),
        size=size,
    )
    spec = SequenceSpec(
        frames=frames,
        frame_size=tuple(frame_size),
        target=target,
        start=(r.uniform(0.35, 0.65) * W, r.uniform(0.35, 0.65) * H),
        velocity=(speed * math.cos(ang), speed * math.sin(ang)),
        turn_sigma=0.05,
        noise_sigma=3.0,
        seed=int(r.integers(1 << 30)),
        stratum=stratum,
    )
    if stratum == "scale":
        lo, hi = 0.5, 2.0
        end = math.exp(r.uniform(math.log(lo), math.log(hi)))
        if abs(math.log(end)) < math.log(1.4):
            end = 1.6 if end >= 1 else 1 / 1.6
        # keep the grown target inside the frame
        end = min(end, 0.55 * short / max(size))
        t = np.linspace(0.0, 1.0, frames)
        spec.scale_curve = np.exp(t * math.log(end)).tolist()
        spec.velocity = (spec.velocity[0] * 1.5, spec.velocity[1] * 1.5)
    elif stratum == "distractor":
        spec.distractors = int(r.integers(1, 4))
        spec.similarity = float(r.uniform(0.7, 0.9))
    elif stratum == "occlusion":
        start = int(r.integers(frames // 4, frames // 2))
        spec.occluder = {"start": start, "end": start + int(r.integers(10, 25)), "coverage": float(r.uniform(0.3, 0.6))}
    return spec


def make_benchmark(
    n_sequences: int,
    difficulty_mix=(1, 1, 1, 1),
    seed: int = 0,
    out_dir=None,
    frames: int = 100,
    frame_size=(128, 128),
) -> list[SequenceContainer]:
    """Generate a stratified benchmark; writes containers plus ``benchmark.json`` when ``out_dir`` is given."""
    if n_sequences < 1:
        raise ValueError("a benchmark needs at least one sequence")
    counts = _stratum_counts(n_sequences, difficulty_mix)
    strata = [s for s, c in zip(STRATA, counts) for _ in range(c)]
    seeds = np.random.SeedSequence(seed).generate_state(n_sequences).tolist()
    containers = []
    for i, (stratum, s) in enumerate(zip(strata, seeds)):
        name = f"seq{i:03d}_{stratum}"
        containers.append(generate(random_spec(stratum, int(s), frames, frame_size), name=name))
    if out_dir is not None:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        for c in containers:
            write_container(c, root / c.name)
        manifest = {
            "seed": seed,
            "n_sequences": n_sequences,
            "mix": dict(zip(STRATA, [float(m) for m in difficulty_mix])),
            "counts": dict(zip(STRATA, counts)),
            "sequences": [c.name for c in containers],
            "frames": frames,
            "frame_size": list(frame_size),
        }
        atomic_write_text(root / "benchmark.json", json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return containers


def load_benchmark(directory) -> list[SequenceContainer]:
    root = Path(directory)
    manifest_path = root / "benchmark.json"
    if manifest_path.exists():
        names = json.loads(manifest_path.read_text())["sequences"]
    else:
        names = sorted(p.name for p in root.iterdir() if (p / "manifest.json").exists())
    if not names:
        raise ValueError(f"{root}: no sequence containers found")
    return [read_container(root / n) for n in names]
