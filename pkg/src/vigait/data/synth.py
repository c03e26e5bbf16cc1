"""Synthetic multi-view walking silhouettes.

Each subject is a parametric articulated walker (limb lengths, body width,
gait period, swing amplitudes, posture) drawn from seeded distributions.
Joints live in 3-D (x forward, y lateral, z up).  For a camera azimuth
``theta`` the horizontal image axis is ``u = x sin(theta) + y cos(theta)`` and
the depth axis ``d = x cos(theta) - y sin(theta)``: 0 deg is frontal, 90 deg
is profile facing right and -90 deg profile facing left.  Azimuths ``theta``
and ``180 - theta`` give near-identical silhouettes for a symmetric body, so
useful view sets live in [-90, 90].  A pinhole camera at distance ``CAMERA_DISTANCE`` and height
``CAMERA_HEIGHT`` scales each point by ``D / (D + d)`` about the camera
height, so nearer limbs are drawn larger and their feet lower.  The torso is
an elliptic cylinder whose image half-width is
``sqrt((depth sin)^2 + (width cos)^2)``.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .pgm import write_pgm

CANVAS = (72, 64)
PIXELS_PER_UNIT = 64.0
GROUND_ROW = 69
CAMERA_DISTANCE = 2.5
CAMERA_HEIGHT = 0.5
CONDITIONS = ("nm", "bg", "cl")


@dataclass(frozen=True)
class WalkerParams:
    thigh: float
    shin: float
    torso: float
    neck: float
    head_r: float
    shoulder_w: float
    hip_w: float
    depth: float
    leg_r: float
    arm_r: float
    upper_arm: float
    forearm: float
    foot: float
    hip_swing: float
    knee_amp: float
    arm_swing: float
    elbow: float
    lean: float
    period: float


def sample_subject(rng: np.random.Generator) -> WalkerParams:
    # torso width/depth, hip width and stride mimic an azimuth change, so their
    # spread is kept small; identity lives mostly in lengths, timing and swing
    def u(lo, hi):
        return float(rng.uniform(lo, hi))

    return WalkerParams(
        thigh=u(0.21, 0.29),
        shin=u(0.21, 0.29),
        torso=u(0.25, 0.35),
        neck=u(0.03, 0.07),
        head_r=u(0.05, 0.075),
        shoulder_w=u(0.1, 0.12),
        hip_w=u(0.065, 0.08),
        depth=u(0.058, 0.072),
        leg_r=u(0.028, 0.045),
        arm_r=u(0.018, 0.032),
        upper_arm=u(0.14, 0.2),
        forearm=u(0.13, 0.19),
        foot=u(0.05, 0.09),
        hip_swing=u(0.38, 0.48),
        knee_amp=u(0.3, 1.0),
        arm_swing=u(0.1, 0.6),
        elbow=u(0.1, 0.6),
        lean=u(-0.05, 0.2),
        period=u(16.0, 30.0),
    )


def jitter(params: WalkerParams, rng: np.random.Generator, amount: float) -> WalkerParams:
    """Per-sequence variation: every field scaled by ``1 + amount * N(0, 1)``."""
    if amount <= 0:
        return params
    fields = {k: v * (1.0 + amount * rng.normal()) for k, v in params.__dict__.items()}
    fields["lean"] = params.lean + amount * rng.normal()
    return replace(params, **fields)


def _capsule(uu, zz, a, b, r):
    """Pixels within ``r`` of segment a-b (2-D image coordinates).

    Endpoints may carry a third entry, the perspective scale, which then
    scales the radius by its mean over the two ends.
    """
    au, az = a[:2]
    bu, bz = b[:2]
    if len(a) > 2:
        r = r * 0.5 * (a[2] + b[2])
    du, dz = bu - au, bz - az
    den = du * du + dz * dz
    if den == 0:
        t = 0.0
    else:
        t = np.clip(((uu - au) * du + (zz - az) * dz) / den, 0.0, 1.0)
    pu, pz = au + t * du, az + t * dz
    return (uu - pu) ** 2 + (zz - pz) ** 2 <= r * r


def render(
    params: WalkerParams,
    phase: float,
    angle_deg: float,
    condition: str = "nm",
    camera_distance: float | None = CAMERA_DISTANCE,
) -> np.ndarray:
    """One 0/255 silhouette frame of the walker at gait ``phase`` (radians).

    ``camera_distance=None`` gives an orthographic view.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    p = params
    th = np.deg2rad(angle_deg)
    s, c = np.sin(th), np.cos(th)
    rows, cols = CANVAS
    zz = (GROUND_ROW - np.arange(rows)[:, None]) / PIXELS_PER_UNIT + np.zeros((1, cols))
    uu = (np.arange(cols)[None, :] - (cols - 1) / 2) / PIXELS_PER_UNIT + np.zeros((rows, 1))

    coat = condition == "cl"
    depth = p.depth * (1.35 if coat else 1.0)
    arm_r = p.arm_r * (1.5 if coat else 1.0)

    legs = []
    for side, ph in ((1.0, phase), (-1.0, phase + np.pi)):
        alpha = p.hip_swing * np.sin(ph)
        knee = p.knee_amp * max(0.0, np.cos(ph)) ** 1.5
        kx, kz = p.thigh * np.sin(alpha), -p.thigh * np.cos(alpha)
        ax, az = kx + p.shin * np.sin(alpha - knee), kz - p.shin * np.cos(alpha - knee)
        legs.append((side, (kx, kz), (ax, az)))
    hip_z = max(-a[1] for _, _, a in legs) + p.leg_r

    def proj(x, y, z):
        if camera_distance is None:
            return x * s + y * c, z, 1.0
        k = camera_distance / (camera_distance + x * c - y * s)
        return (x * s + y * c) * k, CAMERA_HEIGHT + (z - CAMERA_HEIGHT) * k, k

    mask = np.zeros(CANVAS, dtype=bool)
    for side, (kx, kz), (ax, az) in legs:
        y = side * p.hip_w
        hip = proj(0.0, y, hip_z)
        knee = proj(kx, y, hip_z + kz)
        ankle = proj(ax, y, hip_z + az)
        toe = proj(ax + p.foot, y, max(hip_z + az - 0.01, p.leg_r * 0.6))
        mask |= _capsule(uu, zz, hip, knee, p.leg_r)
        mask |= _capsule(uu, zz, knee, ankle, p.leg_r * 0.85)
        mask |= _capsule(uu, zz, ankle, toe, p.leg_r * 0.6)

    # torso: elliptic cross-section, width interpolated hip -> shoulder
    top = hip_z + p.torso
    bottom = hip_z - (0.12 if coat else 0.0)
    lean = np.sin(p.lean)
    frac = np.clip((zz - hip_z) / p.torso, 0.0, 1.0)
    width = (p.hip_w + p.leg_r) + frac * (p.shoulder_w - p.hip_w - p.leg_r + 0.01)
    width = width * (1.15 if coat else 1.0)
    centre = frac * p.torso * lean * s
    half = np.sqrt((depth * s) ** 2 + (width * c) ** 2)
    mask |= (zz >= bottom) & (zz <= top) & (np.abs(uu - centre) <= half)

    neck_x = p.torso * lean
    head = proj(neck_x + 0.01, 0.0, top + p.neck + p.head_r)
    mask |= _capsule(uu, zz, proj(neck_x, 0.0, top - 0.02), head, p.head_r * 0.45)
    mask |= (uu - head[0]) ** 2 + (zz - head[1]) ** 2 <= (p.head_r * head[2]) ** 2

    for side, ph in ((1.0, phase + np.pi), (-1.0, phase)):
        gamma = p.arm_swing * np.sin(ph)
        y = side * (p.shoulder_w + arm_r * 0.5)
        sx, sz = neck_x - 0.01, top - 0.02
        ex, ez = sx + p.upper_arm * np.sin(gamma), sz - p.upper_arm * np.cos(gamma)
        fa = gamma + p.elbow * (1.0 + 0.5 * np.sin(ph))
        hx, hz = ex + p.forearm * np.sin(fa), ez - p.forearm * np.cos(fa)
        mask |= _capsule(uu, zz, proj(sx, y, sz), proj(ex, y, ez), arm_r)
        mask |= _capsule(uu, zz, proj(ex, y, ez), proj(hx, y, hz), arm_r * 0.9)

    if condition == "bg":
        y = p.shoulder_w + 0.06
        strap = proj(0.0, y, hip_z + 0.02)
        low = proj(0.02, y, hip_z - 0.14)
        mask |= _capsule(uu, zz, strap, low, 0.06)

    return mask.astype(np.uint8) * 255


def angle_name(angle: float) -> str:
    a = float(angle)
    return f"{int(a):03d}" if a.is_integer() else f"{a:05.1f}"


def _seq_rng(seed: int, *parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *parts]))


def render_sequence(
    params: WalkerParams,
    angle: float,
    frames: int,
    rng: np.random.Generator,
    condition: str = "nm",
    variation: float = 0.03,
) -> np.ndarray:
    seq_params = jitter(params, rng, variation)
    phase0 = rng.uniform(0.0, 2 * np.pi)
    step = 2 * np.pi / seq_params.period
    return np.stack([render(seq_params, phase0 + t * step, angle, condition) for t in range(frames)])


def generate(
    out,
    subjects: int,
    views,
    seqs_per_view: int,
    frames: int,
    seed: int = 0,
    conditions=("nm",),
    variation: float = 0.03,
) -> list[tuple[str, str, str, str, int]]:
    """Write a synthetic dataset under ``out`` and return its manifest rows."""
    views = [float(v) for v in views]
    if min(subjects, len(views), seqs_per_view, frames) < 1:
        raise ValueError("subjects, views, seqs_per_view and frames must all be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for si in range(subjects):
        subject = f"{si + 1:03d}"
        params = sample_subject(_seq_rng(seed, 0, si))
        for ci, cond in enumerate(conditions):
            for vi, angle in enumerate(views):
                for q in range(seqs_per_view):
                    seq = f"{q + 1:02d}"
                    rng = _seq_rng(seed, 1, si, ci, vi, q)
                    imgs = render_sequence(params, angle, frames, rng, cond, variation)
                    d = out / subject / cond / angle_name(angle) / seq
                    d.mkdir(parents=True, exist_ok=True)
                    for t, img in enumerate(imgs):
                        write_pgm(d / f"{t:03d}.pgm", img)
                    manifest.append((subject, cond, angle_name(angle), seq, frames))
    write_manifest(out / "manifest.tsv", manifest)
    return manifest


def write_manifest(path, rows) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write("subject\tcondition\tangle\tseq\tframe_count\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")
    os.replace(tmp, path)
