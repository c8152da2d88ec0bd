"""Synthetic 3D-GS scenes with ground truth.

Gaussians are scattered over parametric structures (segments, arcs, plane
patches, box shells, folded "ridge" sheets) with covariances aligned to the
local tangent frame. :func:`split_pair` cuts a scene into two overlapping
sub-maps and moves one of them into its own frame with a known similarity
transform.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError, FormatError
from .model import GaussianModel, apply_transform, sh_coeff_count
from .transform import SimilarityTransform, matrix_to_quat, rotation_about

KINDS = ("line", "arc", "plane", "box", "ridge")

_DEFAULT_AXES = {
    "line": (1.0, 0.2, 0.125),
    "arc": (1.0, 0.2, 0.125),
    "plane": (1.0, 0.75, 0.125),
    "box": (1.0, 0.75, 0.125),
    "ridge": (1.0, 0.75, 0.125),
}


@dataclass
class Structure:
    """One parametric structure.

    ``geometry`` keys by kind:

    line   ``p0``, ``p1``
    arc    ``center``, ``radius``, ``start_deg``, ``end_deg``, optional ``axis``, ``ref``
    plane  ``center``, ``u``, ``v`` (half-extent vectors)
    box    ``center``, ``half`` (3 half sizes), optional ``yaw_deg``
    ridge  ``center``, ``u`` (half fold length), ``v`` (wing extent), ``fold_deg``

    ``density`` is Gaussians per metre for curves and per square metre for
    surfaces. ``axes`` are per-axis scale multipliers (tangent first).
    """

    kind: str
    geometry: dict
    density: float
    scale: float = 0.04
    axes: tuple | None = None
    opacity_range: tuple = (0.3, 0.95)
    clumps: int = 0
    clump_gap: float = 0.0
    floater_fraction: float = 0.0
    floater_scale: float = 0.15
    floater_offset: float = 0.2
    detail_band: float = 0.06
    detail_density_factor: float = 3.0
    detail_scale_factor: float = 0.5
    detail_axes: tuple = (1.0, 0.1, 0.08)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown structure kind {self.kind!r}")
        if self.density <= 0 or self.scale <= 0:
            raise ConfigError("structure density and scale must be positive")
        if self.axes is None:
            self.axes = _DEFAULT_AXES[self.kind]
        self.axes = tuple(float(a) for a in self.axes)


@dataclass
class SceneSpec:
    structures: list
    noise_sigma: float = 0.0
    seed: int = 0
    sh_degree: int = 0

    def __post_init__(self):
        if not self.structures:
            raise ConfigError("a scene needs at least one structure")
        self.structures = [s if isinstance(s, Structure) else Structure(**s) for s in self.structures]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        try:
            return cls(**data)
        except TypeError as exc:
            raise FormatError(f"bad scene spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SceneTruth:
    """Ground truth that :func:`generate` can know before any split."""

    skeleton_polylines: list
    detail_labels: np.ndarray
    structure_ids: np.ndarray
    floater_labels: np.ndarray
    structure_samples: np.ndarray
    sample_spacing: float


@dataclass
class GroundTruth:
    """Sidecar for a registered/fused pair; geometry lives in A's frame."""

    transform: SimilarityTransform
    overlap_a: np.ndarray
    overlap_b: np.ndarray
    detail_a: np.ndarray
    detail_b: np.ndarray
    source_a: np.ndarray
    source_b: np.ndarray
    skeleton_polylines: list = field(default_factory=list)
    structure_samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sample_spacing: float = 0.0

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_dict(),
            "overlap_a": self.overlap_a.astype(int).tolist(),
            "overlap_b": self.overlap_b.astype(int).tolist(),
            "detail_a": self.detail_a.astype(int).tolist(),
            "detail_b": self.detail_b.astype(int).tolist(),
            "source_a": self.source_a.tolist(),
            "source_b": self.source_b.tolist(),
            "skeleton_polylines": [np.asarray(p).tolist() for p in self.skeleton_polylines],
            "structure_samples": np.asarray(self.structure_samples).tolist(),
            "sample_spacing": self.sample_spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        try:
            return cls(
                SimilarityTransform.from_dict(d["transform"]),
                np.asarray(d["overlap_a"], dtype=bool),
                np.asarray(d["overlap_b"], dtype=bool),
                np.asarray(d["detail_a"], dtype=bool),
                np.asarray(d["detail_b"], dtype=bool),
                np.asarray(d["source_a"], dtype=np.int64),
                np.asarray(d["source_b"], dtype=np.int64),
                [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in d.get("skeleton_polylines", [])],
                np.asarray(d.get("structure_samples", []), dtype=np.float64).reshape(-1, 3),
                float(d.get("sample_spacing", 0.0)),
            )
        except KeyError as exc:
            raise FormatError(f"ground-truth sidecar lacks {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- geometry

def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _complete_frame(t, hint=None):
    """Right-handed frame with first column ``t``."""
    t = _unit(t)
    if hint is None or abs(np.dot(_unit(hint), t)) > 0.999:
        hint = np.eye(3)[int(np.argmin(np.abs(t)))]
    n1 = _unit(np.asarray(hint) - np.dot(hint, t) * t)
    return np.stack([t, n1, np.cross(t, n1)], axis=1)


def _curve_params(length, clumps, gap, n, rng):
    """Arc-length parameters for ``n`` samples, optionally grouped into clumps."""
    if clumps and clumps > 1:
        clump_len = (length - (clumps - 1) * gap) / clumps
        if clump_len <= 0:
            raise ConfigError("clump gaps leave no room for the clumps")
        which = np.sort(rng.integers(0, clumps, size=n))
        s = which * (clump_len + gap) + rng.uniform(0, clump_len, size=n)
        centres = np.arange(clumps) * (clump_len + gap) + clump_len / 2
        return s, clump_len * clumps, centres
    s = (np.arange(n) + rng.uniform(0, 1, size=n)) * length / max(n, 1)
    return s, length, None


def _sample_structure(st: Structure, rng):
    """Return dict of arrays: points, frames, detail, plus polylines and clean samples."""
    g = st.geometry
    k = st.kind
    if k in ("line", "arc"):
        if k == "line":
            p0, p1 = np.asarray(g["p0"], float), np.asarray(g["p1"], float)
            length = float(np.linalg.norm(p1 - p0))
            t_dir = (p1 - p0) / length

            def at(s):
                return p0 + np.outer(s, t_dir), np.repeat(t_dir[None], len(s), 0), None
        else:
            c = np.asarray(g["center"], float)
            r = float(g["radius"])
            a0, a1 = math.radians(g["start_deg"]), math.radians(g["end_deg"])
            axis = _unit(g.get("axis", (0, 0, 1)))
            ref = np.asarray(g.get("ref", (1, 0, 0)), float)
            u = _unit(ref - np.dot(ref, axis) * axis)
            v = np.cross(axis, u)
            length = r * abs(a1 - a0)

            def at(s):
                th = a0 + np.sign(a1 - a0) * s / r
                pts = c + r * (np.outer(np.cos(th), u) + np.outer(np.sin(th), v))
                tan = np.sign(a1 - a0) * (-np.outer(np.sin(th), u) + np.outer(np.cos(th), v))
                radial = np.outer(np.cos(th), u) + np.outer(np.sin(th), v)
                return pts, tan, radial

        probe = st.clump_gap * (st.clumps - 1) if st.clumps > 1 else 0.0
        n = int(round(st.density * (length - probe)))
        s, _, centres = _curve_params(length, st.clumps, st.clump_gap, n, rng)
        pts, tan, hint = at(s)
        frames = np.stack([_complete_frame(tan[i], None if hint is None else hint[i]) for i in range(n)]) \
            if n else np.zeros((0, 3, 3))
        step = min(0.02, length / 50)
        clean_s = np.arange(0, length + 1e-12, step)
        if centres is not None:
            clean_s = np.concatenate([np.linspace(cc - (length - probe) / st.clumps / 2,
                                                  cc + (length - probe) / st.clumps / 2, 25) for cc in centres])
            poly = at(centres)[0]
        else:
            poly = at(np.linspace(0, length, max(2, int(length / step) + 1)))[0]
        return {"points": pts, "frames": frames, "detail": np.zeros(n, bool),
                "polylines": [poly], "samples": at(clean_s)[0], "spacing": 1.0 / st.density}

    if k in ("plane", "box"):
        if k == "plane":
            patches = [(np.asarray(g["center"], float), np.asarray(g["u"], float), np.asarray(g["v"], float))]
        else:
            c = np.asarray(g["center"], float)
            h = np.asarray(g["half"], float)
            R = rotation_about((0, 0, 1), g.get("yaw_deg", 0.0))
            ex, ey, ez = (R[:, i] * h[i] for i in range(3))
            patches = [(c + ez, ex, ey), (c - ez, ey, ex), (c + ey, ez, ex),
                       (c - ey, ex, ez), (c + ex, ey, ez), (c - ex, ez, ey)]
        areas = np.array([4 * np.linalg.norm(u) * np.linalg.norm(v) for _, u, v in patches])
        n_total = int(round(st.density * areas.sum()))
        counts = np.floor(n_total * areas / areas.sum()).astype(int)
        counts[: n_total - counts.sum()] += 1
        pts, frames, samples, polylines = [], [], [], []
        spacing = 1.0 / math.sqrt(st.density)
        for (c, u, v), m in zip(patches, counts):
            ab = rng.uniform(-1, 1, size=(m, 2))
            pts.append(c + ab[:, :1] * u + ab[:, 1:] * v)
            fr = _complete_frame(u, v)
            frames.append(np.repeat(fr[None], m, 0))
            nu = max(2, int(2 * np.linalg.norm(u) / spacing) + 1)
            nv = max(2, int(2 * np.linalg.norm(v) / spacing) + 1)
            A, B = np.meshgrid(np.linspace(-1, 1, nu), np.linspace(-1, 1, nv), indexing="ij")
            samples.append(c + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v)
            polylines.append(c + np.linspace(-1, 1, nu)[:, None] * u)
        return {"points": np.concatenate(pts), "frames": np.concatenate(frames),
                "detail": np.zeros(n_total, bool), "polylines": polylines[:1] if k == "plane" else [],
                "samples": np.concatenate(samples), "spacing": spacing}

    # ridge: two wings meeting at a fold line along u
    c = np.asarray(g["center"], float)
    u = np.asarray(g["u"], float)
    v = np.asarray(g["v"], float)
    ul, vl = np.linalg.norm(u), np.linalg.norm(v)
    uh = u / ul
    vh = _unit(v - np.dot(v, uh) * uh)
    nh = np.cross(uh, vh)
    rise = math.radians((180.0 - float(g.get("fold_deg", 90.0))) / 2)
    wings = [math.cos(rise) * vh - math.sin(rise) * nh, -math.cos(rise) * vh - math.sin(rise) * nh]
    band = min(st.detail_band, vl)
    n_flat = int(round(st.density * 2 * ul * (vl - band) * 2))
    n_band = int(round(st.density * st.detail_density_factor * 2 * ul * band * 2))
    pts, frames, detail = [], [], []
    for count, lo, hi, is_detail in ((n_flat, band, vl, False), (n_band, 0.0, band, True)):
        side = rng.integers(0, 2, size=count)
        a = rng.uniform(-1, 1, size=count) * ul
        b = rng.uniform(lo, hi, size=count)
        w = np.where(side[:, None] == 0, wings[0], wings[1])
        pts.append(c + a[:, None] * uh + b[:, None] * w)
        fr = np.stack([np.stack([uh, wi, np.cross(uh, wi)], axis=1) for wi in wings])
        frames.append(fr[side])
        detail.append(np.full(count, is_detail))
    spacing = 1.0 / math.sqrt(st.density)
    nu = max(2, int(2 * ul / spacing) + 1)
    nb = max(2, int(vl / spacing) + 1)
    A, B = np.meshgrid(np.linspace(-ul, ul, nu), np.linspace(0, vl, nb), indexing="ij")
    samples = [c + A.reshape(-1, 1) * uh + B.reshape(-1, 1) * wi for wi in wings]
    return {"points": np.concatenate(pts), "frames": np.concatenate(frames),
            "detail": np.concatenate(detail),
            "polylines": [c + np.linspace(-ul, ul, nu)[:, None] * uh],
            "samples": np.concatenate(samples), "spacing": spacing}


def generate(spec: SceneSpec):
    """Sample a scene. Returns ``(model, SceneTruth)``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    means, logs, quats, opac, det, sid, floaters = [], [], [], [], [], [], []
    polylines, samples, spacings = [], [], []
    for idx, st in enumerate(spec.structures):
        smp = _sample_structure(st, rng)
        pts, frames, detail = smp["points"], smp["frames"], smp["detail"]
        n = len(pts)
        axes = np.tile(np.asarray(st.axes) * st.scale, (n, 1))
        if detail.any():
            axes[detail] = np.asarray(st.detail_axes) * st.scale * st.detail_scale_factor
        axes *= np.exp(rng.normal(0, 0.1, size=(n, 3)))
        lo, hi = st.opacity_range
        op = rng.uniform(lo, hi, size=n)
        is_floater = np.zeros(n, bool)
        nf = int(round(st.floater_fraction * n))
        if nf:
            pick = rng.choice(n, size=nf, replace=False)
            is_floater[pick] = True
            dirs = rng.normal(size=(nf, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            pts = pts.copy()
            pts[pick] += dirs * st.floater_offset * rng.uniform(0.5, 1.5, size=(nf, 1))
            axes[pick] = st.floater_scale * np.array([1.0, 0.9, 0.8]) * np.exp(rng.normal(0, 0.1, size=(nf, 3)))
            op[pick] = rng.uniform(0.05, 0.3, size=nf)
        means.append(pts)
        logs.append(np.log(axes))
        quats.append(matrix_to_quat(frames) if n else np.zeros((0, 4)))
        opac.append(np.log(op / (1 - op)))
        det.append(detail & ~is_floater)
        sid.append(np.full(n, idx))
        floaters.append(is_floater)
        polylines.extend(smp["polylines"])
        samples.append(smp["samples"])
        spacings.append(smp["spacing"])
    means = np.concatenate(means)
    n = len(means)
    if spec.noise_sigma > 0:
        means = means + rng.normal(0, spec.noise_sigma, size=means.shape)
    k = sh_coeff_count(spec.sh_degree)
    model = GaussianModel(
        means, np.concatenate(logs), np.concatenate(quats), np.concatenate(opac),
        rng.normal(0, 0.5, size=(n, 3)), rng.normal(0, 0.05, size=(n, k, 3)),
    )
    truth = SceneTruth(polylines, np.concatenate(det), np.concatenate(sid), np.concatenate(floaters),
                       np.concatenate(samples), float(np.median(spacings)))
    return model, truth


def split_pair(model: GaussianModel, overlap_fraction: float, transform: SimilarityTransform,
               noise_sigma: float = 0.0, seed: int = 0, truth: SceneTruth | None = None,
               axis=None, coarsen_detail_in_a: bool = False, coarsen_keep: int = 4):
    """Cut ``model`` into overlapping sub-maps A and B.

    Primitives are ordered along ``axis`` (default: principal axis); A takes
    the lower ``(1+f)/2`` share and B the upper one, so a fraction ``f`` is
    shared. ``transform`` is the ground-truth map from B's frame into A's; B
    is stored in its own frame (``transform.inverse()`` applied) with
    Gaussian noise on the means.

    With ``coarsen_detail_in_a`` the detail-labelled Gaussians inside A are
    thinned to one in ``coarsen_keep`` and blurred into round blobs, planting
    a region where only B carries the fine structure.

    Returns ``(A, B, GroundTruth)``.
    """
    if not 0 < overlap_fraction < 1:
        raise ConfigError(f"overlap_fraction must be in (0, 1), got {overlap_fraction}")
    n = len(model)
    rng = np.random.default_rng(seed)
    means = model.means
    if axis is None:
        centred = means - means.mean(axis=0)
        axis = np.linalg.eigh(centred.T @ centred)[1][:, -1]
    proj = means @ _unit(axis)
    order = np.argsort(proj, kind="stable")
    n_side = int(round(n * (1 + overlap_fraction) / 2))
    a_idx = np.sort(order[:n_side])
    b_idx = np.sort(order[n - n_side:])
    if len(a_idx) == 0 or len(b_idx) == 0 or n_side >= n:
        raise DegenerateInputError("split leaves one side empty or swallows the whole scene")
    shared = np.zeros(n, bool)
    shared[order[n - n_side:n_side]] = True

    detail = truth.detail_labels if truth is not None else np.zeros(n, bool)
    A = model.subset(a_idx)
    detail_a = detail[a_idx].copy()
    source_a = a_idx.copy()
    if coarsen_detail_in_a and detail_a.any():
        hits = np.flatnonzero(detail_a)
        keep = np.ones(len(a_idx), bool)
        keep[hits] = False
        kept = hits[::coarsen_keep]
        keep[kept] = True
        logs = A.log_scales.copy()
        blob = np.log(np.exp(logs[kept]).max(axis=1) * 1.5)
        logs[kept] = blob[:, None] + np.log([1.0, 0.95, 0.9])
        A = GaussianModel(A.means, logs, A.rotations, A.opacity_logits, A.sh_dc, A.sh_rest).subset(np.flatnonzero(keep))
        detail_a[:] = False
        detail_a = detail_a[keep]
        source_a = source_a[keep]

    B = apply_transform(model.subset(b_idx), transform.inverse())
    if noise_sigma > 0:
        B = GaussianModel(B.means + rng.normal(0, noise_sigma, size=B.means.shape), B.log_scales,
                          B.rotations, B.opacity_logits, B.sh_dc, B.sh_rest)
    gt = GroundTruth(
        transform=transform,
        overlap_a=shared[source_a],
        overlap_b=shared[b_idx],
        detail_a=detail_a,
        detail_b=detail[b_idx].copy(),
        source_a=source_a,
        source_b=b_idx.copy(),
        skeleton_polylines=list(truth.skeleton_polylines) if truth is not None else [],
        structure_samples=truth.structure_samples if truth is not None else np.zeros((0, 3)),
        sample_spacing=truth.sample_spacing if truth is not None else 0.0,
    )
    return A, B, gt


# ---------------------------------------------------------------- presets

def random_transform(rng, max_deg: float = 30.0, scale_range=(0.9, 1.1), max_shift: float = 1.0):
    axis = rng.normal(size=3)
    R = rotation_about(axis, rng.uniform(-max_deg, max_deg))
    return SimilarityTransform(R, rng.uniform(-max_shift, max_shift, size=3), rng.uniform(*scale_range))


def random_scene_spec(seed: int, extent: float = 3.0, n_structures: int = 10,
                      surface_density: float = 300.0, curve_density: float = 40.0,
                      noise_sigma: float = 0.0) -> SceneSpec:
    """A cluttered room-like scene of mixed structures inside a cube of side ``extent``."""
    rng = np.random.default_rng(seed)
    structures = []
    kinds = ["plane", "box", "line", "arc", "ridge"]
    for i in range(n_structures):
        kind = kinds[i % len(kinds)] if i < len(kinds) else kinds[rng.integers(len(kinds))]
        c = rng.uniform(-extent / 2, extent / 2, size=3)
        if kind == "line":
            d = rng.normal(size=3)
            d *= rng.uniform(0.5, 1.2) * extent / 2 / np.linalg.norm(d)
            geo = {"p0": (c - d).tolist(), "p1": (c + d).tolist()}
            dens = curve_density
        elif kind == "arc":
            a0 = rng.uniform(0, 180)
            geo = {"center": c.tolist(), "radius": float(rng.uniform(0.3, 0.8) * extent / 2),
                   "start_deg": a0, "end_deg": a0 + rng.uniform(90, 240), "axis": rng.normal(size=3).tolist()}
            dens = curve_density
        elif kind == "plane":
            u = rng.normal(size=3)
            u *= rng.uniform(0.2, 0.5) * extent / np.linalg.norm(u)
            v = np.cross(u, rng.normal(size=3))
            v *= rng.uniform(0.15, 0.4) * extent / np.linalg.norm(v)
            geo = {"center": c.tolist(), "u": u.tolist(), "v": v.tolist()}
            dens = surface_density
        elif kind == "box":
            geo = {"center": c.tolist(), "half": (rng.uniform(0.08, 0.2, size=3) * extent).tolist(),
                   "yaw_deg": float(rng.uniform(0, 90))}
            dens = surface_density
        else:
            u = rng.normal(size=3)
            u *= rng.uniform(0.2, 0.4) * extent / np.linalg.norm(u)
            v = np.cross(u, rng.normal(size=3))
            v *= rng.uniform(0.1, 0.2) * extent / np.linalg.norm(v)
            geo = {"center": c.tolist(), "u": u.tolist(), "v": v.tolist(), "fold_deg": float(rng.uniform(60, 120))}
            dens = surface_density
        structures.append(Structure(kind, geo, dens, scale=1.2 / math.sqrt(surface_density)))
    return SceneSpec(structures, noise_sigma=noise_sigma, seed=seed)


def planted_ridge_spec(seed: int, noise_sigma: float = 0.0) -> SceneSpec:
    """Floor, wall, rail and a sharp ridge straddling ``x = 0``.

    Split along x with :func:`split_pair`, the ridge lands in the shared band.
    """
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-0.05, 0.05, size=3)
    scale = 0.07
    return SceneSpec([
        Structure("plane", {"center": [0, 0, -0.6], "u": [1.5, 0, 0], "v": [0, 0.8, 0]}, 300.0, scale=scale),
        Structure("plane", {"center": [0, 0.8, 0], "u": [1.5, 0, 0], "v": [0, 0, 0.6]}, 300.0, scale=scale),
        Structure("line", {"p0": [-1.4, -0.6, 0.3], "p1": [1.4, -0.5, 0.4]}, 40.0, scale=scale),
        Structure("ridge", {"center": (np.array([0.0, 0.0, 0.1]) + jitter).tolist(), "u": [0, 0.5, 0],
                            "v": [0.3, 0, 0], "fold_deg": float(rng.uniform(50, 80))},
                  300.0, scale=scale, detail_band=0.08, detail_density_factor=3.0),
    ], noise_sigma=noise_sigma, seed=seed)


def planted_ridge_pair(seed: int, noise_sigma: float = 0.0, overlap_fraction: float = 0.5,
                       transform: SimilarityTransform | None = None):
    """A/B pair whose ridge detail survives only in B (A's copy is coarsened)."""
    model, truth = generate(planted_ridge_spec(seed))
    if transform is None:
        transform = random_transform(np.random.default_rng(seed + 7919))
    return split_pair(model, overlap_fraction, transform, noise_sigma=noise_sigma, seed=seed,
                      truth=truth, axis=(1.0, 0.0, 0.0), coarsen_detail_in_a=True)
