"""Procedural vessel maps, guidewire shapes, fluoroscopy-like renders and stratified datasets.

Coordinates are normalised to the unit square with ``y`` pointing down, so a
point ``(x, y)`` lands on pixel column ``x * W`` and row ``y * H``.
"""

import hashlib
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .bspline import SplineCurve, fit_spline, polyline_length, resample_polyline, sample_equal_chord
from .errors import DomainError

BRANCHES = ("none", "bca", "lcca")
LENGTH_BUCKETS = ("short", "long")
CONTRASTS = (0.3, 0.6, 0.9)
TIP_TYPES = ("angled", "straight")
STRATA = list(itertools.product(BRANCHES, LENGTH_BUCKETS, CONTRASTS, TIP_TYPES))

TRUNK_RADIUS = 0.04
BRANCH_RADIUS = 0.025
BRANCH_LENGTH = 0.22
JITTER_FRACTION = 0.3  # of the narrowest lumen radius on the route
MAX_OFFSET_FRACTION = 0.5  # jitter plus tip bend
TIP_BEND_LENGTH = 0.025
TIP_BEND_ANGLE = math.radians(20.0)
ROUTE_SPACING = 0.002
WIRE_SPACING = 0.005
CONTROL_SPACING = 0.05

# Arch anchors: up the descending side from the bottom edge, over the apex, down the other side.
TRUNK_ANCHORS = np.array([
    [0.70, 0.98], [0.70, 0.75], [0.68, 0.52], [0.60, 0.38], [0.48, 0.33],
    [0.37, 0.38], [0.30, 0.52], [0.29, 0.75], [0.31, 0.95],
])
# name: (trunk arc-length fraction, takeoff angle in degrees)
BRANCH_LAYOUT = {"bca": (0.50, 35.0), "lcca": (0.62, 70.0)}
# tip position ranges per length bucket: trunk fraction without a branch, branch fraction with one
INSERTION_RANGES = {
    ("none", "short"): (0.10, 0.45), ("none", "long"): (0.55, 0.75),
    ("branch", "short"): (0.20, 0.50), ("branch", "long"): (0.60, 0.95),
}


def _arclength(points):
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])


def _interp(points, s, at):
    return np.column_stack([np.interp(at, s, points[:, 0]), np.interp(at, s, points[:, 1])])


def _normals(points):
    d = np.gradient(points, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.column_stack([-d[:, 1], d[:, 0]])


def _rotate(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def point_segment_distance(points, polyline):
    """Distance from each point to the nearest segment of ``polyline``."""
    points = np.asarray(points, dtype=np.float64)
    a, b = polyline[:-1], polyline[1:]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    best = np.full(len(points), np.inf)
    for start in range(0, len(points), 2048):
        p = points[start:start + 2048, None, :]
        t = np.clip(np.sum((p - a) * ab, axis=2) / denom, 0.0, 1.0)
        d = np.linalg.norm(p - (a + t[..., None] * ab), axis=2)
        best[start:start + 2048] = d.min(axis=1)
    return best


@dataclass(eq=False)
class VesselMap:
    """Centerlines (dense polylines) with lumen radii; branches attach to the trunk."""
    centerlines: dict
    lumen_radius: dict
    attach_index: dict
    takeoff_deg: dict
    seed: int = 0
    _tint_cache: dict = field(default_factory=dict, repr=False)

    def vessel_tint(self, h, w):
        """Per-pixel vessel opacity in [0, 1]: 1 inside the lumen, fading over half a radius."""
        if (h, w) not in self._tint_cache:
            centers = pixel_centers(h, w)
            tint = np.zeros(h * w)
            for name, line in self.centerlines.items():
                d = point_segment_distance(centers, line) / self.lumen_radius[name]
                tint = np.maximum(tint, np.clip(1.5 - d, 0.0, 1.0))
            self._tint_cache[(h, w)] = tint.reshape(h, w)
        return self._tint_cache[(h, w)]

    @property
    def trunk(self):
        return self.centerlines["trunk"]

    def arclength(self, name):
        return _arclength(self.centerlines[name])

    def trunk_fraction_point(self, fraction):
        s = self.arclength("trunk")
        return _interp(self.trunk, s, [fraction * s[-1]])[0]

    def attach_fraction(self, branch):
        s = self.arclength("trunk")
        return s[self.attach_index[branch]] / s[-1]

    def route(self, branch="none"):
        """Dense polyline the wire follows: the whole trunk, or the trunk to a branch then the branch.

        The corner at the junction is rounded by a short moving average.
        """
        if branch not in BRANCHES:
            raise DomainError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
        if branch == "none":
            return self.trunk.copy()
        k = self.attach_index[branch]
        pts = np.vstack([self.trunk[:k + 1], self.centerlines[branch][1:]])
        pts = resample_polyline(pts, spacing=ROUTE_SPACING)
        junction = int(round(_arclength(self.trunk[:k + 1])[-1] / ROUTE_SPACING))
        half = int(round(0.6 * BRANCH_RADIUS / ROUTE_SPACING))
        smooth = pts.copy()
        for i in range(max(junction - 2 * half, half), min(junction + 2 * half, len(pts) - half)):
            smooth[i] = pts[i - half:i + half + 1].mean(axis=0)
        return smooth

    def in_lumen(self, points):
        """True where a point lies within the lumen of any vessel."""
        inside = np.zeros(len(points), dtype=bool)
        for name, line in self.centerlines.items():
            inside |= point_segment_distance(points, line) <= self.lumen_radius[name]
        return inside

    def to_dict(self):
        return {
            "seed": self.seed,
            "centerlines": {k: v.tolist() for k, v in self.centerlines.items()},
            "lumen_radius": dict(self.lumen_radius),
            "attach_index": dict(self.attach_index),
            "takeoff_deg": dict(self.takeoff_deg),
        }


def gen_vessel_map(seed=0):
    """Aortic-arch analog with two upward branches; seed 0 gives the canonical layout."""
    rng = np.random.default_rng(seed)
    anchors = TRUNK_ANCHORS.copy()
    if seed:
        anchors[1:-1] += rng.uniform(-0.015, 0.015, anchors[1:-1].shape)
    dense = resample_polyline(anchors, spacing=0.01)
    arch = fit_spline(dense, n_ctrl=8, iterations=0)
    trunk = sample_equal_chord(arch, int(round(polyline_length(dense) / ROUTE_SPACING)) + 1)
    s = _arclength(trunk)
    centerlines = {"trunk": trunk}
    radius = {"trunk": TRUNK_RADIUS}
    attach, takeoff = {}, {}
    up = np.array([0.0, -1.0])
    for name, (frac, angle) in BRANCH_LAYOUT.items():
        if seed:
            frac += rng.uniform(-0.02, 0.02)
            angle += rng.uniform(-5.0, 5.0)
        k = int(np.argmin(np.abs(s - frac * s[-1])))
        tangent = trunk[min(k + 1, len(trunk) - 1)] - trunk[max(k - 1, 0)]
        tangent /= np.linalg.norm(tangent)
        # turn from the trunk tangent toward "up" by the takeoff angle
        sign = np.sign(tangent[0] * up[1] - tangent[1] * up[0]) or 1.0
        heading0 = math.atan2(*_rotate(tangent, sign * math.radians(angle))[::-1])
        heading1 = math.atan2(up[1], up[0])
        if abs(heading1 - heading0) > math.pi:
            heading1 -= math.copysign(2 * math.pi, heading1 - heading0)
        n = int(round(BRANCH_LENGTH / ROUTE_SPACING))
        # heading relaxes halfway toward vertical along the branch
        h = heading0 + 0.5 * (heading1 - heading0) * np.linspace(0.0, 1.0, n) ** 2
        steps = ROUTE_SPACING * np.column_stack([np.cos(h), np.sin(h)])
        centerlines[name] = np.vstack([trunk[k], trunk[k] + np.cumsum(steps, axis=0)])
        radius[name] = BRANCH_RADIUS
        attach[name] = k
        takeoff[name] = angle
    return VesselMap(centerlines, radius, attach, takeoff, seed)


def _jitter(s, rng, amplitude):
    """Smooth transverse offset as a function of absolute arc length, bounded by ``amplitude``."""
    wavelengths = rng.uniform(0.12, 0.45, 3)
    phases = rng.uniform(0, 2 * np.pi, 3)
    weights = rng.dirichlet(np.ones(3))
    return amplitude * sum(w * np.sin(2 * np.pi * s / lam + ph)
                           for w, lam, ph in zip(weights, wavelengths, phases))


def wire_polyline(vmap, insertion, branch="none", seed=0, jitter=1.0, angled_tip=False):
    """Dense wire polyline from the tip back to the entry point."""
    if not 0.0 < insertion <= 1.0:
        raise DomainError(f"insertion must lie in (0, 1], got {insertion}")
    route = vmap.route(branch)
    s = _arclength(route)
    s_tip = insertion * s[-1]
    at = np.append(np.arange(0.0, s_tip, ROUTE_SPACING), s_tip)
    pts = _interp(route, s, at)
    normals = _normals(pts)
    rng = np.random.default_rng(seed)
    r_min = min(vmap.lumen_radius["trunk"], vmap.lumen_radius.get(branch, np.inf))
    offset = _jitter(at, rng, jitter * JITTER_FRACTION * r_min)
    if angled_tip:
        side = rng.choice([-1.0, 1.0])
        curvature = TIP_BEND_ANGLE / TIP_BEND_LENGTH
        bend = np.clip(at - (s_tip - TIP_BEND_LENGTH), 0.0, None)
        offset = offset + side * 0.5 * curvature * bend ** 2
    limit = MAX_OFFSET_FRACTION * r_min
    offset = np.clip(offset, -limit, limit)
    wire = pts + offset[:, None] * normals
    return wire[::-1]


def gen_guidewire(vmap, insertion, branch="none", seed=0, jitter=1.0, angled_tip=False, max_ctrl=24):
    """Ground-truth wire spline fitted to the wire polyline, with uniform interior knots.

    The control count is one per ``CONTROL_SPACING`` of wire length, at least 4
    and at most ``max_ctrl``; the first control point is the tip.
    """
    wire = resample_polyline(wire_polyline(vmap, insertion, branch, seed, jitter, angled_tip),
                             spacing=WIRE_SPACING)
    n_ctrl = int(np.clip(round(polyline_length(wire) / CONTROL_SPACING), 4, max_ctrl))
    rough = fit_spline(wire, n_ctrl=n_ctrl)
    # refit equal-chord samples so the knots are exactly uniform, as any later refit will find them
    return fit_spline(sample_equal_chord(rough, len(wire)), n_ctrl=n_ctrl)


# rendering ----------------------------------------------------------------

def pixel_centers(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return np.column_stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h])


def background(vmap, h, w, noise_sigma=0.02, seed=0):
    """Smooth field, darker inside the vessels, plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    centers = pixel_centers(h, w)
    x, y = centers[:, 0], centers[:, 1]
    field_ = 0.75 + 0.05 * np.cos(2 * np.pi * (rng.uniform(0.3, 1.2) * x + rng.uniform()))
    field_ += 0.04 * np.cos(2 * np.pi * (rng.uniform(0.3, 1.2) * y + rng.uniform()))
    img = field_.reshape(h, w) - 0.08 * vmap.vessel_tint(h, w)
    return img + noise_sigma * rng.standard_normal((h, w))


def wire_coverage(polyline, h, w, width_px=1.5):
    """Anti-aliased coverage in [0, 1] of a ``width_px`` wide line along ``polyline``."""
    centers = pixel_centers(h, w) * [w, h]
    poly = np.asarray(polyline, dtype=np.float64) * [w, h]
    reach = 0.5 * width_px + 0.5
    # a point within ``reach`` of a segment is within reach + half its length of a vertex
    half_seg = 0.5 * np.linalg.norm(np.diff(poly, axis=0), axis=1).max() if len(poly) > 1 else 0.0
    near = cKDTree(poly).query(centers, distance_upper_bound=reach + half_seg + 1e-9)[0] < np.inf
    cover = np.zeros(h * w)
    if near.any():
        d = point_segment_distance(centers[near], poly) if len(poly) > 1 else \
            np.linalg.norm(centers[near] - poly[0], axis=1)
        cover[near] = np.clip(reach - d, 0.0, 1.0)
    return cover.reshape(h, w)


def render(vmap, wire, h=64, w=64, contrast=0.6, noise_sigma=0.02, seed=0, n_points=200):
    """Fluoroscopy-like frame: background with the wire darkened by ``contrast`` times its coverage.

    ``wire`` is a SplineCurve or a polyline; parts outside the frame simply
    cover no pixel.
    """
    if not 0.0 < contrast <= 1.0:
        raise DomainError(f"contrast must lie in (0, 1], got {contrast}")
    if noise_sigma < 0:
        raise DomainError("noise_sigma must be non-negative")
    poly = sample_equal_chord(wire, n_points) if isinstance(wire, SplineCurve) else np.asarray(wire)
    img = background(vmap, h, w, noise_sigma, seed) - contrast * wire_coverage(poly, h, w)
    return np.clip(img, 0.0, 1.0)


# files ----------------------------------------------------------------------

def write_pgm(path, image):
    """8-bit binary PGM from intensities in [0, 1]."""
    img = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    """Intensities in [0, 1] from an 8-bit binary PGM."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DomainError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w) / 255.0


# datasets -------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    truth: SplineCurve
    polyline: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SynthConfig:
    n: int = 512
    seed: int = 0
    image_size: int = 64
    noise_sigma: float = 0.02
    map_seed: int = 0
    max_ctrl: int = 24
    polyline_points: int = 200

    def __post_init__(self):
        if self.n < 10:
            raise DomainError(f"dataset needs at least 10 samples, got {self.n}")

    def to_dict(self):
        return asdict(self)


def stratum_and_split(index, seed=0):
    """Stratum and split of sample ``index``.

    Samples come in blocks of 10 sharing a stratum, split 8/1/1 within the
    block, so every stratum has the same share of each split. The order in
    which strata are visited is a seeded permutation.
    """
    order = np.random.default_rng([seed, 7919]).permutation(len(STRATA))
    block, pos = divmod(index, 10)
    stratum = STRATA[order[block % len(STRATA)]]
    split = "train" if pos < 8 else ("val" if pos == 8 else "test")
    return stratum, split


def make_sample(vmap, index, config):
    (branch, bucket, contrast, tip), split = stratum_and_split(index, config.seed)
    rng = np.random.default_rng([config.seed, index])
    lo, hi = INSERTION_RANGES[("none" if branch == "none" else "branch", bucket)]
    depth = rng.uniform(lo, hi)
    if branch == "none":
        insertion = depth
    else:
        s_attach = vmap.arclength("trunk")[vmap.attach_index[branch]]
        s_branch = vmap.arclength(branch)[-1]
        insertion = (s_attach + depth * s_branch) / (s_attach + s_branch)
    wire_seed, render_seed = (int(x) for x in rng.integers(0, 2 ** 31, 2))
    truth = gen_guidewire(vmap, insertion, branch, wire_seed, angled_tip=tip == "angled",
                          max_ctrl=config.max_ctrl)
    polyline = sample_equal_chord(truth, config.polyline_points)
    image = render(vmap, polyline, config.image_size, config.image_size, contrast,
                   config.noise_sigma, render_seed)
    meta = {"index": index, "seed": wire_seed, "render_seed": render_seed, "branch": branch,
            "length_bucket": bucket, "contrast": contrast, "tip_type": tip, "split": split,
            "insertion": float(insertion)}
    return Sample(image, truth, polyline, meta)


def make_dataset(out_dir, config=SynthConfig(), workers=1):
    """Write images, annotations, ``manifest.jsonl`` and ``config.json``; return the manifest entries.

    Samples are independent; ``workers > 1`` renders them on a thread pool.
    Output does not depend on the worker count.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    vmap = gen_vessel_map(config.map_seed)
    vmap.vessel_tint(config.image_size, config.image_size)
    entries = []
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        samples = pool.map(lambda i: make_sample(vmap, i, config), range(config.n))
        for i, sample in enumerate(samples):
            entries.append(_write_sample(out, i, sample))
    with open(out / "manifest.jsonl", "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return entries


def _write_sample(out, i, sample):
    name = f"{i:05d}"
    write_pgm(out / "images" / f"{name}.pgm", sample.image)
    meta = {k: sample.meta[k] for k in ("seed", "branch", "length_bucket", "contrast", "tip_type")}
    annotation = {"spline": sample.truth.to_dict(), "polyline": sample.polyline.tolist(), "meta": meta}
    (out / "annotations" / f"{name}.json").write_text(json.dumps(annotation))
    return {
        "image": f"images/{name}.pgm", "annotation": f"annotations/{name}.json",
        "split": sample.meta["split"],
        "strata": {k: sample.meta[k] for k in ("branch", "length_bucket", "contrast", "tip_type")},
    }


def manifest_hash(out_dir):
    return hashlib.sha256((Path(out_dir) / "manifest.jsonl").read_bytes()).hexdigest()


def load_dataset(data_dir, split=None):
    """``(images (N, H, W), truth curves, manifest entries)`` for one split or all."""
    data_dir = Path(data_dir)
    entries = [json.loads(line) for line in (data_dir / "manifest.jsonl").read_text().splitlines() if line]
    if split is not None:
        entries = [e for e in entries if e["split"] == split]
    images = np.stack([read_pgm(data_dir / e["image"]) for e in entries]) if entries else np.zeros((0, 0, 0))
    curves = [SplineCurve.from_dict(json.loads((data_dir / e["annotation"]).read_text())["spline"])
              for e in entries]
    return images, curves, entries


def dataset_config(data_dir):
    return SynthConfig(**json.loads((Path(data_dir) / "config.json").read_text()))
