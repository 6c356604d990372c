# Module containing the synthetic multi-view scene generator

import logging
import os
import shutil
import tempfile
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from mvsadapt import fileio
from mvsadapt.geometry import (DepthHypotheses, Intrinsics, PosedImage, Pose, Camera,
                               backproject, pixel_rays, project)
from mvsadapt.metatta import SceneSample
from mvsadapt.prototypes import InvalidDepthWarning
from mvsadapt.utils import scene_seed

logger = logging.getLogger(__name__)

LAYOUTS = ('fronto', 'slanted', 'step', 'box')
MIN_COVERAGE = 0.7
MAX_ATTEMPTS = 20
LATTICE = 64
BACKGROUND = 0.0


@dataclass(frozen=True)
class SceneSpec:
    """
    Recipe of a synthetic scene family.

    Parameters
    ----------
    seed : int
        Dataset seed; scene seeds derive from it.
    layout : str
        One of 'fronto', 'slanted', 'step', 'box'.
    texture_octaves : int
        Octaves of value noise.
    texture_frequency : float
        Base noise frequency in cycles per scene unit.
    checker : bool
        Overlay a checker pattern.
    ring_radius : float
        Radius of the source camera ring around the reference camera.
    look_at_jitter : float
        Standard deviation of the source look-at target perturbation.
    d_min, d_max : float
        Depth hypothesis range.
    height, width : int
        Image size.
    hypotheses : int
        Depth hypothesis count D.
    n_views : int
        Views used for depth prediction (reference included).
    m_views : int
        Source views per scene.
    brightness_jitter : float
        Half-width of a uniform additive brightness offset per source view.
    """
    seed: int = 0
    layout: str = 'fronto'
    texture_octaves: int = 3
    texture_frequency: float = 0.75
    checker: bool = False
    ring_radius: float = 0.5
    look_at_jitter: float = 0.05
    d_min: float = 2.0
    d_max: float = 6.0
    height: int = 32
    width: int = 48
    hypotheses: int = 16
    n_views: int = 3
    m_views: int = 4
    brightness_jitter: float = 0.0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"'layout' must be one of {LAYOUTS}, got {self.layout!r}.")
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"Depth range must satisfy 0 < d_min < d_max, got {self.d_min}, {self.d_max}.")
        if self.height < 8 or self.width < 8:
            raise ValueError(f'Images must be at least 8x8, got {self.height}x{self.width}.')
        if self.m_views < 1 or self.n_views < 2 or self.n_views > self.m_views + 1:
            raise ValueError(f"Need m_views >= 1 and 2 <= n_views <= m_views + 1, "
                             f"got n_views={self.n_views}, m_views={self.m_views}.")
        if self.hypotheses < 1 or self.texture_octaves < 1:
            raise ValueError("'hypotheses' and 'texture_octaves' must be positive.")
        if self.ring_radius <= 0 or self.look_at_jitter < 0 or self.brightness_jitter < 0:
            raise ValueError('Camera ring and jitter settings must be nonnegative (radius positive).')

    @property
    def hyps(self):
        return DepthHypotheses(self.d_min, self.d_max, self.hypotheses)

    @property
    def intrinsics(self):
        return Intrinsics.from_focal(float(self.width), float(self.width),
                                     (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def to_dict(self):
        return asdict(self)


class Patch:
    """
    Planar surface n . x = offset, limited to an axis-aligned world box.
    """

    def __init__(self, normal, offset, lower=(-np.inf,) * 3, upper=(np.inf,) * 3):
        normal = np.asarray(normal, dtype=np.float64)
        self.normal = normal / np.linalg.norm(normal)
        self.offset = float(offset) / np.linalg.norm(normal)
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)

    def intersect(self, origin, directions):
        """
        Ray parameters of the hits (inf where missed). With directions of
        unit camera depth the parameter is the camera-frame depth.
        """
        denom = directions @ self.normal
        with np.errstate(divide='ignore', invalid='ignore'):
            t = (self.offset - origin @ self.normal) / denom
        ok = np.abs(denom) > 1e-12
        ok &= t > 1e-9
        points = origin + t[:, None] * directions
        tol = 1e-9
        ok &= np.all((points >= self.lower - tol) & (points <= self.upper + tol), axis=1)
        return np.where(ok, t, np.inf)


class ValueNoise:
    """
    Seeded multi-octave 3D value noise with an optional checker overlay,
    evaluated at world points; one lattice per colour channel.
    """

    def __init__(self, seed, octaves, frequency, checker=False):
        rng = np.random.default_rng(seed)
        self.lattices = rng.random((3, octaves, LATTICE, LATTICE, LATTICE))
        self.offsets = rng.uniform(0, LATTICE, size=(octaves, 3))
        self.frequency = frequency
        self.checker = checker

    @staticmethod
    def _trilinear(lattice, coords):
        base = np.floor(coords)
        frac = coords - base
        frac = frac * frac * (3.0 - 2.0 * frac)
        base = base.astype(np.int64)
        out = np.zeros(len(coords))
        for corner in range(8):
            bits = np.array([(corner >> k) & 1 for k in range(3)])
            idx = (base + bits) % LATTICE
            weight = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
            out += weight * lattice[idx[:, 0], idx[:, 1], idx[:, 2]]
        return out

    def __call__(self, points):
        octaves = self.lattices.shape[1]
        colour = np.zeros((len(points), 3))
        norm = 0.0
        for o in range(octaves):
            amp = 0.5 ** o
            coords = points * self.frequency * 2 ** o + self.offsets[o]
            for c in range(3):
                colour[:, c] += amp * self._trilinear(self.lattices[c, o], coords)
            norm += amp
        colour = 0.1 + 0.8 * colour / norm
        if self.checker:
            cells = np.floor(points * self.frequency * 2).astype(np.int64).sum(axis=1) % 2
            colour = 0.75 * colour + 0.25 * cells[:, None]
        return np.clip(colour, 0.0, 1.0)


class SceneGeometry:
    """
    Patches plus texture; the closest hit along a ray wins.
    """

    def __init__(self, patches, texture, solids=()):
        self.patches = list(patches)
        self.texture = texture
        self.solids = list(solids)

    def contains(self, point):
        point = np.asarray(point, dtype=np.float64)
        return any(np.all(point > lower) and np.all(point < upper) for lower, upper in self.solids)

    def cast(self, origin, directions):
        hits = np.stack([p.intersect(origin, directions) for p in self.patches])
        return hits.min(axis=0)


def render_view(geometry, camera, height, width):
    """
    Ray-casts one view.

    Returns
    -------
    image : np.ndarray
        (H, W, 3) quantised to multiples of 1/255, background where missed.
    depth : np.ndarray
        (H, W) camera-frame depth, 0 where missed.
    hit : np.ndarray
        (H, W) float mask of pixels that see geometry.
    """
    intrinsics, pose = camera
    center = pose.center
    if geometry.contains(center):
        raise ValueError(f'Camera at {center.tolist()} lies inside the scene geometry.')
    directions = pixel_rays(Camera(intrinsics, pose), height, width)
    t = geometry.cast(center, directions)
    hit = np.isfinite(t)
    image = np.full((height * width, 3), BACKGROUND)
    if hit.any():
        image[hit] = geometry.texture(center + t[hit, None] * directions[hit])
    image = np.round(image * 255.0) / 255.0
    depth = np.where(hit, t, 0.0)
    return (image.reshape(height, width, 3), depth.reshape(height, width),
            hit.reshape(height, width).astype(np.float64))


def _build_geometry(spec, rng, texture_seed):
    span = spec.d_max - spec.d_min
    near, far = spec.d_min + 0.25 * span, spec.d_max - 0.25 * span
    texture = ValueNoise(texture_seed, spec.texture_octaves, spec.texture_frequency, spec.checker)
    if spec.layout == 'fronto':
        z0 = rng.uniform(near, far)
        return SceneGeometry([Patch((0, 0, 1), z0)], texture), z0
    if spec.layout == 'slanted':
        z0 = rng.uniform(near, far)
        tilt = np.radians(rng.uniform(-20, 20, size=2))
        normal = np.array([np.sin(tilt[0]), np.sin(tilt[1]), 1.0])
        return SceneGeometry([Patch(normal, normal[2] * z0)], texture), z0
    if spec.layout == 'step':
        z1, z2 = rng.uniform(near, far, size=2)
        split = rng.uniform(-0.2, 0.2) * near
        patches = [Patch((0, 0, 1), z1, upper=(split, np.inf, np.inf)),
                   Patch((0, 0, 1), z2, lower=(split, -np.inf, -np.inf))]
        return SceneGeometry(patches, texture), 0.5 * (z1 + z2)
    z_back = rng.uniform(0.5 * (near + far), far)
    z_front = rng.uniform(near, spec.d_min + 0.375 * span)
    half = rng.uniform(0.15, 0.3, size=2) * z_front
    cx, cy = rng.uniform(-0.1, 0.1, size=2) * z_front
    lower = np.array([cx - half[0], cy - half[1], z_front])
    upper = np.array([cx + half[0], cy + half[1], min(z_front + 0.5, z_back - 0.05)])
    patches = [Patch((0, 0, 1), z_back)]
    for axis in range(3):
        for bound in (lower, upper):
            normal = np.zeros(3)
            normal[axis] = 1.0
            lo, hi = lower.copy(), upper.copy()
            lo[axis] = hi[axis] = bound[axis]
            patches.append(Patch(normal, bound[axis], lo, hi))
    return SceneGeometry(patches, texture, solids=[(lower, upper)]), 0.5 * (z_front + z_back)


def _camera_ring(spec, rng, target_depth):
    intrinsics = spec.intrinsics
    cameras = [Camera(intrinsics, Pose.identity())]
    phase = rng.uniform(0, 2 * np.pi)
    for i in range(spec.m_views):
        angle = phase + 2 * np.pi * i / spec.m_views
        center = spec.ring_radius * np.array([np.cos(angle), np.sin(angle), 0.0])
        target = np.array([0.0, 0.0, target_depth]) + rng.normal(0.0, spec.look_at_jitter, size=3)
        cameras.append(Camera(intrinsics, Pose.look_at(center, target)))
    return cameras


def _coverage(spec, depth, valid, source):
    rows, cols = np.nonzero(valid > 0)
    if rows.size == 0:
        return 0.0
    u = np.column_stack([cols, rows]).astype(np.float64)
    ref = Camera(spec.intrinsics, Pose.identity())
    pix, z = project(backproject(u, depth[rows, cols], ref), source)
    inside = ((z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] <= spec.width - 1)
              & (pix[:, 1] >= 0) & (pix[:, 1] <= spec.height - 1))
    return float(inside.mean())


def generate_scene(spec, seed):
    """
    Renders one scene with the given scene seed.

    Geometry and cameras are redrawn until at least 70% of the reference
    pixels carry a valid depth and at least 70% of those land inside every
    source view.

    Returns
    -------
    SceneSample
    """
    rng = np.random.default_rng(seed)
    for attempt in range(MAX_ATTEMPTS):
        geometry, target = _build_geometry(spec, rng, texture_seed=int(rng.integers(2 ** 31)))
        cameras = _camera_ring(spec, rng, target)
        image, depth, hit = render_view(geometry, cameras[0], spec.height, spec.width)
        valid = hit * ((depth >= spec.d_min) & (depth <= spec.d_max))
        if valid.mean() < MIN_COVERAGE:
            continue
        if min(_coverage(spec, depth, valid, cam) for cam in cameras[1:]) < MIN_COVERAGE:
            continue
        views = [PosedImage(image, *cameras[0])]
        for cam in cameras[1:]:
            src, _, _ = render_view(geometry, cam, spec.height, spec.width)
            if spec.brightness_jitter > 0:
                src = np.clip(src + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter), 0.0, 1.0)
                src = np.round(src * 255.0) / 255.0
            views.append(PosedImage(src, *cam))
        logger.debug('Scene %d (%s) rendered after %d attempt(s).', seed, spec.layout, attempt + 1)
        return SceneSample(views, spec.hyps, gt_depth=np.where(valid > 0, depth, 0.0),
                           valid=valid, scene_seed=int(seed), layout=spec.layout)
    raise ValueError(f'Could not render scene {seed} with {MIN_COVERAGE:.0%} coverage '
                     f'after {MAX_ATTEMPTS} attempts.')


def generate_dataset(spec, count, split='train'):
    """
    ``count`` scenes of one split. Generation is a pure function of
    (spec, count, split); train and test scene seeds are disjoint.
    """
    if count < 1:
        raise ValueError(f"'count' must be at least 1, got {count}.")
    return [generate_scene(spec, scene_seed(spec.seed, i, split)) for i in range(count)]


def write_scene(path, sample, spec=None):
    """
    Writes a sample to ``path`` (images/NNN.ppm, cams/NNN.txt, depth/ref.pfm,
    meta.txt). The directory is assembled under a temporary name and renamed
    into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f'.{path.name}.', dir=path.parent))
    try:
        for sub in ('images', 'cams', 'depth'):
            (tmp / sub).mkdir()
        hyps = sample.hyps
        for i, view in enumerate(sample.views):
            fileio.write_ppm(tmp / 'images' / f'{i:03d}.ppm', view.image)
            fileio.write_cam(tmp / 'cams' / f'{i:03d}.txt', view.camera,
                             hyps.d_min, hyps.interval, hyps.count)
        if sample.gt_depth is not None:
            fileio.write_pfm(tmp / 'depth' / 'ref.pfm', np.where(sample.valid > 0, sample.gt_depth, 0.0))
        meta = {'scene_seed': sample.scene_seed, 'layout': sample.layout,
                'd_min': hyps.d_min, 'd_max': hyps.d_max, 'hypotheses': hyps.count,
                'views': len(sample.views)}
        if spec is not None:
            meta['spec'] = spec.to_dict()
        (tmp / 'meta.txt').write_text(yaml.safe_dump(meta, sort_keys=True))
        if path.exists():
            old = Path(tempfile.mkdtemp(prefix=f'.{path.name}.old.', dir=path.parent))
            os.replace(path, old / path.name)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.debug('Wrote scene to %s.', path)


def read_scene(path):
    """
    Reads a scene directory written by ``write_scene``.

    Raises
    ------
    FileNotFoundError
        If ``path`` or one of its required files is missing.
    SceneFormatError
        If a file is malformed.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f'Scene directory not found: {path}')
    meta_path = path / 'meta.txt'
    try:
        meta = yaml.safe_load(meta_path.read_text())
    except yaml.YAMLError as e:
        raise fileio.SceneFormatError(f'{meta_path}: {e}') from None
    if not isinstance(meta, dict):
        raise fileio.SceneFormatError(f'{meta_path}: line 1: expected key-value pairs.')
    images = sorted((path / 'images').glob('*.ppm'))
    if len(images) < 2:
        raise fileio.SceneFormatError(f'{path / "images"}: need at least 2 images, found {len(images)}.')
    views = []
    depth_range = None
    for image_path in images:
        cam_path = path / 'cams' / f'{image_path.stem}.txt'
        if not cam_path.exists():
            raise FileNotFoundError(f'Camera file not found: {cam_path}')
        camera, cam_range = fileio.read_cam(cam_path)
        depth_range = depth_range or cam_range
        try:
            views.append(PosedImage(fileio.read_ppm(image_path), *camera))
        except ValueError as e:
            if isinstance(e, fileio.SceneFormatError):
                raise
            raise fileio.SceneFormatError(f'{image_path}: {e}') from None
    d_min, d_interval, count = depth_range
    try:
        hyps = DepthHypotheses(float(meta.get('d_min', d_min)),
                               float(meta.get('d_max', d_min + d_interval * max(count - 1, 1))),
                               int(meta.get('hypotheses', count)))
    except (TypeError, ValueError) as e:
        raise fileio.SceneFormatError(f'{meta_path}: invalid depth range: {e}') from None
    gt, valid = None, None
    depth_path = path / 'depth' / 'ref.pfm'
    if depth_path.exists():
        gt = fileio.read_pfm(depth_path)
        valid = (gt > 0).astype(np.float64)
        outside = (valid > 0) & ((gt < hyps.d_min) | (gt > hyps.d_max))
        if outside.any():
            warnings.warn(f'{int(outside.sum())} ground-truth depths in {depth_path} fall outside '
                          f'[{hyps.d_min}, {hyps.d_max}] and are masked out.', InvalidDepthWarning)
            valid[outside] = 0.0
        gt = np.where(valid > 0, gt, 0.0)
    return SceneSample(views, hyps, gt_depth=gt, valid=valid,
                       scene_seed=meta.get('scene_seed'), layout=meta.get('layout'))
