"""
Synthetic maxillary-sinus phantoms with ground-truth anomaly masks

Every phantom is emitted already cropped and in canonical (left) orientation:
a dark air cavity (~0.1) inside a bright mucosa/bone shell (~0.7) surrounded by soft tissue,
plus Gaussian texture noise. Anomalies (~0.5-0.8) grow from the cavity so a CAE trained on
normal phantoms cannot reconstruct them.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
import pathlib
import typing
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .exceptions import ArgumentError, DataError, PhantomConfigError, format_allowed
from .volume import PathLike, Volume, flip_lr, load_volume, normalize, save_volume

DEFAULT_LOGGER_NAME = 'ms-ssl.phantom'

ANOMALY_KINDS = ('blob', 'wall-thickening', 'polyp-stalk')
SIDES = ('left', 'right')
POOLS = {'labelled': ('p', 0), 'unlabelled': ('u', 1)}

CAVITY_INTENSITY = 0.1
SHELL_INTENSITY = 0.7
TISSUE_INTENSITY = 0.35
ANOMALY_INTENSITY_RANGE = (0.5, 0.8)
CENTER_JITTER = 2.0
LR_OFFSET = 2.0
PARTIAL_VOLUME_SIGMA = 0.8
STALK_RADIUS = 1.2

MANIFEST_VERSION = 1


class Label(enum.IntEnum):
    NORMAL = 0
    ANOMALOUS = 1

    @classmethod
    def parse(cls, value: typing.Union[None, int, str]) -> typing.Optional[Label]:
        if value is None:
            return None

        if isinstance(value, str):
            return cls[value.upper()]

        return cls(int(value))


@dataclass(frozen=True)
class PhantomConfig:
    """
    Phantom cohort parameters, all lengths are in voxels
    anomaly_fraction is the share of anomalous sides (samples) in the cohort
    """

    n_patients: int = 200
    n_unlabelled_patients: int = 300
    anomaly_fraction: float = 0.4
    cavity_radius_range: typing.Tuple[float, float] = (12.0, 18.0)
    wall_thickness_range: typing.Tuple[float, float] = (3.0, 6.0)
    anomaly_kinds: typing.Tuple[str, ...] = ANOMALY_KINDS
    anomaly_radius_range: typing.Tuple[float, float] = (4.0, 8.0)
    background_noise_std: float = 0.03
    shape: typing.Tuple[int, int, int] = (64, 64, 64)
    rng_seed: int = 0

    def diagnostics(self, prefix: str = 'phantom') -> typing.List[typing.Tuple[str, str]]:
        result = []

        if self.n_patients < 1:
            result.append((f'{prefix}.n_patients', 'must be >= 1'))

        if self.n_unlabelled_patients < 0:
            result.append((f'{prefix}.n_unlabelled_patients', 'must be >= 0'))

        if not 0.0 <= self.anomaly_fraction <= 1.0:
            result.append((f'{prefix}.anomaly_fraction', 'must be in [0, 1]'))

        if self.background_noise_std < 0:
            result.append((f'{prefix}.background_noise_std', 'must be >= 0'))

        if not self.anomaly_kinds or set(self.anomaly_kinds) - set(ANOMALY_KINDS):
            result.append((f'{prefix}.anomaly_kinds', f'must be a nonempty subset of {format_allowed(ANOMALY_KINDS)}'))

        for name in ('cavity_radius_range', 'wall_thickness_range', 'anomaly_radius_range'):
            low, high = getattr(self, name)

            if low <= 0 or low > high:
                result.append((f'{prefix}.{name}', 'must satisfy 0 < low <= high'))

        if len(self.shape) != 3 or min(self.shape) < 8:
            result.append((f'{prefix}.shape', 'must be three axes of at least 8 voxels'))
        else:
            reach = self.cavity_radius_range[1] + self.wall_thickness_range[1] + CENTER_JITTER + LR_OFFSET + 1

            if reach > min(self.shape) / 2:
                result.append((
                    f'{prefix}.cavity_radius_range',
                    f'cavity radius plus wall thickness ({reach:g} with margins) does not fit into {self.shape}',
                ))

        if self.anomaly_radius_range[1] >= self.cavity_radius_range[0]:
            result.append((f'{prefix}.anomaly_radius_range', 'largest anomaly must be smaller than smallest cavity'))

        return result

    def validate(self) -> None:
        problems = self.diagnostics()

        if problems:
            raise PhantomConfigError('; '.join(f'{name}: {rule}' for name, rule in problems))

    @classmethod
    def from_dict(cls, data: dict) -> PhantomConfig:
        data = dict(data or {})

        for name in ('cavity_radius_range', 'wall_thickness_range', 'anomaly_kinds', 'anomaly_radius_range', 'shape'):
            if name in data:
                data[name] = tuple(data[name])

        return cls(**data)

    def to_dict(self) -> dict:
        return {
            name: list(value) if isinstance(value, tuple) else value
            for name, value in dataclasses.asdict(self).items()
        }


@dataclass
class Sample:
    id: str
    patient_id: str
    side: str
    volume: Volume
    label: typing.Optional[Label] = None
    gt_mask: typing.Optional[np.ndarray] = None

    @property
    def is_labelled(self) -> bool:
        return self.label is not None

    @property
    def is_anomalous(self) -> bool:
        return self.label == Label.ANOMALOUS

    def unlabelled(self) -> UnlabelledSample:
        return UnlabelledSample(self.id, self.volume)

    def __repr__(self) -> str:
        label = 'unlabelled' if self.label is None else self.label.name.lower()

        return f'Sample {self.id} ({self.side}, {label})'


class UnlabelledSample:
    """Label-free view of a sample, the only thing pretraining code ever receives"""

    __slots__ = ('id', 'volume')

    def __init__(self, id: str, volume: Volume) -> None:
        self.id = id
        self.volume = volume

    def __repr__(self) -> str:
        return f'Unlabelled sample {self.id}'


def generate_dataset(
        cfg: PhantomConfig,
        *,
        pool: str = 'labelled',
        logger: logging.Logger = None,
) -> typing.List[Sample]:
    """
    Two samples per patient, the right side is generated mirrored and flipped back to canonical orientation.
    Anomalous sides are drawn exactly: round-half-up(anomaly_fraction * 2 * patients) of them.
    Labelled pools carry labels, unlabelled pools only keep ground-truth masks.
    """
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)

    if pool not in POOLS:
        raise ArgumentError(f'Unknown pool {pool}, expected one of {format_allowed(POOLS)}')

    cfg.validate()

    prefix, stream = POOLS[pool]
    n_patients = cfg.n_patients if pool == 'labelled' else cfg.n_unlabelled_patients
    n_slots = 2 * n_patients

    streams = np.random.SeedSequence([cfg.rng_seed, stream]).spawn(n_patients + 1)
    master = np.random.default_rng(streams[0])

    n_anomalous = min(n_slots, int(math.floor(cfg.anomaly_fraction * n_slots + 0.5)))
    anomalous_slots = set(master.permutation(n_slots)[:n_anomalous].tolist())

    log.info('Generating %d %s patients, %d of %d sides anomalous', n_patients, pool, n_anomalous, n_slots)

    samples = []

    for patient in range(n_patients):
        rng = np.random.default_rng(streams[patient + 1])
        patient_id = f'{prefix}{patient:05d}'

        for side_index, side in enumerate(SIDES):
            anomalous = 2 * patient + side_index in anomalous_slots
            samples.append(_generate_side(cfg, rng, patient_id, side, anomalous, labelled=pool == 'labelled'))

    return samples


def inject_anomaly(
        volume: Volume,
        kind: str,
        rng: np.random.Generator,
        *,
        cavity: np.ndarray = None,
        radius_range: typing.Tuple[float, float] = (4.0, 8.0),
        intensity_range: typing.Tuple[float, float] = ANOMALY_INTENSITY_RANGE,
        noise_std: float = 0.03,
) -> typing.Tuple[Volume, np.ndarray]:
    """
    Insert one anomalous structure into the air cavity of a normal phantom.
    Voxels outside the returned mask are left untouched.
    """
    if kind not in ANOMALY_KINDS:
        raise ArgumentError(f'Unknown anomaly kind {kind}, expected one of {format_allowed(ANOMALY_KINDS)}')

    cavity = _estimate_cavity(volume.data) if cavity is None else cavity.astype(bool)

    if not cavity.any():
        raise DataError(f'{volume!r} has no air cavity to place an anomaly in')

    depth = ndimage.distance_transform_edt(cavity)
    grid = np.indices(volume.shape, dtype=np.float64)

    if kind == 'blob':
        mask = _blob_mask(depth, grid, rng, radius_range)
    elif kind == 'wall-thickening':
        mask = _thickening_mask(cavity, depth, grid, rng, radius_range)
    else:
        mask = _polyp_mask(cavity, depth, grid, rng, radius_range)

    mask = _largest_component(mask)

    if not mask.any():
        mask = _blob_mask(depth, grid, rng, radius_range)

    intensity = rng.uniform(*intensity_range)
    texture = rng.normal(0.0, noise_std, size=volume.shape) if noise_std > 0 else np.zeros(volume.shape)
    data = np.where(mask, intensity + texture, volume.data).astype(np.float32)

    return volume.with_data(data), mask


def save_dataset(samples: typing.Sequence[Sample], root: PathLike, *, name: str = 'manifest.json') -> pathlib.Path:
    root = pathlib.Path(root)
    records = []

    for sample in samples:
        volume_path = save_volume(sample.volume, root / 'volumes' / f'{sample.id}.msv')
        mask_path = None

        if sample.gt_mask is not None:
            mask = Volume(sample.gt_mask.astype(np.float32), sample.volume.spacing, f'{sample.id}-mask')
            mask_path = save_volume(mask, root / 'masks' / f'{sample.id}.msv')

        records.append({
            'id': sample.id,
            'patient': sample.patient_id,
            'side': sample.side,
            'label': None if sample.label is None else sample.label.name.lower(),
            'volume': volume_path.relative_to(root).as_posix(),
            'mask': None if mask_path is None else mask_path.relative_to(root).as_posix(),
        })

    manifest = root / name
    manifest.write_text(json.dumps({'version': MANIFEST_VERSION, 'samples': records}, indent=2))

    return manifest


def load_dataset(manifest: PathLike) -> typing.List[Sample]:
    manifest = pathlib.Path(manifest)
    root = manifest.parent

    try:
        content = json.loads(manifest.read_text())
    except (OSError, ValueError) as e:
        raise DataError(f'Could not read sample manifest {manifest}: {e}') from e

    samples = []

    for record in content['samples']:
        volume = load_volume(root / record['volume'])
        mask = None

        if record['mask'] is not None:
            mask = load_volume(root / record['mask']).data > 0.5

        samples.append(Sample(
                record['id'],
                record['patient'],
                record['side'],
                Volume(volume.data, volume.spacing, record['id']),
                Label.parse(record['label']),
                mask,
        ))

    return samples


def _generate_side(
        cfg: PhantomConfig,
        rng: np.random.Generator,
        patient_id: str,
        side: str,
        anomalous: bool,
        *,
        labelled: bool,
) -> Sample:
    sample_id = f'{patient_id}-{side[0]}'
    data, cavity = _normal_phantom(cfg, rng, mirrored=side == 'right')
    volume = Volume(data, id=sample_id)
    mask = None

    if anomalous:
        kind = cfg.anomaly_kinds[int(rng.integers(len(cfg.anomaly_kinds)))]
        volume, mask = inject_anomaly(
                volume,
                kind,
                rng,
                cavity=cavity,
                radius_range=cfg.anomaly_radius_range,
                noise_std=cfg.background_noise_std,
        )

    if side == 'right':
        volume = flip_lr(volume)
        mask = None if mask is None else np.ascontiguousarray(np.flip(mask, axis=2))

    label = None

    if labelled:
        label = Label.ANOMALOUS if anomalous else Label.NORMAL

    return Sample(sample_id, patient_id, side, normalize(volume), label, mask)


def _normal_phantom(
        cfg: PhantomConfig,
        rng: np.random.Generator,
        *,
        mirrored: bool,
) -> typing.Tuple[np.ndarray, np.ndarray]:
    shape = np.asarray(cfg.shape, dtype=np.float64)
    center = (shape - 1) / 2 + rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=3)
    # the sinus sits lateral of the midline, mirrored for right sides
    center[2] += -LR_OFFSET if mirrored else LR_OFFSET

    radii = rng.uniform(*cfg.cavity_radius_range, size=3)
    thickness = rng.uniform(*cfg.wall_thickness_range)

    grid = np.indices(cfg.shape, dtype=np.float64)
    spread = np.sqrt(sum(((grid[axis] - center[axis]) / radii[axis]) ** 2 for axis in range(3)))

    cavity = spread <= 1.0
    shell = ~cavity & ((spread - 1.0) * radii.mean() <= thickness)

    data = np.full(cfg.shape, TISSUE_INTENSITY, dtype=np.float64)
    data[shell] = SHELL_INTENSITY
    data[cavity] = CAVITY_INTENSITY
    data = ndimage.gaussian_filter(data, sigma=PARTIAL_VOLUME_SIGMA)

    if cfg.background_noise_std > 0:
        data = data + rng.normal(0.0, cfg.background_noise_std, size=cfg.shape)

    return data.astype(np.float32), cavity


def _estimate_cavity(data: np.ndarray) -> np.ndarray:
    low, high = float(data.min()), float(data.max())
    dark = data < low + 0.25 * (high - low)

    return _largest_component(ndimage.binary_opening(dark))


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask)

    if count <= 1:
        return mask.astype(bool)

    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))

    return labels == int(np.argmax(sizes)) + 1


def _sphere(grid: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    return ((grid - np.asarray(center)[:, None, None, None]) ** 2).sum(axis=0) <= radius ** 2


def _blob_mask(
        depth: np.ndarray,
        grid: np.ndarray,
        rng: np.random.Generator,
        radius_range: typing.Tuple[float, float],
) -> np.ndarray:
    radius = rng.uniform(*radius_range)
    candidates = np.argwhere(depth >= radius)

    if not len(candidates):
        candidates = np.argwhere(depth >= depth.max())
        radius = min(radius, float(depth.max()))

    center = candidates[int(rng.integers(len(candidates)))].astype(np.float64)

    return _sphere(grid, center, radius)


def _thickening_mask(
        cavity: np.ndarray,
        depth: np.ndarray,
        grid: np.ndarray,
        rng: np.random.Generator,
        radius_range: typing.Tuple[float, float],
) -> np.ndarray:
    thickness = max(2.0, rng.uniform(*radius_range) / 2)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    centroid = np.argwhere(cavity).mean(axis=0)

    side = sum((grid[axis] - centroid[axis]) * direction[axis] for axis in range(3)) > 0

    return cavity & (depth <= thickness) & side


def _polyp_mask(
        cavity: np.ndarray,
        depth: np.ndarray,
        grid: np.ndarray,
        rng: np.random.Generator,
        radius_range: typing.Tuple[float, float],
) -> np.ndarray:
    head_radius = max(2.0, 0.75 * rng.uniform(*radius_range))
    wall = np.argwhere(cavity & (depth <= 1.5))
    base = wall[int(rng.integers(len(wall)))].astype(np.float64)
    centroid = np.argwhere(cavity).mean(axis=0)

    direction = centroid - base
    reach = float(np.linalg.norm(direction))

    if reach == 0:
        return _sphere(grid, base, head_radius) & cavity

    direction /= reach
    head = base + direction * min(2 * head_radius, reach)

    # distance of every voxel to the stalk segment between base and head
    length = float(np.linalg.norm(head - base))
    along = np.clip(np.tensordot(direction, grid - base[:, None, None, None], axes=1), 0.0, length)
    closest = base[:, None, None, None] + along[None] * direction[:, None, None, None]
    stalk = np.sqrt(((grid - closest) ** 2).sum(axis=0)) <= STALK_RADIUS

    return (_sphere(grid, head, head_radius) | stalk) & cavity
