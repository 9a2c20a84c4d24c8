"""
Volume type, raw/NIfTI file I/O, deterministic transforms and seeded augmentations

Axis convention: data is stored as (D, H, W), W is the left-right axis
"""
from __future__ import annotations

import dataclasses
import logging
import math
import pathlib
import struct
import typing
from dataclasses import dataclass, field

import nibabel
import numpy as np
from scipy import ndimage

from .exceptions import ArgumentError, DimensionError, VolumeIOError, VolumeValidationError

DEFAULT_LOGGER_NAME = 'ms-ssl.volume'

MODEL_SHAPE = (64, 64, 64)
LR_AXIS = 2

RAW_MAGIC = b'MSVL'
RAW_VERSION = 1
RAW_SUFFIX = '.msv'
# magic, version, reserved, shape (3 x uint32), spacing (3 x float64)
RAW_HEADER = struct.Struct('<4sHH3I3d')
NIFTI_SUFFIXES = ('.nii', '.nii.gz')

AUGMENTATION_STEPS = ('affine', 'flip', 'noise')

PathLike = typing.Union[str, pathlib.Path]


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: typing.Tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ''

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)

        if data.ndim != 3:
            raise DimensionError(f'Volume must be 3D, got shape {data.shape}')

        bad_voxels = int(data.size - np.count_nonzero(np.isfinite(data)))

        if bad_voxels:
            raise VolumeValidationError(bad_voxels, self.id or None)

        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'spacing', tuple(float(value) for value in self.spacing))

    @property
    def shape(self) -> typing.Tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> Volume:
        return dataclasses.replace(self, data=data)

    def __repr__(self) -> str:
        return f'Volume {self.id or "<anonymous>"} of shape {self.shape}'


@dataclass(frozen=True)
class AugmentationPolicy:
    """
    Independent random augmentations applied to normalized volumes
    Affine ranges default to +-10 degrees rotation, +-4 voxels translation and 0.9-1.1 scaling,
    each step fires with its own probability, steps run in the declared order
    """

    p_affine: float = 0.5
    rotation_degrees: typing.Tuple[float, float, float] = (10.0, 10.0, 10.0)
    translation_voxels: float = 4.0
    scale_range: typing.Tuple[float, float] = (0.9, 1.1)
    p_flip: float = 0.5
    flip_axis: int = LR_AXIS
    p_noise: float = 0.5
    noise_mean: float = 0.0
    noise_std: float = 0.05
    order: typing.Tuple[str, ...] = AUGMENTATION_STEPS
    rng_seed: int = 0

    def diagnostics(self, prefix: str = 'augmentation') -> typing.List[typing.Tuple[str, str]]:
        result = []

        for name in ('p_affine', 'p_flip', 'p_noise'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                result.append((f'{prefix}.{name}', 'probability must be in [0, 1]'))

        if self.noise_std < 0:
            result.append((f'{prefix}.noise_std', 'must be >= 0'))

        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            result.append((f'{prefix}.scale_range', 'must be 0 < low <= high'))

        if self.flip_axis not in (0, 1, 2):
            result.append((f'{prefix}.flip_axis', 'must be one of 0, 1, 2'))

        if sorted(self.order) != sorted(AUGMENTATION_STEPS):
            result.append((f'{prefix}.order', f'must be a permutation of {", ".join(AUGMENTATION_STEPS)}'))

        return result

    @classmethod
    def disabled(cls) -> AugmentationPolicy:
        return cls(p_affine=0.0, p_flip=0.0, p_noise=0.0)

    @classmethod
    def from_dict(cls, data: dict) -> AugmentationPolicy:
        data = dict(data or {})

        for name in ('rotation_degrees', 'scale_range', 'order'):
            if name in data:
                data[name] = tuple(data[name])

        return cls(**data)

    def to_dict(self) -> dict:
        return {
            name: list(value) if isinstance(value, tuple) else value
            for name, value in dataclasses.asdict(self).items()
        }


@dataclass
class AugmentationDraw:
    steps: typing.List[str] = field(default_factory=list)
    matrix: typing.Optional[np.ndarray] = None
    offset: typing.Optional[np.ndarray] = None
    flip_axis: typing.Optional[int] = None
    noise: typing.Optional[np.ndarray] = None

    @property
    def is_identity(self) -> bool:
        return not self.steps


def load_volume(path: PathLike, *, logger: logging.Logger = None) -> Volume:
    log = logger or logging.getLogger(DEFAULT_LOGGER_NAME)
    path = pathlib.Path(path)

    if not path.is_file():
        raise VolumeIOError(f'Volume file {path} does not exist')

    if path.name.endswith(NIFTI_SUFFIXES):
        data, spacing = _read_nifti(path)
    else:
        data, spacing = _read_raw(path)

    bad_voxels = int(data.size - np.count_nonzero(np.isfinite(data)))

    if bad_voxels:
        log.error('Volume %s contains %d non-finite voxels', path, bad_voxels)

        raise VolumeValidationError(bad_voxels, str(path))

    log.debug('Loaded volume %s of shape %s', path, data.shape)

    return Volume(data, spacing, _volume_id(path))


def save_volume(volume: Volume, path: PathLike) -> pathlib.Path:
    path = pathlib.Path(path)

    if path.name.endswith(NIFTI_SUFFIXES):
        raise VolumeIOError('NIfTI is a read-only format, save volumes with the raw format')

    path.parent.mkdir(parents=True, exist_ok=True)

    header = RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, 0, *volume.shape, *volume.spacing)

    try:
        with path.open('wb') as stream:
            stream.write(header)
            stream.write(np.ascontiguousarray(volume.data, dtype='<f4').tobytes())
    except OSError as e:
        raise VolumeIOError(f'Could not write volume {path}: {e}') from e

    return path


def normalize(volume: Volume) -> Volume:
    low = float(volume.data.min())
    high = float(volume.data.max())

    if high == low:
        return volume.with_data(np.zeros_like(volume.data))

    return volume.with_data(np.clip((volume.data - low) / (high - low), 0.0, 1.0))


def flip_lr(volume: Volume) -> Volume:
    return volume.with_data(np.ascontiguousarray(np.flip(volume.data, axis=LR_AXIS)))


def mirrored_centroid(
        centroid: typing.Sequence[float],
        shape: typing.Sequence[int],
) -> typing.Tuple[float, float, float]:
    return centroid[0], centroid[1], shape[LR_AXIS] - centroid[LR_AXIS]


def crop_subvolume(
        volume: Volume,
        centroid: typing.Sequence[float],
        size: typing.Sequence[int] = MODEL_SHAPE,
) -> Volume:
    """
    Cut a box of the given size centered at centroid, boxes leaving the volume are shifted inside.
    For even sizes flip_lr(crop(v, c)) == crop(flip_lr(v), mirrored_centroid(c, v.shape))
    """
    if len(centroid) != 3 or len(size) != 3:
        raise ArgumentError('Centroid and size must have three components')

    slices = []

    for axis, (center, extent, dim) in enumerate(zip(centroid, size, volume.shape)):
        if dim < extent:
            raise DimensionError(f'Volume axis {axis} has {dim} voxels, crop needs {extent}')

        start = min(max(int(math.floor(center - extent / 2)), 0), dim - extent)
        slices.append(slice(start, start + extent))

    return volume.with_data(np.ascontiguousarray(volume.data[tuple(slices)]))


def median_filter3d(volume: Volume, kernel: int) -> Volume:
    if not isinstance(kernel, (int, np.integer)) or kernel < 1 or kernel % 2 == 0:
        raise ArgumentError(f'Median kernel must be an odd integer >= 1, got {kernel}')

    if kernel == 1:
        return volume.with_data(volume.data.copy())

    # mode 'nearest' replicates the border voxels
    return volume.with_data(ndimage.median_filter(volume.data, size=int(kernel), mode='nearest'))


def draw_augmentation(
        policy: AugmentationPolicy,
        rng: np.random.Generator,
        shape: typing.Sequence[int],
) -> AugmentationDraw:
    draw = AugmentationDraw()

    for step in policy.order:
        if step == 'affine':
            if rng.random() < policy.p_affine:
                draw.matrix, draw.offset = _random_affine(policy, rng, shape)
                draw.steps.append(step)
        elif step == 'flip':
            if rng.random() < policy.p_flip:
                draw.flip_axis = policy.flip_axis
                draw.steps.append(step)
        elif step == 'noise':
            if rng.random() < policy.p_noise:
                draw.noise = rng.normal(policy.noise_mean, policy.noise_std, size=tuple(shape)).astype(np.float32)
                draw.steps.append(step)
        else:
            raise ArgumentError(f'Unknown augmentation step {step}')

    return draw


def apply_augmentation(volume: Volume, draw: AugmentationDraw, *, geometric_only: bool = False) -> Volume:
    data = volume.data

    for step in draw.steps:
        if step == 'affine':
            data = ndimage.affine_transform(data, draw.matrix, offset=draw.offset, order=1, mode='nearest')
        elif step == 'flip':
            data = np.flip(data, axis=draw.flip_axis)
        elif step == 'noise' and not geometric_only:
            data = data + draw.noise

    if draw.is_identity:
        return volume

    return volume.with_data(np.clip(np.ascontiguousarray(data), 0.0, 1.0))


def augment(volume: Volume, policy: AugmentationPolicy, rng: np.random.Generator = None) -> Volume:
    rng = np.random.default_rng(policy.rng_seed) if rng is None else rng

    return apply_augmentation(volume, draw_augmentation(policy, rng, volume.shape))


def _random_affine(
        policy: AugmentationPolicy,
        rng: np.random.Generator,
        shape: typing.Sequence[int],
) -> typing.Tuple[np.ndarray, np.ndarray]:
    angles = np.deg2rad([rng.uniform(-limit, limit) for limit in policy.rotation_degrees])
    scale = rng.uniform(*policy.scale_range)
    shift = rng.uniform(-policy.translation_voxels, policy.translation_voxels, size=3)

    rotation = np.eye(3)

    for axis, angle in enumerate(angles):
        plane = [index for index in range(3) if index != axis]
        cos, sin = math.cos(angle), math.sin(angle)
        step = np.eye(3)
        step[plane[0], plane[0]] = cos
        step[plane[0], plane[1]] = -sin
        step[plane[1], plane[0]] = sin
        step[plane[1], plane[1]] = cos
        rotation = rotation @ step

    # affine_transform maps output coordinates into the input grid, rotate about the center
    matrix = rotation / scale
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2

    return matrix, center - matrix @ center - shift


def _read_raw(path: pathlib.Path) -> typing.Tuple[np.ndarray, typing.Tuple[float, float, float]]:
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise VolumeIOError(f'Could not read volume {path}: {e}') from e

    if len(payload) < RAW_HEADER.size:
        raise VolumeIOError(f'File {path} is too short to be a raw volume')

    magic, version, _, d, h, w, *spacing = RAW_HEADER.unpack_from(payload)

    if magic != RAW_MAGIC or version != RAW_VERSION:
        raise VolumeIOError(f'File {path} is not a raw volume (magic {magic!r}, version {version})')

    expected = RAW_HEADER.size + d * h * w * 4

    if len(payload) != expected:
        raise VolumeIOError(f'File {path} has {len(payload)} bytes, header announces {expected}')

    data = np.frombuffer(payload, dtype='<f4', offset=RAW_HEADER.size).reshape(d, h, w).astype(np.float32)

    return data, tuple(spacing)


def _read_nifti(path: pathlib.Path) -> typing.Tuple[np.ndarray, typing.Tuple[float, float, float]]:
    try:
        image = nibabel.load(str(path))
        data = np.asarray(image.get_fdata(dtype=np.float32))
    except Exception as e:
        raise VolumeIOError(f'Could not read NIfTI volume {path}: {e}') from e

    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]

    if data.ndim != 3:
        raise DimensionError(f'NIfTI volume {path} is not 3D, shape {data.shape}')

    return data, tuple(float(value) for value in image.header.get_zooms()[:3])


def _volume_id(path: pathlib.Path) -> str:
    name = path.name

    for suffix in (*NIFTI_SUFFIXES, RAW_SUFFIX):
        if name.endswith(suffix):
            return name[:-len(suffix)]

    return path.stem
