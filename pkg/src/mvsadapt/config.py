# Module containing the experiment configuration and its YAML form

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from mvsadapt.metatta import MetaConfig, PretrainConfig
from mvsadapt.mvsnet import Architecture
from mvsadapt.photoloss import PhotoLossConfig
from mvsadapt.scenegen import SceneSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything a run depends on.

    Parameters
    ----------
    scene : SceneSpec
    arch : Architecture
    pretrain : PretrainConfig
    meta : MetaConfig
    train_scenes : int
        Training scenes per dataset seed.
    test_scenes : int
        Held-out scenes per dataset seed.
    """
    scene: SceneSpec = field(default_factory=SceneSpec)
    arch: Architecture = field(default_factory=Architecture)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    train_scenes: int = 8
    test_scenes: int = 4

    def __post_init__(self):
        if self.meta.n_views != self.scene.n_views or self.meta.m_views != self.scene.m_views:
            raise ValueError(f'View counts disagree: scene has n_views={self.scene.n_views}, '
                             f'm_views={self.scene.m_views}; meta has n_views={self.meta.n_views}, '
                             f'm_views={self.meta.m_views}.')
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise ValueError("'train_scenes' and 'test_scenes' must be at least 1.")

    def to_dict(self):
        """
        Plain nested dict (lists instead of tuples) suitable for YAML.
        """
        def plain(value):
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [plain(v) for v in value]
            return value
        return plain(asdict(self))

    @classmethod
    def from_dict(cls, values):
        values = {} if values is None else values
        _check_keys(cls, values, 'config')
        meta = dict(values.get('meta') or {})
        _check_keys(MetaConfig, meta, 'meta')
        meta['photo'] = _build(PhotoLossConfig, meta.get('photo'), 'meta.photo')
        top = {k: v for k, v in values.items() if k not in ('scene', 'arch', 'pretrain', 'meta')}
        return cls(scene=_build(SceneSpec, values.get('scene'), 'scene'),
                   arch=_build(Architecture, values.get('arch'), 'arch'),
                   pretrain=_build(PretrainConfig, values.get('pretrain'), 'pretrain'),
                   meta=MetaConfig(**meta),
                   **top)


def _check_keys(cls, values, section):
    if not isinstance(values, dict):
        raise ValueError(f"Section '{section}' must be a mapping, got {type(values).__name__}.")
    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"Unknown key(s) in '{section}': {sorted(unknown)}.")


def _build(cls, values, section):
    if values is None:
        return cls()
    _check_keys(cls, values, section)
    return cls(**values)


def merge(base, overrides):
    """
    Recursively overlays ``overrides`` on a copy of ``base``; None values
    in ``overrides`` are ignored.
    """
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """
    Resolves a configuration from the defaults, an optional YAML file and
    optional nested overrides.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    ValueError
        For unknown keys, invalid values or malformed YAML.
    """
    values = ExperimentConfig().to_dict()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f'Config file not found: {path}')
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ValueError(f'{path}: malformed YAML: {e}') from None
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ValueError(f'{path}: top level must be a mapping.')
            _check_keys(ExperimentConfig, loaded, 'config')
            values = merge(values, loaded)
    if overrides:
        values = merge(values, overrides)
    try:
        return ExperimentConfig.from_dict(values)
    except TypeError as e:
        raise ValueError(f'Invalid configuration value: {e}') from None


def save_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
