# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.config
'''
Pipeline configuration: TOML sections mapped onto dataclasses, with $ENV_VAR value resolution.

Precedence is command-line override > TOML file > dataclass default. A resolved copy of the
configuration is written next to every run's outputs.
'''
import dataclasses
import os
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

import structlog
import tomli_w

from mahalvo.epipolar import RansacConfig
from mahalvo.errors import ConfigError
from mahalvo.flow import FlowConfig

logger = structlog.get_logger(__name__)

VEHICLE_MODES = ('ground_vehicle', 'aerial')


@dataclasses.dataclass
class ScaleConfig:
    '''Scale recovery. camera_height in metres.'''
    mode: str = 'ground_vehicle'
    camera_height: float = 1.7
    plane_normal_prior: float = 0.8
    plane_inlier_tol: float = 0.02
    plane_iters: int = 200
    reinit_overlap: float = 0.05
    depth_std_inflation: float = 1.05


@dataclasses.dataclass
class FusionConfig:
    use_pnp: bool = True
    scale_gate: float = 0.30
    rotation_gate: float = 0.5  # rad
    pnp_threshold: float = 2.0  # px
    pnp_iters: int = 200


@dataclasses.dataclass
class ParallaxConfig:
    median_gate: float = 2.5  # px
    q3_gate: float = 5.0  # px


@dataclasses.dataclass
class LoopConfig:
    enabled: bool = True
    ssim_threshold: float = 0.38
    max_keep: int = 3
    reliability: float = 0.20
    stride: int = 10
    radius: float = 10.0  # m
    min_index_gap: int = 100


@dataclasses.dataclass
class GraphConfig:
    huber_delta: float = 1.0
    max_iters: int = 50
    tol: float = 1e-9
    odometry_info_trans: float = 100.0
    odometry_info_rot: float = 10000.0


@dataclasses.dataclass
class PipelineConfig:
    flow: FlowConfig = dataclasses.field(default_factory=FlowConfig)
    ransac: RansacConfig = dataclasses.field(default_factory=RansacConfig)
    scale: ScaleConfig = dataclasses.field(default_factory=ScaleConfig)
    fusion: FusionConfig = dataclasses.field(default_factory=FusionConfig)
    parallax: ParallaxConfig = dataclasses.field(default_factory=ParallaxConfig)
    loop: LoopConfig = dataclasses.field(default_factory=LoopConfig)
    graph: GraphConfig = dataclasses.field(default_factory=GraphConfig)
    seed: int = 0

    def validate(self) -> 'PipelineConfig':
        if self.scale.mode not in VEHICLE_MODES:
            raise ConfigError(f'Unknown vehicle mode {self.scale.mode!r}; expected one of {VEHICLE_MODES}')
        if not self.scale.camera_height > 0:
            raise ConfigError(f'Camera height must be positive, got {self.scale.camera_height}')
        for name, value in (('fusion.scale_gate', self.fusion.scale_gate),
                            ('fusion.rotation_gate', self.fusion.rotation_gate),
                            ('loop.ssim_threshold', self.loop.ssim_threshold),
                            ('loop.radius', self.loop.radius),
                            ('graph.huber_delta', self.graph.huber_delta),
                            ('flow.epipolar_gain', self.flow.epipolar_gain),
                            ('flow.epipolar_truncation', self.flow.epipolar_truncation)):
            if not value > 0:
                raise ConfigError(f'`{name}` must be positive, got {value}')
        if self.flow.window < 3 or self.flow.window % 2 == 0:
            raise ConfigError(f'`flow.window` must be odd and >= 3, got {self.flow.window}')
        if self.loop.stride < 1:
            raise ConfigError(f'`loop.stride` must be >= 1, got {self.loop.stride}')
        return self


SECTIONS = {f.name: f for f in dataclasses.fields(PipelineConfig) if f.name != 'seed'}

# XXX: Use google.re2 to avoid backtracking attacks?
ENV_VAR_PATTERN = re.compile(r'^\$([a-zA-Z_][a-zA-Z0-9_]*)$')


def resolve_value(value: Any) -> Any:
    '''Resolves values, checking for $ENV_VAR patterns.'''
    if isinstance(value, str):
        match = ENV_VAR_PATTERN.match(value)
        if match:
            var_name = match.group(1)
            env_value = os.environ.get(var_name)
            if env_value is None:
                logger.warning(f'Environment variable `{var_name}` requested in config not found.', requested_var=var_name)
                return None
            logger.debug(f'Resolved environment variable `{var_name}`.')
            return env_value
    return value


def _coerce(value: Any, default: Any, key: str) -> Any:
    '''Bring a TOML or environment value to the type of the field default'''
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if value.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ConfigError(f'`{key}` expects a boolean, got {value!r}')
        return bool(value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f'`{key}` expects {type(default).__name__}, got {value!r}')
    return str(value)


class ConfigLoader:
    '''Builds a PipelineConfig from a TOML document, collecting every problem before failing.'''
    def __init__(self):
        self.load_errors: list[tuple[str, str]] = []  # (key, error_message)

    def load(self, doc: dict[str, Any], source: str = '<config>') -> PipelineConfig:
        self.load_errors = []
        cfg = PipelineConfig()
        for section, values in doc.items():
            if section == 'seed':
                try:
                    cfg.seed = _coerce(resolve_value(values), 0, 'seed')
                except ConfigError as e:
                    self.load_errors.append(('seed', e.message))
                continue
            if section not in SECTIONS:
                logger.warning(f'Ignoring unknown config section `[{section}]`.', source=source)
                continue
            if not isinstance(values, dict):
                self.load_errors.append((section, f'`[{section}]` must be a table'))
                continue
            self._load_section(cfg, section, values, source)
        if self.load_errors:
            for key, msg in self.load_errors:
                logger.error(msg, key=key, source=source)
            raise ConfigError(f'{len(self.load_errors)} invalid configuration value(s) in {source}: '
                              + '; '.join(msg for _, msg in self.load_errors))
        return cfg.validate()

    def _load_section(self, cfg: PipelineConfig, section: str, values: dict[str, Any], source: str):
        current = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(current)}
        updates = {}
        for key, raw in values.items():
            if key not in known:
                logger.warning(f'Ignoring unknown key `{section}.{key}`.', source=source)
                continue
            value = resolve_value(raw)
            if value is None:
                continue
            try:
                updates[key] = _coerce(value, getattr(current, key), f'{section}.{key}')
            except ConfigError as e:
                self.load_errors.append((f'{section}.{key}', e.message))
        try:
            setattr(cfg, section, dataclasses.replace(current, **updates))
        except ValueError as e:
            self.load_errors.append((section, str(e)))


def load_pipeline_config(path: Path | str | None) -> PipelineConfig:
    '''Read a TOML configuration; None gives the defaults.'''
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        with open(path, 'rb') as fp:
            doc = tomllib.load(fp)
    except FileNotFoundError:
        logger.error(f'Config file not found: {path}', filepath=str(path))
        raise ConfigError(f'Config file not found: {path}')
    except tomllib.TOMLDecodeError as e:
        logger.error(f'Error decoding TOML in config file: {path} - {e}', filepath=str(path))
        raise ConfigError(f'Error decoding TOML in config file {path}: {e}')
    logger.info('Loaded config file', filepath=str(path))
    return ConfigLoader().load(doc, str(path))


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, Any]) -> PipelineConfig:
    '''
    Apply dotted-key overrides such as {'flow.epipolar_gain': 0.02}. None values are skipped so
    unset command-line flags leave the file or default value alone.
    '''
    cfg = dataclasses.replace(cfg)
    for dotted, value in overrides.items():
        if value is None:
            continue
        if dotted == 'seed':
            cfg.seed = int(value)
            continue
        section, _, key = dotted.partition('.')
        if section not in SECTIONS or not hasattr(getattr(cfg, section), key):
            raise ConfigError(f'Unknown configuration key `{dotted}`')
        current = getattr(cfg, section)
        try:
            setattr(cfg, section, dataclasses.replace(current, **{key: _coerce(value, getattr(current, key), dotted)}))
        except ValueError as e:
            raise ConfigError(str(e))
    return cfg.validate()


def to_toml(cfg: PipelineConfig) -> str:
    '''Serialize every resolved value, one table per section'''
    return tomli_w.dumps({'seed': cfg.seed, **{s: dataclasses.asdict(getattr(cfg, s)) for s in SECTIONS}})


def write_resolved_config(cfg: PipelineConfig, out_dir: Path) -> Path:
    path = Path(out_dir) / 'resolved_config.toml'
    path.write_text(to_toml(cfg))
    return path
