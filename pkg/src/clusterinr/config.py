"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key has a default, so an
empty file is a valid config. Keys prefixed ``meta_`` configure
meta-learning and ``synth_`` the synthetic generator used by ``synth``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data_io import SynthSpec
from .meta_learner import MetaConfig
from .model import matched_shared_width
from .trainer import NetworkConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    initial_lr: float = 5e-5
    lr_decay_factor: float = 0.92
    lr_decay_interval_epochs: int = 30
    convergence_patience_epochs: int = 30
    sample_fraction_per_epoch: float = 0.30
    residual_threshold: float = 5e-4
    max_split_depth: int = 3
    batch_size: int = 16_384
    k: int = 20
    max_epochs: int = 5000
    seed: int = 0
    worker_count: int = 1
    # network
    width: int = 128
    num_frequencies: int = 6
    include_raw_input: bool = True
    gfe_blocks: int = 5
    lfe_blocks: int = 6
    omega_first: float = 30.0
    shared_head: bool = False
    match_shared_budget: bool = True
    # meta-learning
    use_meta: bool = True
    meta_sample_count: int = 0  # 0: min(10000, 10% of the cluster)
    meta_inner_steps: int = 4
    meta_inner_lr: float = 1e-4
    meta_outer_lr: float = 5e-5
    meta_iterations: int = 500
    meta_tasks_per_iteration: int = 1
    # synthetic data
    synth_points: int = 1000
    synth_timesteps: int = 2
    synth_fields: str = "trig"
    synth_noise: float = 0.0
    synth_seed: int = 0
    synth_density: str = "uniform"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            initial_lr=self.initial_lr, lr_decay_factor=self.lr_decay_factor,
            lr_decay_interval_epochs=self.lr_decay_interval_epochs,
            convergence_patience_epochs=self.convergence_patience_epochs,
            sample_fraction_per_epoch=self.sample_fraction_per_epoch,
            residual_threshold=self.residual_threshold, max_split_depth=self.max_split_depth,
            batch_size=self.batch_size, k=self.k, seed=self.seed, worker_count=self.worker_count,
            max_epochs=self.max_epochs)

    def network_config(self, n_vars: int) -> NetworkConfig:
        net = NetworkConfig(self.width, self.num_frequencies, self.include_raw_input, self.gfe_blocks,
                            self.lfe_blocks, self.shared_head, self.omega_first)
        if self.shared_head and self.match_shared_budget:
            w = matched_shared_width(self.width, n_vars, net.pe, self.gfe_blocks, self.lfe_blocks)
            net = dataclasses.replace(net, width=w)
        return net

    def meta_config(self) -> MetaConfig | None:
        if not self.use_meta:
            return None
        return MetaConfig(sample_count=self.meta_sample_count or None, inner_steps=self.meta_inner_steps,
                          inner_lr=self.meta_inner_lr, outer_lr=self.meta_outer_lr,
                          meta_iterations=self.meta_iterations, tasks_per_iteration=self.meta_tasks_per_iteration,
                          seed=self.seed)

    def synth_spec(self) -> SynthSpec:
        kinds = tuple(f.strip() for f in self.synth_fields.split(",") if f.strip())
        return SynthSpec(self.synth_points, self.synth_timesteps, kinds, self.synth_noise,
                         self.synth_seed, self.synth_density)

    def update(self, **overrides) -> "RunConfig":
        names = {f.name for f in fields(self)}
        for key, value in overrides.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, value, type(getattr(RunConfig(), key))))
        return self

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, value, kind):
    if not isinstance(value, str):
        return kind(value)
    text = value.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg.update(**{key: value})
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(), str(path))
