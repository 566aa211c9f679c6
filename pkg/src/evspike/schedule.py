"""Hardware-timestep scheduling, latency/throughput and the power estimator."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

SCHEMES = ("pipelined", "fall_through")


@dataclass(frozen=True)
class ScheduleConfig:
    scheme: str = "fall_through"
    step_time_us: float = 250.0
    patches: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if not self.step_time_us > 0:
            raise ConfigError("step_time_us must be > 0")
        if self.patches < 1:
            raise ConfigError("patches must be >= 1")


@dataclass(frozen=True)
class TimingReport:
    hardware_steps: int
    latency_us: float
    max_throughput_hz: float

    def to_dict(self):
        return {"hardware_steps": self.hardware_steps, "latency_us": self.latency_us,
                "latency_ms": self.latency_us / 1e3, "max_throughput_hz": self.max_throughput_hz}


@dataclass(frozen=True)
class PowerModel:
    """Static power per core (mW) and dynamic energy per SynOp (pJ, i.e. pW per SynOp/s)."""

    static_mw_per_core: float = 0.85
    dynamic_pw_per_synop: float = 10.0

    def __post_init__(self):
        if not (self.static_mw_per_core > 0 and self.dynamic_pw_per_synop > 0):
            raise ConfigError("power coefficients must be > 0")

    @classmethod
    def fit(cls, cores, synops_per_s, static_mw, dynamic_mw):
        """Coefficients reproducing one measured (static, dynamic) pair."""
        return cls(static_mw / cores, dynamic_mw / synops_per_s * 1e9)


def pipeline_stages(model) -> int:
    """Stages of the backbone pipeline: blocks for MCU backbones, else synaptic layers."""
    if model.blocks:
        return model.blocks
    return len(model.synaptic_layers())


def hardware_steps(model, cfg: ScheduleConfig) -> int:
    """Hardware steps from input to output of one inference.

    Fall-through: one step per synapse-bearing layer.  Pipelined: one step
    per backbone stage, plus one per input patch when the input is patched
    (the patches stream through the pipeline one after the other).
    """
    if cfg.scheme == "fall_through":
        if cfg.patches > 1:
            raise ConfigError("patched inference requires a pipelined backbone")
        return len(model.synaptic_layers())
    if cfg.patches > 1 and not model.stateless_backbone:
        raise ConfigError("patched pipelined scheduling requires a stateless backbone")
    stages = pipeline_stages(model)
    return stages + (cfg.patches if cfg.patches > 1 else 0)


def timing(steps: int, step_time_us: float) -> TimingReport:
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    latency = steps * step_time_us
    return TimingReport(int(steps), latency, 1e6 / latency)


def estimate_power(cores: int, synops_per_s: float, pm: PowerModel):
    """Returns ``(static_mw, dynamic_mw, total_mw)``."""
    if cores < 1:
        raise ConfigError("cores must be >= 1")
    if synops_per_s < 0:
        raise ConfigError("synops_per_s must be >= 0")
    static = cores * pm.static_mw_per_core
    dynamic = synops_per_s * pm.dynamic_pw_per_synop * 1e-9
    return static, dynamic, static + dynamic
