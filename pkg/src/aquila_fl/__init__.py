"""Communication-efficient federated learning simulator.

Implements the adaptive-quantization / device-selection strategy (AQUILA)
with lazy aggregation, plus fixed-level and loss-ratio (AdaQuantFL-style)
baselines, on desk-scale convex and small non-convex problems. Every run
carries exact transmitted-bit accounting and per-round numeric verification
of the convergence inequalities.
"""

from .config import RunConfig, load_config, parse_config_text, render_config
from .errors import (ConfigError, DegenerateInput, DimensionError, NumericError,
                     PolicyError, SimulationError)
from .fl_core import (DeviceRecord, DeviceState, RoundReport, RunResult,
                      ServerState, bootstrap_round, device_step, run,
                      run_experiment, server_update)
from .numerics import Vector, axpy, norm2, norm_inf
from .policy import (LevelPolicy, SkipPolicy, adaquantfl_level, aquila_level,
                     deviation_objective, optimal_tau, parse_level_policy,
                     should_skip)
from .quantizer import (QuantizationError, QuantizedInnovation, decode, encode,
                        payload_bits, quantization_error)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateInput", "DeviceRecord", "DeviceState",
    "DimensionError", "LevelPolicy", "NumericError", "PolicyError",
    "QuantizationError", "QuantizedInnovation", "RoundReport", "RunConfig",
    "RunResult", "ServerState", "SimulationError", "SkipPolicy", "Vector",
    "adaquantfl_level", "aquila_level", "axpy", "bootstrap_round", "decode",
    "device_step", "deviation_objective", "encode", "load_config", "norm2",
    "norm_inf", "optimal_tau", "parse_config_text", "parse_level_policy",
    "payload_bits", "quantization_error", "render_config", "run",
    "run_experiment", "server_update", "should_skip",
]
