"""Consistency-model multi-agent trajectory prediction (C++ core)."""

from ._cmtraj import (
    ConfigError,
    ContractViolation,
    NumericalError,
    UsageError,
    c_out,
    c_skip,
    config_hash,
    decode,
    default_config,
    encode,
    evaluate,
    fit_codec,
    generate_scenes,
    ratio_range,
    run_ablation,
    run_pipeline,
    sigmas,
    teacher_index,
    timestep_pmf,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "NumericalError",
    "UsageError",
    "c_out",
    "c_skip",
    "config_hash",
    "decode",
    "default_config",
    "encode",
    "evaluate",
    "fit_codec",
    "generate_scenes",
    "ratio_range",
    "run_ablation",
    "run_pipeline",
    "sigmas",
    "teacher_index",
    "timestep_pmf",
]
