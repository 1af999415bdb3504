"""Dynamic fused Gaussian process: fusion of multi-instrument spatio-temporal data."""

from ._core import (
    CarParams,
    Error,
    EstimatorConfig,
    InstrumentSpec,
    InvalidArgument,
    InvalidParameter,
    IoError,
    NumericalError,
    Params,
    Problem,
    ScenarioConfig,
    SwathSpec,
    __version__,
    crps_gaussian,
    cross_validate,
    fit,
    initial_params,
    neg2_loglik,
    predict,
    rmspe,
)


def small_scenario(nx=12, ny=12, horizon=4, seed=1):
    """A default two-instrument scenario shrunk to an nx x ny grid with four basis functions."""
    cfg = ScenarioConfig()
    cfg.nx, cfg.ny, cfg.horizon, cfg.seed = nx, ny, horizon, seed
    cfg.basis_counts = [4]
    insts = cfg.instruments
    for inst in insts:
        inst.swath = SwathSpec(max(1, nx // 5), max(1, nx // 6), nx, 0)
    cfg.instruments = insts
    return cfg


__all__ = [name for name in dir() if not name.startswith("_")]
