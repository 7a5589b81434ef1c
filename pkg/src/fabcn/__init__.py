"""Max-min fair resource allocation for full-duplex ambient backscatter OFDM networks."""
from .benchmarks import HalfDuplexAllocation, solve_equal_allocation, solve_habcn
from .channel import (ChannelGenConfig, ChannelSet, MultipathChannel, average_receive_snr,
                      freq_response, generate_channels, noise_for_snr)
from .experiments import ExperimentConfig, ResultTable, run_convergence, run_sweep
from .kernels import InfeasibleError, IterationLimitError, SolveReport, SolverOptions
from .multi import BcdState, run_bcd, solve_multi_bd
from .region import RegionBoundary, ThroughputProfile, solve_profile, trace_boundary
from .single import SingleBdSolution, dual_ascent, solve_single_bd, theorem1_power
from .system import (Allocation, SystemConfig, bd_rates, energies, lu_throughput, max_violation,
                     verify_snr_monte_carlo)

__version__ = "0.1.0"

__all__ = [
    "Allocation", "BcdState", "ChannelGenConfig", "ChannelSet", "ExperimentConfig",
    "HalfDuplexAllocation", "InfeasibleError", "IterationLimitError", "MultipathChannel",
    "RegionBoundary", "ResultTable", "SingleBdSolution", "SolveReport", "SolverOptions",
    "SystemConfig", "ThroughputProfile", "average_receive_snr", "bd_rates", "dual_ascent",
    "energies", "freq_response", "generate_channels", "lu_throughput", "max_violation",
    "noise_for_snr", "run_bcd", "run_convergence", "run_sweep", "solve_equal_allocation",
    "solve_habcn", "solve_multi_bd", "solve_profile", "solve_single_bd", "theorem1_power",
    "trace_boundary", "verify_snr_monte_carlo",
]
