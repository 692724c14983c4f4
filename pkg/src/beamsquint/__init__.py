"""Wideband mmWave channel estimation with beam squint.

Modules
-------
channel     exact wideband ULA channel, bases, virtual-angle analysis
frontend    hybrid combiners and uplink pilot reception
extraction  gridless (psi, tau, alpha) extraction
uplink      grouping, LS/MMSE gain re-estimation, metrics
downlink    reciprocity, squint-compensating precoding, downlink estimation
harness     Monte Carlo scenarios and result tables
"""

from .channel import (ArrayConfig, ConfigurationError, GainStats, NumericalError, OfdmConfig, PathParams,
                      UserChannel, basis_matrix_P, channel_at_subcarrier, channel_basis_p, covariance_reconstruct,
                      full_band_basis, narrowband_channel_at_subcarrier, propagation_delay, squint_span_samples,
                      steering_vector, virtual_angle_spectrum, xi_of)
from .extraction import ExtractionConfig, ExtractionContext, ExtractionResult, ExtractionState, extract
from .frontend import (CombinerSet, HybridDims, NoiseModel, StackedCombiner, noise_covariance_C,
                       random_analog_combiner, simulate_uplink_reception, stack_combiners)
from .harness import ResultTable, ScenarioConfig, run_scenario, squint_level_to_bandwidth

__version__ = "0.1.0"

__all__ = [
    "ArrayConfig", "OfdmConfig", "PathParams", "UserChannel", "GainStats",
    "ConfigurationError", "NumericalError",
    "xi_of", "steering_vector", "channel_at_subcarrier", "narrowband_channel_at_subcarrier",
    "channel_basis_p", "basis_matrix_P", "full_band_basis", "virtual_angle_spectrum",
    "squint_span_samples", "propagation_delay", "covariance_reconstruct",
    "HybridDims", "CombinerSet", "StackedCombiner", "NoiseModel",
    "random_analog_combiner", "stack_combiners", "simulate_uplink_reception", "noise_covariance_C",
    "ExtractionConfig", "ExtractionContext", "ExtractionState", "ExtractionResult", "extract",
    "ScenarioConfig", "ResultTable", "run_scenario", "squint_level_to_bandwidth",
]
