"""Spatio-temporal additive mixed models for forest-condition survey data."""

__version__ = "0.1.0"

from .survey_data import (PlotTable, TreeRecord, aggregate_survey, load_survey_csv, read_plot_table,
                          weighted_median_age, write_plot_table)
from .smooth_basis import SmoothConfig, build_design, crs_basis, tprs_basis, tensor_product
from .gamm_engine import FittedModel, OptimizerConfig, fit_gamm, load_model, save_model
from .posterior_trend import FixedAge, Grid1, Grid2, ObservedAge, Scenario, build_scenario_grid, spatial_map, trend
from .grid_sim import SimProtocol, build_universe, run_grid_examination
from .diagnostics import acf_pacf, empirical_semivariogram, normalized_residuals
from .synthetic import SyntheticConfig, synthesize_plots, synthesize_survey

__all__ = [
    "PlotTable", "TreeRecord", "aggregate_survey", "load_survey_csv", "read_plot_table", "weighted_median_age",
    "write_plot_table", "SmoothConfig", "build_design", "crs_basis", "tprs_basis", "tensor_product",
    "FittedModel", "OptimizerConfig", "fit_gamm", "load_model", "save_model", "FixedAge", "Grid1", "Grid2",
    "ObservedAge", "Scenario", "build_scenario_grid", "spatial_map", "trend", "SimProtocol", "build_universe",
    "run_grid_examination", "acf_pacf", "empirical_semivariogram", "normalized_residuals", "SyntheticConfig",
    "synthesize_plots", "synthesize_survey",
]
