//! Config-driven experiment runs: seeded training batches written to CSV
//! with a manifest, OT solves on stored measures, and SVG learning curves.

mod config;
mod plot;
mod run;

pub use config::{
    apply_override, split_override, ExperimentConfig, ExperimentKind, GridworldSpec, LoadedConfig, OtSpec,
    PolicySpec, TrainerKind,
};
pub use plot::{load_series, plot, render_svg, PlotSummary, Schema, Series};
pub use run::{
    resolve_out_dir, run_experiment, solve_ot, Manifest, OtReport, RunOptions, SeedRun, SeedStatus, Versions,
    ATTRACT_COLUMNS, REPULSE_COLUMNS,
};
