//! Parameter charts, priors, batch maximum-likelihood fitting, streaming
//! tracking via the discounted evidence rate, and Bayesian model
//! comparison over mode counts.

mod chart;
mod compare;
mod fit;
mod init;
mod prior;
mod track;

pub use chart::{ChartGrads, MeanStructure, ParamChart};
pub use compare::{compare_models, Candidate, CandidateResult, ModelPosterior};
pub use fit::{default_prior, fit_mle, FitOptions, FitResult};
pub use init::{init_heuristic, InitOptions};
pub use prior::Prior;
pub use track::{track_stream, StepRule, TrackOptions, TrackPoint, TrackSummary};
