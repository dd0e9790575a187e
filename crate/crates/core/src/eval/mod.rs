//! Constrained decoding, ranking metrics and evaluation reports.

mod beam;
mod metrics;
mod report;

pub use beam::{beam_search, beam_search_with, Beam, BeamConfig, RankedList};
pub use metrics::{hit_ratio, ndcg, rank_of};
pub use report::{
    evaluate, random_hit_rate, write_case_csv, CaseResult, CohortReport, EvalConfig, EvalReport,
};
