//! Counting metrics, whole-video inference, and evaluation reports.

mod metrics;
mod pipeline;
mod report;

pub use metrics::{mae, obo, Mae};
pub use pipeline::{
    answer_clip, count_video, eval_prompt, evaluate, run_protocol, CountDiagnostics, Counter, EvalResult,
    ProtocolKind, ProtocolSpec, VideoResult, EVAL_QUESTION,
};
pub use report::{format_report, parse_report, summary_line, ReportHeader};

#[cfg(test)]
mod tests;
