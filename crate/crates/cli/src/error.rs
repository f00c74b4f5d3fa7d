//! Mapping failures to exit codes.

use coo_core::consistency::ConsistencyError;
use coo_core::experiments::StudyError;
use coo_core::pipeline::PipelineError;
use coo_core::provider::ProviderError;
use coo_core::ranking::RankingError;
use coo_core::reasoning::ReasoningError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Validation = 1,
    Provider = 2,
    ReplayMiss = 3,
}

fn from_reasoning(e: &ReasoningError) -> Option<&ProviderError> {
    match e {
        ReasoningError::Provider(p) => Some(p),
        ReasoningError::Config(_) => None,
    }
}

fn from_ranking(e: &RankingError) -> Option<&ProviderError> {
    match e {
        RankingError::Provider(p) => Some(p),
        _ => None,
    }
}

fn from_consistency(e: &ConsistencyError) -> Option<&ProviderError> {
    match e {
        ConsistencyError::Provider(p) => Some(p),
        ConsistencyError::AllFailed { last, .. } => Some(last),
        ConsistencyError::Reasoning(r) => from_reasoning(r),
        ConsistencyError::Domain(_) => None,
    }
}

fn from_pipeline(e: &PipelineError) -> Option<&ProviderError> {
    match e {
        PipelineError::Provider(p) => Some(p),
        PipelineError::Ranking(r) => from_ranking(r),
        PipelineError::Reasoning(r) => from_reasoning(r),
        PipelineError::Consistency(c) => from_consistency(c),
        PipelineError::Config(_) => None,
    }
}

fn from_study(e: &StudyError) -> Option<&ProviderError> {
    match e {
        StudyError::Consistency(c) => from_consistency(c),
        StudyError::Ranking(r) => from_ranking(r),
        StudyError::Reasoning(r) => from_reasoning(r),
        _ => None,
    }
}

/// The provider failure behind `err`, looking through the crate's wrappers.
pub fn provider_error(err: &anyhow::Error) -> Option<&ProviderError> {
    err.chain().find_map(|cause| {
        cause
            .downcast_ref::<ProviderError>()
            .or_else(|| cause.downcast_ref::<PipelineError>().and_then(from_pipeline))
            .or_else(|| cause.downcast_ref::<StudyError>().and_then(from_study))
            .or_else(|| cause.downcast_ref::<ConsistencyError>().and_then(from_consistency))
            .or_else(|| cause.downcast_ref::<RankingError>().and_then(from_ranking))
            .or_else(|| cause.downcast_ref::<ReasoningError>().and_then(from_reasoning))
    })
}

pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    match provider_error(err) {
        Some(ProviderError::ReplayMiss { .. }) => ExitCode::ReplayMiss,
        Some(ProviderError::Transport(_) | ProviderError::Config(_) | ProviderError::Io(_)) => ExitCode::Provider,
        Some(ProviderError::Domain(_)) | None => ExitCode::Validation,
    }
}
