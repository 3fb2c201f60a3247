//! Exit-code classification of errors.

use recess_core::dataset::DatasetError;
use recess_core::evolve::EvolveError;
use recess_core::imaging::ImagingError;
use recess_core::model::ModelError;
use recess_core::phantom::PhantomError;
use recess_core::preprocess::PreprocessError;
use recess_core::training::TrainingError;
use serde::Serialize;

/// Bad flags, configs or inputs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UserError(pub String);

pub const EXIT_USER: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Serialize)]
pub struct ErrorTrailer {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    pub causes: Vec<String>,
}

fn user_kind(e: &(dyn std::error::Error + 'static)) -> Option<bool> {
    if e.is::<UserError>() || e.is::<serde_json::Error>() || e.is::<clap::Error>() {
        return Some(true);
    }
    if let Some(e) = e.downcast_ref::<TrainingError>() {
        return match e {
            TrainingError::Config(_) | TrainingError::Shape(_) => Some(true),
            TrainingError::NonFiniteLoss { .. } => Some(false),
            _ => None,
        };
    }
    if let Some(e) = e.downcast_ref::<ModelError>() {
        return match e {
            ModelError::Io { .. } | ModelError::NoDetection => Some(false),
            _ => Some(true),
        };
    }
    if let Some(e) = e.downcast_ref::<DatasetError>() {
        return Some(!matches!(e, DatasetError::Io { .. }));
    }
    if let Some(e) = e.downcast_ref::<PhantomError>() {
        return match e {
            PhantomError::Params(_) => Some(true),
            PhantomError::Io { .. } => Some(false),
            _ => None,
        };
    }
    if let Some(e) = e.downcast_ref::<PreprocessError>() {
        return Some(!matches!(e, PreprocessError::NoFrameFound));
    }
    if let Some(e) = e.downcast_ref::<EvolveError>() {
        return match e {
            EvolveError::Io(_) | EvolveError::Fitness(_) | EvolveError::InvalidFitness(_) => None,
            _ => Some(true),
        };
    }
    if e.is::<ImagingError>() || e.is::<std::io::Error>() {
        return Some(false);
    }
    None
}

/// 1 for user errors, 2 for runtime failures; the first recognised error
/// in the chain decides, unrecognised chains count as runtime failures.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(user) = user_kind(cause) {
            return if user { EXIT_USER } else { EXIT_RUNTIME };
        }
    }
    EXIT_RUNTIME
}

pub fn trailer(err: &anyhow::Error) -> ErrorTrailer {
    let code = exit_code(err);
    ErrorTrailer {
        kind: if code == EXIT_USER { "user" } else { "runtime" },
        exit_code: code,
        message: err.to_string(),
        causes: err.chain().skip(1).map(|c| c.to_string()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classification() {
        let e: anyhow::Error = UserError("bad".into()).into();
        assert_eq!(exit_code(&e), EXIT_USER);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let e = Err::<(), _>(io).context("reading").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_RUNTIME);
        let e: anyhow::Error = TrainingError::Config("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_USER);
        let e: anyhow::Error = ModelError::Shape("x".into()).into();
        assert_eq!(trailer(&e).kind, "user");
    }
}
