//! Oracles shared by the integration suites and the acceptance target.
//! Each check returns a [`Check`] instead of panicking so the acceptance
//! runner can report every criterion.
#![allow(dead_code)]

pub mod bandit;
pub mod degeneracy;
pub mod desk;
pub mod determinism;
pub mod gradients;
pub mod gspo;
pub mod rewards;
pub mod routing;

use std::fmt::Write as _;

/// Outcome of one oracle.
#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    /// Conjunction of sub-checks; the detail lists the failing ones first.
    pub fn all(parts: Vec<(&str, Check)>) -> Self {
        let pass = parts.iter().all(|(_, c)| c.pass);
        let mut detail = String::new();
        for (name, c) in parts.iter().filter(|(_, c)| !c.pass) {
            let _ = write!(detail, "FAILED {name}: {}; ", c.detail);
        }
        for (name, c) in parts.iter().filter(|(_, c)| c.pass) {
            let _ = write!(detail, "{name}: {}; ", c.detail);
        }
        Self {
            pass,
            detail: detail.trim_end_matches("; ").to_string(),
        }
    }

    #[track_caller]
    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}
