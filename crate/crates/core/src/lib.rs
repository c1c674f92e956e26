//! Go-Explore on small grid environments: archive-based exploration,
//! backward-algorithm robustification, and policy-based Go-Explore.

pub mod archive;
pub mod cellmap;
pub mod cli;
pub mod env;
pub mod explorer;
pub mod learner;
pub mod policyge;
pub mod robustify;
