//! SDR scoring, speaker identification and report tables.

mod id;
mod report;
mod sdr;

pub use id::{representation_analysis, speaker_id_eval, IdReport, RepresentationRow};
pub use report::{ExperimentReport, IdentificationRow, SeparationRow};
pub use sdr::{ideal_binary_mask, permutations, sdr, sdr_improvement, SdrReport, SDR_CAP_DB};
