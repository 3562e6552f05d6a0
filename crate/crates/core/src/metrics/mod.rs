pub mod agreement;
pub mod categories;
pub mod cer;
pub mod efficiency;

pub use agreement::{
    agreement, kappa_from_labels, overall_means, AgreementError, AgreementReport, AgreementStats, Confusion,
    Grouping,
};
pub use categories::{categorize_errors, CategorizeError, ErrorCategory, ErrorCategoryReport};
pub use cer::{align, compute_cer, CerBreakdown, CerComparison, CerError, EditOp, NormalizationPolicy};
pub use efficiency::{
    efficiency_gain, AutomatedTimings, EfficiencyError, EfficiencyReport, HoursAt, TraditionalTimings,
    WorkflowTimings,
};
