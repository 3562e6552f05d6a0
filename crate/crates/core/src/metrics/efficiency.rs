//! Per-classroom workflow time: manual observation versus the automated pipeline.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraditionalTimings {
    pub observation_min: f64,
    pub coding_min: f64,
    pub reporting_min: f64,
}

impl Default for TraditionalTimings {
    /// In-person observation, indicator coding and report writing for one classroom.
    fn default() -> Self {
        TraditionalTimings { observation_min: 240.0, coding_min: 20.0, reporting_min: 120.0 }
    }
}

impl TraditionalTimings {
    pub fn total(&self) -> f64 {
        self.observation_min + self.coding_min + self.reporting_min
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AutomatedTimings {
    pub audio_processing_min: f64,
    pub transcribe_refine_min: f64,
    pub evaluate_report_min: f64,
}

impl AutomatedTimings {
    pub fn total(&self) -> f64 {
        self.audio_processing_min + self.transcribe_refine_min + self.evaluate_report_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTimings {
    pub traditional: TraditionalTimings,
    pub automated: AutomatedTimings,
}

impl WorkflowTimings {
    /// Deployment averages: 5 min audio processing, 12 min transcription and
    /// refinement, 4 min evaluation and reporting against the manual default.
    pub fn reference() -> Self {
        WorkflowTimings {
            traditional: TraditionalTimings::default(),
            automated: AutomatedTimings { audio_processing_min: 5.0, transcribe_refine_min: 12.0, evaluate_report_min: 4.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EfficiencyError {
    #[error("automated workflow time must be positive")]
    ZeroAutomatedTime,
    #[error("traditional workflow time must be positive")]
    ZeroTraditionalTime,
    #[error("timing component {0} is negative or not finite")]
    InvalidComponent(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub total_traditional_min: f64,
    pub total_automated_min: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoursAt {
    pub classrooms: u32,
    pub traditional_hours: f64,
    pub automated_hours: f64,
}

impl EfficiencyReport {
    pub fn hours_at(&self, classrooms: u32) -> HoursAt {
        let n = f64::from(classrooms);
        HoursAt {
            classrooms,
            traditional_hours: n * self.total_traditional_min / 60.0,
            automated_hours: n * self.total_automated_min / 60.0,
        }
    }

    /// Speedup rounded to the nearest integer, e.g. `18×`.
    pub fn render_speedup(&self) -> String {
        format!("{}\u{d7}", self.speedup.round() as i64)
    }
}

pub fn efficiency_gain(t: &WorkflowTimings) -> Result<EfficiencyReport, EfficiencyError> {
    let components = [
        ("observation_min", t.traditional.observation_min),
        ("coding_min", t.traditional.coding_min),
        ("reporting_min", t.traditional.reporting_min),
        ("audio_processing_min", t.automated.audio_processing_min),
        ("transcribe_refine_min", t.automated.transcribe_refine_min),
        ("evaluate_report_min", t.automated.evaluate_report_min),
    ];
    if let Some((name, _)) = components.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
        return Err(EfficiencyError::InvalidComponent(name));
    }
    let (trad, auto) = (t.traditional.total(), t.automated.total());
    if auto <= 0.0 {
        return Err(EfficiencyError::ZeroAutomatedTime);
    }
    if trad <= 0.0 {
        return Err(EfficiencyError::ZeroTraditionalTime);
    }
    Ok(EfficiencyReport { total_traditional_min: trad, total_automated_min: auto, speedup: trad / auto })
}
