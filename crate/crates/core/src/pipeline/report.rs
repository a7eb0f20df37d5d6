use std::fmt::Write as _;

use serde::Serialize;

use super::ParamCounts;
use crate::container::MatrixType;
use crate::planner::SharePolicy;

/// Allowed gap between achieved and target removed fraction over the compressed scope.
pub const RATIO_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub matrix_type: MatrixType,
    pub group: usize,
    pub layers: Vec<usize>,
    pub k: usize,
    pub whitened_loss: f64,
    /// Diagonal shift the whitening factor needed (0 when none).
    pub jitter: f64,
    pub over_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeTotals {
    pub matrix_type: MatrixType,
    pub policy: SharePolicy,
    pub groups: usize,
    pub original_params: usize,
    pub stored_params: usize,
    /// Sum over groups of squared whitened losses.
    pub whitened_loss_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub target_removed: f64,
    pub sequential_update: bool,
    pub groups: Vec<GroupReport>,
    pub types: Vec<TypeTotals>,
    pub scope_original: usize,
    pub scope_stored: usize,
    pub whole_original: usize,
    pub whole_stored: usize,
    pub params: ParamCounts,
    pub warnings: Vec<String>,
    /// Wall-clock per stage; left out of container metadata to keep outputs reproducible.
    #[serde(skip)]
    pub stages: Vec<StageTiming>,
}

impl CompressionReport {
    pub fn scope_removed(&self) -> f64 {
        removed(self.scope_original, self.scope_stored)
    }

    pub fn whole_removed(&self) -> f64 {
        removed(self.whole_original, self.whole_stored)
    }

    pub fn within_tolerance(&self) -> bool {
        (self.scope_removed() - self.target_removed).abs() <= RATIO_TOLERANCE
    }

    pub fn jitter_events(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| g.jitter > 0.0)
    }

    /// Deterministic JSON summary (no timings).
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        let obj = v.as_object_mut().expect("report is an object");
        obj.insert("scope_removed".into(), self.scope_removed().into());
        obj.insert("whole_removed".into(), self.whole_removed().into());
        obj.insert("within_tolerance".into(), self.within_tolerance().into());
        v
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "target removed {:.4}, sequential update {}",
            self.target_removed,
            if self.sequential_update { "on" } else { "off" }
        );
        for t in &self.types {
            let _ = writeln!(
                s,
                "  {:<4} {:<20} groups {:>3}  params {} -> {}  loss {:.6e}",
                t.matrix_type.as_str(),
                t.policy.as_str(),
                t.groups,
                t.original_params,
                t.stored_params,
                t.whitened_loss_sq.sqrt()
            );
        }
        for g in &self.groups {
            let layers: Vec<String> = g.layers.iter().map(usize::to_string).collect();
            let _ = writeln!(
                s,
                "    {} group {} layers [{}] k={} loss {:.6e}{}",
                g.matrix_type,
                g.group,
                layers.join(","),
                g.k,
                g.whitened_loss,
                if g.jitter > 0.0 {
                    format!(" jitter {:.1e}", g.jitter)
                } else {
                    String::new()
                }
            );
        }
        let _ = writeln!(
            s,
            "  compressed scope: {} -> {} params, removed {:.4} (target {:.4}, {})",
            self.scope_original,
            self.scope_stored,
            self.scope_removed(),
            self.target_removed,
            if self.within_tolerance() {
                "within tolerance"
            } else {
                "outside tolerance"
            }
        );
        let _ = writeln!(
            s,
            "  whole model: {} -> {} params, removed {:.4}",
            self.whole_original,
            self.whole_stored,
            self.whole_removed()
        );
        for st in &self.stages {
            let _ = writeln!(s, "  stage {:<12} {:.3}s", st.stage, st.seconds);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
        s
    }
}

fn removed(original: usize, stored: usize) -> f64 {
    if original == 0 {
        0.0
    } else {
        1.0 - stored as f64 / original as f64
    }
}
