//! Detection metrics and file-based reporting: ROC curves with
//! trapezoid AUC, TPR/TNR, empirical CDFs, and CSV/SVG/PNG emitters.

mod emit;
mod roc;

pub use emit::{emit_cdf, emit_feature_maps, svg_step_plot, PlotSeries};
pub use roc::{ecdf, roc_auc, tpr_tnr, RocCurve, YoudenPoint};

/// Numerically stable logistic function.
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}
