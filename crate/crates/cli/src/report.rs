//! CSV report emission with a fixed column order, mirroring the offline and
//! closed-loop score tables.

use std::fmt::Write as _;

/// Sample mean and standard deviation (n − 1 denominator; 0 when n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const OFFLINE_HEADER: &str = "condition,model,mae_wp,mae_st,mae_th,tm,tm_std";
pub const ONLINE_HEADER: &str =
    "condition,model,interventions,interventions_std,time_s,time_s_std";

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineRow {
    pub condition: String,
    pub model: String,
    pub mae_wp: f64,
    pub mae_st: f64,
    pub mae_th: f64,
    pub tm: f64,
    pub tm_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRow {
    pub condition: String,
    pub model: String,
    pub interventions: f64,
    pub interventions_std: f64,
    pub time_s: f64,
    pub time_s_std: f64,
}

pub fn format_offline_csv(rows: &[OfflineRow], repeats: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# means over {repeats} evaluation repeats; tm_std is the sample std of per-repeat tm"
    );
    let _ = writeln!(out, "{OFFLINE_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.condition, r.model, r.mae_wp, r.mae_st, r.mae_th, r.tm, r.tm_std
        );
    }
    out
}

pub fn format_online_csv(rows: &[OnlineRow], routes: usize, repeats: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# means over {routes} routes x {repeats} repeats; *_std are sample stds over those episodes"
    );
    let _ = writeln!(out, "{ONLINE_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.condition, r.model, r.interventions, r.interventions_std, r.time_s, r.time_s_std
        );
    }
    out
}
