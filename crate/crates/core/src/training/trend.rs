//! Directional checks on grid results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{GridRow, TrainingError};

/// The coordinate along which accuracy is compared.
///
/// `NTied` and `KTied` use only cells with `N1 = N2` (resp. `K1 = K2`) and
/// move both together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendAxis {
    N1,
    K1,
    N2,
    K2,
    NTied,
    KTied,
}

impl std::str::FromStr for TrendAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "n1" => Ok(Self::N1),
            "k1" => Ok(Self::K1),
            "n2" => Ok(Self::N2),
            "k2" => Ok(Self::K2),
            "n_tied" => Ok(Self::NTied),
            "k_tied" => Ok(Self::KTied),
            _ => Err(format!("unknown axis `{s}` (expected n1, k1, n2, k2, n_tied, k_tied)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
    NonIncreasing,
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "increasing" => Ok(Self::Increasing),
            "decreasing" => Ok(Self::Decreasing),
            "non_increasing" => Ok(Self::NonIncreasing),
            _ => Err(format!(
                "unknown direction `{s}` (expected increasing, decreasing, non_increasing)"
            )),
        }
    }
}

impl Direction {
    /// Signed step margin; positive means the step goes the required way.
    fn margin(self, prev: f64, next: f64) -> f64 {
        match self {
            Self::Increasing => next - prev,
            Self::Decreasing | Self::NonIncreasing => prev - next,
        }
    }

    fn holds(self, margin: f64) -> bool {
        match self {
            Self::Increasing | Self::Decreasing => margin > 0.0,
            Self::NonIncreasing => margin >= 0.0,
        }
    }
}

/// Accuracy along the axis for one setting of every other coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendGroup {
    /// The coordinates held fixed, e.g. `N1=5 N2=5 K1=5 variant=proto`.
    pub fixed: String,
    /// `(axis value, seed-averaged accuracy)` in ascending axis order.
    pub points: Vec<(usize, f64)>,
    /// One margin per consecutive pair of points.
    pub margins: Vec<f64>,
    pub seeds: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub axis: TrendAxis,
    pub direction: Direction,
    pub groups: Vec<TrendGroup>,
    pub passed: bool,
    pub warnings: Vec<String>,
}

impl TrendReport {
    pub fn min_margin(&self) -> Option<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.margins.iter().copied())
            .reduce(f64::min)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "trend {:?} along {:?}: {}\n",
            self.direction,
            self.axis,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for g in &self.groups {
            let pts: Vec<String> = g.points.iter().map(|(v, a)| format!("{v}:{a:.4}")).collect();
            let ms: Vec<String> = g.margins.iter().map(|m| format!("{m:+.4}")).collect();
            let _ = writeln!(
                s,
                "  [{}] {} over {} seed(s): points {} margins {}",
                if g.passed { "ok" } else { "FAIL" },
                g.fixed,
                g.seeds,
                pts.join(" "),
                if ms.is_empty() { "-".into() } else { ms.join(" ") }
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
        s
    }
}

fn split(row: &GridRow, axis: TrendAxis) -> Option<(usize, String)> {
    let rest = format!(
        "variant={} q={} iters={}",
        row.model_variant, row.q_per_class, row.iterations
    );
    let (value, fixed) = match axis {
        TrendAxis::N1 => (row.n1, format!("K1={} N2={} K2={}", row.k1, row.n2, row.k2)),
        TrendAxis::K1 => (row.k1, format!("N1={} N2={} K2={}", row.n1, row.n2, row.k2)),
        TrendAxis::N2 => (row.n2, format!("N1={} K1={} K2={}", row.n1, row.k1, row.k2)),
        TrendAxis::K2 => (row.k2, format!("N1={} K1={} N2={}", row.n1, row.k1, row.n2)),
        TrendAxis::NTied if row.n1 == row.n2 => (row.n1, format!("K1={} K2={}", row.k1, row.k2)),
        TrendAxis::KTied if row.k1 == row.k2 => (row.k1, format!("N1={} N2={}", row.n1, row.n2)),
        _ => return None,
    };
    Some((value, format!("{fixed} {rest}")))
}

/// Checks that seed-averaged accuracy moves in `direction` along `axis`
/// within every group of otherwise identical cells.
///
/// A group whose axis has a single value passes vacuously with a warning.
/// Failed cells, or a seed present at one axis value but not another, are
/// specification errors.
pub fn trend_check(rows: &[GridRow], axis: TrendAxis, direction: Direction) -> Result<TrendReport, TrainingError> {
    if let Some(bad) = rows.iter().find(|r| !r.is_ok() || r.accuracy_mean.is_none()) {
        return Err(TrainingError::Spec(format!(
            "cell `{}` has no result ({})",
            bad.cell_id, bad.status
        )));
    }
    // group -> axis value -> seed -> accuracy
    let mut groups: BTreeMap<String, BTreeMap<usize, BTreeMap<u64, f64>>> = BTreeMap::new();
    for r in rows {
        let Some((value, fixed)) = split(r, axis) else { continue };
        let acc = r.accuracy_mean.expect("checked above");
        if groups
            .entry(fixed.clone())
            .or_default()
            .entry(value)
            .or_default()
            .insert(r.seed, acc)
            .is_some()
        {
            return Err(TrainingError::Spec(format!(
                "duplicate cell for {fixed}, {axis:?}={value}, seed {}",
                r.seed
            )));
        }
    }
    if groups.is_empty() {
        return Err(TrainingError::Spec(format!("no cells vary along {axis:?}")));
    }

    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (fixed, by_value) in groups {
        let first_seeds: Vec<u64> = by_value.values().next().expect("nonempty").keys().copied().collect();
        for (value, seeds) in &by_value {
            let s: Vec<u64> = seeds.keys().copied().collect();
            if s != first_seeds {
                return Err(TrainingError::Spec(format!(
                    "missing cells for {fixed}: {axis:?}={value} has seeds {s:?}, expected {first_seeds:?}"
                )));
            }
        }
        let points: Vec<(usize, f64)> = by_value
            .iter()
            .map(|(&v, seeds)| (v, seeds.values().sum::<f64>() / seeds.len() as f64))
            .collect();
        if points.len() < 2 {
            warnings.push(format!("{fixed}: only {axis:?}={} present; vacuous pass", points[0].0));
        }
        let margins: Vec<f64> = points.windows(2).map(|w| direction.margin(w[0].1, w[1].1)).collect();
        let passed = margins.iter().all(|&m| direction.holds(m));
        out.push(TrendGroup {
            fixed,
            points,
            margins,
            seeds: first_seeds.len(),
            passed,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(TrendReport {
        axis,
        direction,
        passed: out.iter().all(|g| g.passed),
        groups: out,
        warnings,
    })
}
