//! Distinct-states-over-steps curves, guided-vs-random statistics and a
//! static SVG chart, computed from recorded campaigns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::harness::{LoadedCampaign, Mode, StepRecord};
use crate::stats::{a12, mann_whitney_greater, MannWhitney};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no campaigns to report on")]
    Empty,
    #[error("campaign {0} has no steps")]
    NoSteps(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// One campaign reduced to what the report needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    /// Registry size after each step.
    #[serde(skip)]
    pub curve: Vec<u32>,
    pub steps: usize,
    pub distinct_states: u32,
    pub findings: usize,
}

impl RunSummary {
    pub fn from_steps(name: impl Into<String>, mode: Mode, seed: u64, steps: &[StepRecord], findings: usize) -> Self {
        let curve: Vec<u32> = steps.iter().map(|s| s.distinct_states).collect();
        RunSummary {
            name: name.into(),
            mode,
            seed,
            steps: curve.len(),
            distinct_states: curve.last().copied().unwrap_or(0),
            curve,
            findings,
        }
    }

    pub fn from_loaded(name: impl Into<String>, c: &LoadedCampaign) -> Self {
        Self::from_steps(name, c.manifest.mode, c.manifest.seed, &c.steps, c.findings.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Steps taken, starting at 1.
    pub step: u64,
    pub mean: f64,
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCurve {
    pub mode: Mode,
    pub runs: usize,
    pub points: Vec<CurvePoint>,
}

/// How much longer the baseline needs to match the guided campaigns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedUp {
    /// Mean distinct states of the guided runs at their last step.
    pub target: f64,
    /// First step at which the guided mean reaches `target`.
    pub guided_steps: u64,
    /// First step at which the baseline mean reaches `target`, if it does
    /// within its budget.
    pub baseline_steps: Option<u64>,
    pub baseline_budget: u64,
    /// `baseline_steps / guided_steps`, or a lower bound from the budget
    /// when the baseline never gets there.
    pub ratio: f64,
    pub ratio_is_lower_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub guided_final: Vec<u32>,
    pub random_final: Vec<u32>,
    pub guided_mean: f64,
    pub random_mean: f64,
    pub mann_whitney: MannWhitney,
    pub a12: f64,
    pub speed_up: SpeedUp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub curves: Vec<ModeCurve>,
    pub comparison: Option<Comparison>,
}

/// Mean, min and max across curves, truncated to the shortest one.
pub fn aggregate(curves: &[&[u32]]) -> Vec<CurvePoint> {
    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let col = curves.iter().map(|c| c[i]);
            let sum: u64 = col.clone().map(u64::from).sum();
            CurvePoint {
                step: i as u64 + 1,
                mean: sum as f64 / curves.len() as f64,
                min: col.clone().min().expect("non-empty"),
                max: col.max().expect("non-empty"),
            }
        })
        .collect()
}

pub fn speed_up(guided: &[CurvePoint], baseline: &[CurvePoint]) -> Option<SpeedUp> {
    let target = guided.last()?.mean;
    let reach = |c: &[CurvePoint]| c.iter().find(|p| p.mean >= target).map(|p| p.step);
    let guided_steps = reach(guided).expect("the last point reaches its own mean");
    let baseline_steps = reach(baseline);
    let baseline_budget = baseline.len() as u64;
    let (ratio, ratio_is_lower_bound) = match baseline_steps {
        Some(b) => (b as f64 / guided_steps as f64, false),
        None => (baseline_budget as f64 / guided_steps as f64, true),
    };
    Some(SpeedUp { target, guided_steps, baseline_steps, baseline_budget, ratio, ratio_is_lower_bound })
}

impl Report {
    pub fn build(mut runs: Vec<RunSummary>) -> Result<Report, ReportError> {
        if runs.is_empty() {
            return Err(ReportError::Empty);
        }
        if let Some(r) = runs.iter().find(|r| r.curve.is_empty()) {
            return Err(ReportError::NoSteps(r.name.clone()));
        }
        runs.sort_by(|a, b| (a.mode, &a.name).cmp(&(b.mode, &b.name)));
        let mut by_mode: BTreeMap<Mode, Vec<&RunSummary>> = BTreeMap::new();
        for r in &runs {
            by_mode.entry(r.mode).or_default().push(r);
        }
        let curves: Vec<ModeCurve> = by_mode
            .iter()
            .map(|(mode, rs)| {
                let cs: Vec<&[u32]> = rs.iter().map(|r| r.curve.as_slice()).collect();
                ModeCurve { mode: *mode, runs: rs.len(), points: aggregate(&cs) }
            })
            .collect();
        let comparison = match (by_mode.get(&Mode::Guided), by_mode.get(&Mode::Random)) {
            (Some(g), Some(b)) => {
                let gf: Vec<u32> = g.iter().map(|r| r.distinct_states).collect();
                let bf: Vec<u32> = b.iter().map(|r| r.distinct_states).collect();
                let (gx, bx): (Vec<f64>, Vec<f64>) =
                    (gf.iter().map(|v| f64::from(*v)).collect(), bf.iter().map(|v| f64::from(*v)).collect());
                let curve = |m| &curves.iter().find(|c| c.mode == m).expect("mode present").points;
                Some(Comparison {
                    guided_mean: gx.iter().sum::<f64>() / gx.len() as f64,
                    random_mean: bx.iter().sum::<f64>() / bx.len() as f64,
                    mann_whitney: mann_whitney_greater(&gx, &bx),
                    a12: a12(&gx, &bx),
                    speed_up: speed_up(curve(Mode::Guided), curve(Mode::Random)).expect("curves are non-empty"),
                    guided_final: gf,
                    random_final: bf,
                })
            }
            _ => None,
        };
        Ok(Report { runs, curves, comparison })
    }

    /// One row per mode and step.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("mode,step,runs,mean,min,max\n");
        for c in &self.curves {
            for p in &c.points {
                let _ = writeln!(out, "{},{},{},{:.4},{},{}", c.mode.name(), p.step, c.runs, p.mean, p.min, p.max);
            }
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "mode", "seed", "steps", "distinct_states", "findings"]).expect("in-memory write");
        for r in &self.runs {
            w.write_record([
                r.name.clone(),
                r.mode.name().to_owned(),
                r.seed.to_string(),
                r.steps.to_string(),
                r.distinct_states.to_string(),
                r.findings.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 fields")
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Mean curves with min/max bands, one colour per mode.
    pub fn svg(&self) -> String {
        const W: f64 = 800.0;
        const H: f64 = 480.0;
        const L: f64 = 70.0;
        const R: f64 = 20.0;
        const T: f64 = 30.0;
        const B: f64 = 55.0;
        let max_step = self.curves.iter().map(|c| c.points.len()).max().unwrap_or(1).max(1) as f64;
        let max_y = self.curves.iter().flat_map(|c| c.points.iter().map(|p| p.max)).max().unwrap_or(1).max(1);
        let y_top = nice_ceiling(max_y);
        let x = |step: f64| L + (step / max_step) * (W - L - R);
        let y = |v: f64| H - B - (v / y_top as f64) * (H - T - B);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        for i in 0..=5 {
            let v = y_top as f64 * i as f64 / 5.0;
            let yy = y(v);
            let _ = writeln!(
                s,
                r##"<line x1="{L}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.0}</text>"##,
                W - R,
                L - 6.0,
                yy + 4.0
            );
        }
        for i in 0..=5 {
            let st = max_step * i as f64 / 5.0;
            let xx = x(st);
            let _ = writeln!(
                s,
                r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{st:.0}</text>"#,
                H - B + 18.0
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{L}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/><line x1="{L}" y1="{T}" x2="{L}" y2="{:.2}" stroke="black"/>"#,
            H - B,
            W - R,
            H - B,
            H - B
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">steps</text>"#, (L + W - R) / 2.0, H - 12.0);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">distinct states</text>"#,
            (T + H - B) / 2.0,
            (T + H - B) / 2.0
        );
        for (i, c) in self.curves.iter().enumerate() {
            let colour = match c.mode {
                Mode::Guided => "#1f77b4",
                Mode::Random => "#d62728",
            };
            let upper: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", x(p.step as f64), y(p.max.into()))).collect();
            let lower: Vec<String> =
                c.points.iter().rev().map(|p| format!("{:.2},{:.2}", x(p.step as f64), y(p.min.into()))).collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{} {}" fill="{colour}" fill-opacity="0.15" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let mean: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", x(p.step as f64), y(p.mean))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, mean.join(" "));
            let ly = T + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="12" height="12" fill="{colour}"/><text x="{:.2}" y="{:.2}">{} (n={})</text>"#,
                L + 12.0,
                ly,
                L + 30.0,
                ly + 10.0,
                c.mode.name(),
                c.runs
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes curves.csv, runs.csv, summary.json and distinct_states.svg.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        let io = |p: &Path, e: std::io::Error| ReportError::Io { path: p.display().to_string(), message: e.to_string() };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, body) in [
            ("curves.csv", self.curves_csv()),
            ("runs.csv", self.runs_csv()),
            ("summary.json", self.summary_json()),
            ("distinct_states.svg", self.svg()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| io(&p, e))?;
        }
        Ok(())
    }
}

fn nice_ceiling(v: u32) -> u32 {
    let mut step = 1;
    while step * 10 < v {
        step *= 10;
    }
    v.div_ceil(step) * step
}
