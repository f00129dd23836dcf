//! Files written by the experiment commands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use ipsg_core::optimizers::MethodId;
use ipsg_core::simnet::RunResult;

pub const STOPPING_NOTE: &str = "stop_iter is the last iteration of the first run of `window` consecutive iterations whose relative error is <= eps_tol; that window starts at stop_iter - window + 1";
pub const STANDARDIZATION_NOTE: &str = "tabular features are standardized with the population standard deviation (divide by N) before the ones column is appended";

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRecord {
    pub dataset: String,
    pub method: MethodId,
    pub seed: u64,
    pub stop_iter: Option<u64>,
    pub final_error: f64,
    pub iterations: u64,
    pub kappa: f64,
    pub wall_time_s: f64,
}

pub fn summary_csv(records: &[SummaryRecord]) -> String {
    let mut s = String::from("dataset,method,seed,stop_iter,final_error,iterations,kappa,wall_time_s\n");
    for r in records {
        let stop = r.stop_iter.map_or_else(|| "none".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.3}",
            r.dataset, r.method, r.seed, stop, r.final_error, r.iterations, r.kappa, r.wall_time_s
        );
    }
    s
}

pub fn trace_file_name(dataset: &str, method: MethodId, seed: u64) -> String {
    format!("trace_{dataset}_{method}_seed{seed}.csv")
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Median of the stop iterations, counting runs that never stopped as
/// larger than any that did. `None` when more than half never stopped.
pub fn median_stop(records: &[&SummaryRecord]) -> Option<f64> {
    let mut v: Vec<f64> = records
        .iter()
        .map(|r| r.stop_iter.map_or(f64::INFINITY, |s| s as f64))
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    m.is_finite().then_some(m)
}

/// Log-scale line chart of the error traces.
pub fn svg_chart(title: &str, runs: &[RunResult]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 5] = ["#1b6ca8", "#d1495b", "#66a182", "#edae49", "#6a4c93"];
    let t_max = runs.iter().map(|r| r.errors.len()).max().unwrap_or(1).max(2) - 1;
    let positive = runs.iter().flat_map(|r| r.errors.iter()).copied().filter(|e| *e > 0.0);
    let lo = positive.clone().fold(f64::INFINITY, f64::min).max(1e-300).log10().floor();
    let hi = positive.fold(f64::NEG_INFINITY, f64::max).log10().ceil();
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (-1.0, 1.0) };
    let x = |t: usize| PAD + (W - 2.0 * PAD) * t as f64 / t_max as f64;
    let y = |e: f64| {
        let l = e.max(10f64.powf(lo)).log10();
        H - PAD - (H - 2.0 * PAD) * (l - lo) / (hi - lo)
    };

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    let mut decade = lo;
    while decade <= hi {
        let yy = y(10f64.powf(decade));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{yy:.1}\" text-anchor=\"end\">1e{decade}</text>", PAD - 4.0);
        decade += 1.0;
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t_max}</text>", W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"{}\">0</text>", H - PAD + 16.0);

    for (k, run) in runs.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let stride = (run.errors.len() / 1500).max(1);
        let pts: Vec<String> = run
            .errors
            .iter()
            .enumerate()
            .filter(|(t, _)| t % stride == 0 || *t + 1 == run.errors.len())
            .map(|(t, &e)| format!("{:.1},{:.1}", x(t), y(e)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{} seed {}</text>",
            W - PAD - 140.0,
            PAD + 14.0 * k as f64,
            run.method,
            run.seed
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stop: Option<u64>) -> SummaryRecord {
        SummaryRecord {
            dataset: "d".into(),
            method: MethodId::Sgd,
            seed: 0,
            stop_iter: stop,
            final_error: 0.5,
            iterations: 10,
            kappa: 2.0,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn medians() {
        let a = [rec(Some(3)), rec(Some(1)), rec(None)];
        assert_eq!(median_stop(&a.iter().collect::<Vec<_>>()), Some(3.0));
        let b = [rec(None), rec(None), rec(Some(1))];
        assert_eq!(median_stop(&b.iter().collect::<Vec<_>>()), None);
        let c = [rec(Some(2)), rec(Some(4))];
        assert_eq!(median_stop(&c.iter().collect::<Vec<_>>()), Some(3.0));
    }

    #[test]
    fn summary_marks_missing_stop() {
        let s = summary_csv(&[rec(None)]);
        assert!(s.lines().nth(1).unwrap().starts_with("d,sgd,0,none,0.5,"));
    }
}
