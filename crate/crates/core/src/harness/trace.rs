use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Mean Loc of each training batch, keyed by optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocTrace {
    entries: Vec<(usize, f64)>,
}

impl LocTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a trace, checking that steps increase and values lie in `[0, 1]`.
    pub fn from_entries(entries: Vec<(usize, f64)>) -> Result<Self, HarnessError> {
        let mut t = Self::new();
        for (s, v) in entries {
            t.push(s, v)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, step: usize, mean_loc: f64) -> Result<(), HarnessError> {
        if let Some(&(last, _)) = self.entries.last() {
            if step <= last {
                return Err(HarnessError::BadTrace(format!("step {step} after {last}")));
            }
        }
        if !(0.0..=1.0).contains(&mean_loc) {
            return Err(HarnessError::BadTrace(format!("value {mean_loc} at step {step}")));
        }
        self.entries.push((step, mean_loc));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.1).reduce(f64::max)
    }

    /// First step whose value reaches `threshold`.
    pub fn first_step_at_least(&self, threshold: f64) -> Option<usize> {
        self.entries.iter().find(|e| e.1 >= threshold).map(|e| e.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_loc\n");
        for (s, v) in &self.entries {
            let _ = writeln!(out, "{s},{v}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim().starts_with("step,") => {}
            _ => return Err(HarnessError::BadTrace("missing `step,...` header".into())),
        }
        let mut t = Self::new();
        for (i, line) in lines.enumerate() {
            let parse = || -> Option<(usize, f64)> {
                let (s, v) = line.split_once(',')?;
                Some((s.trim().parse().ok()?, v.trim().parse().ok()?))
            };
            let (s, v) = parse().ok_or_else(|| HarnessError::BadTrace(format!("data row {}: {line:?}", i + 1)))?;
            t.push(s, v)?;
        }
        Ok(t)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// One column per trace over the union of their steps; missing values are blank.
pub fn merged_csv(traces: &[LocTrace], labels: &[String]) -> Result<String, HarnessError> {
    if traces.is_empty() {
        return Err(HarnessError::EmptyTrace);
    }
    if labels.len() != traces.len() {
        return Err(HarnessError::BadTrace(format!(
            "{} labels for {} traces",
            labels.len(),
            traces.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| l.contains(',') || l.contains('\n')) {
        return Err(HarnessError::BadTrace(format!("label {l:?} has a separator in it")));
    }
    let steps: BTreeSet<usize> = traces.iter().flat_map(|t| t.entries.iter().map(|e| e.0)).collect();
    let mut out = format!("step,{}\n", labels.join(","));
    let mut cursors = vec![0usize; traces.len()];
    for s in steps {
        out.push_str(&s.to_string());
        for (t, c) in traces.iter().zip(cursors.iter_mut()) {
            out.push(',');
            if let Some(&(step, v)) = t.entries.get(*c) {
                if step == s {
                    out.push_str(&v.to_string());
                    *c += 1;
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Files written by [`plot_loc`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlotOutput {
    pub png: PathBuf,
    pub csv: PathBuf,
}

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

/// Writes the merged CSV next to `out` (same stem, `.csv`) and a line plot at
/// `out`. The plot has axes and a 0.5 guide line but no text.
pub fn plot_loc(traces: &[LocTrace], labels: &[String], out: impl AsRef<Path>) -> Result<PlotOutput, HarnessError> {
    let csv = merged_csv(traces, labels)?;
    let png = out.as_ref().to_path_buf();
    let csv_path = png.with_extension("csv");
    if let Some(dir) = png.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&csv_path, csv)?;

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN as f64, (WIDTH - MARGIN / 2) as f64);
    let (y0, y1) = ((HEIGHT - MARGIN) as f64, (MARGIN / 2) as f64);
    let steps = traces.iter().flat_map(|t| t.entries.iter().map(|e| e.0));
    let lo = steps.clone().min().unwrap_or(0) as f64;
    let hi = (steps.max().unwrap_or(1) as f64).max(lo + 1.0);
    let px = |s: usize| x0 + (s as f64 - lo) / (hi - lo) * (x1 - x0);
    let py = |v: f64| y0 + v.clamp(0.0, 1.0) * (y1 - y0);

    let grey = Rgb([200, 200, 200]);
    line(&mut img, (x0, py(0.5)), (x1, py(0.5)), grey);
    line(&mut img, (x0, py(1.0)), (x1, py(1.0)), grey);
    let black = Rgb([0, 0, 0]);
    line(&mut img, (x0, y0), (x1, y0), black);
    line(&mut img, (x0, y0), (x0, y1), black);

    for (i, t) in traces.iter().enumerate() {
        let colour = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<(f64, f64)> = t.entries.iter().map(|&(s, v)| (px(s), py(v))).collect();
        if let [only] = pts.as_slice() {
            line(&mut img, *only, *only, colour);
        }
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], colour);
        }
    }
    img.save(&png)?;
    Ok(PlotOutput { png, csv: csv_path })
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), colour: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let f = k as f64 / n as f64;
        let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        let (x, y) = (x.round() as i64, y.round() as i64);
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}
