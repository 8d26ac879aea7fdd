use std::fmt::Write as _;
use std::path::Path;

use super::likelihood::{check_inputs, evaluate, hard_from_footprint};
use super::{NeuralMesh, RenderError, Result, SoftKernel};
use crate::featureio::{FeatureMap, ForegroundMask};
use crate::geometry::{rasterize_visibility, Camera, Pose, PoseGrid};

/// Pose search settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub grid: PoseGrid,
    /// How many of the best grid poses are refined.
    pub candidates: usize,
    /// Adam step on the three angles, radians.
    pub angle_step: f64,
    /// Adam step on distance as a fraction of the starting distance.
    pub distance_step: f64,
    /// Multiplicative step decay per iteration.
    pub step_decay: f64,
    pub max_iterations: usize,
    /// Converged once the smoothed objective improves by less than
    /// `tolerance * max(1, |value|)` over `window` iterations.
    pub tolerance: f64,
    pub window: usize,
    pub kernel: SoftKernel,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            grid: PoseGrid::default(),
            candidates: 3,
            angle_step: 0.05,
            distance_step: 0.02,
            step_decay: 0.99,
            max_iterations: 300,
            tolerance: 1e-6,
            window: 10,
            kernel: SoftKernel::default(),
        }
    }
}

impl OptimizeOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RenderError::InvalidParameter(m.into()));
        if self.grid.is_empty() {
            return bad("pose grid is empty");
        }
        if self.candidates == 0 {
            return bad("candidate count must be positive");
        }
        if !(self.angle_step > 0.0 && self.distance_step >= 0.0) {
            return bad("step sizes must be positive");
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return bad("step decay must lie in (0, 1]");
        }
        if !(self.tolerance >= 0.0) || self.window == 0 {
            return bad("convergence tolerance must be non-negative with a positive window");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Hard objective at `pose`.
    pub final_nll: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Rank of the grid candidate the winner started from, 0 = best.
    pub candidate_rank: usize,
}

/// Hard objective over the grid, best first. Ties keep grid order; poses
/// that cannot be projected rank last.
pub fn init_candidates(
    image: &FeatureMap,
    nm: &NeuralMesh,
    camera: &Camera,
    mask: &ForegroundMask,
    grid: &PoseGrid,
    k: usize,
) -> Result<Vec<(Pose, f64)>> {
    if grid.is_empty() {
        return Err(RenderError::InvalidParameter("pose grid is empty".into()));
    }
    check_inputs(image, nm, camera, mask)?;
    let mut scored: Vec<(Pose, f64)> = grid
        .poses()?
        .into_iter()
        .map(|p| {
            let v = rasterize_visibility(nm.mesh(), &p, camera)
                .map(|rec| hard_from_footprint(image, nm, mask, rec.footprint.as_ref().unwrap()))
                .unwrap_or(f64::INFINITY);
            (p, v)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    scored.truncate(k);
    Ok(scored)
}

struct Adam {
    m: [f64; 4],
    v: [f64; 4],
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Self {
            m: [0.0; 4],
            v: [0.0; 4],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64; 4], grad: &[f64; 4], steps: &[f64; 4]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..4 {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= steps[i] * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

fn raw_pose(p: &[f64; 4]) -> Pose {
    // angles stay unwrapped while iterating so the moments stay meaningful
    Pose {
        azimuth: p[0],
        elevation: p[1],
        theta: p[2],
        distance: p[3],
    }
}

fn descend(
    image: &FeatureMap,
    nm: &NeuralMesh,
    camera: &Camera,
    mask: &ForegroundMask,
    start: Pose,
    start_nll: f64,
    opts: &OptimizeOptions,
) -> Result<(Pose, f64, usize, bool)> {
    let mut params = [start.azimuth, start.elevation, start.theta, start.distance];
    let base = [
        opts.angle_step,
        opts.angle_step,
        opts.angle_step,
        opts.distance_step * start.distance,
    ];
    let mut adam = Adam::new();
    let mut history = Vec::with_capacity(opts.max_iterations + 1);
    let (mut best_pose, mut best_nll) = (start, start_nll);
    let mut scale = 1.0;
    for it in 0..opts.max_iterations {
        let ev = evaluate(image, nm, &raw_pose(&params), camera, mask, &opts.kernel)?;
        if !ev.gradient.iter().all(|g| g.is_finite()) {
            return Err(RenderError::NonFinite);
        }
        if ev.hard < best_nll {
            best_nll = ev.hard;
            best_pose = raw_pose(&params);
        }
        history.push(ev.smooth);
        if let Some(&old) = history.len().checked_sub(opts.window + 1).map(|i| &history[i]) {
            if old - ev.smooth < opts.tolerance * ev.smooth.abs().max(1.0) {
                return Ok((best_pose.canonical(), best_nll, it, true));
            }
        }
        let steps = base.map(|s| s * scale);
        adam.step(&mut params, &ev.gradient, &steps);
        scale *= opts.step_decay;
    }
    let ev = evaluate(image, nm, &raw_pose(&params), camera, mask, &opts.kernel)?;
    if ev.hard < best_nll {
        best_nll = ev.hard;
        best_pose = raw_pose(&params);
    }
    Ok((best_pose.canonical(), best_nll, opts.max_iterations, false))
}

/// Render-and-compare pose search with the mask held fixed.
///
/// The best `candidates` grid poses are each refined by Adam on the smoothed
/// objective. Along each run the pose with the lowest hard objective is kept,
/// and the overall lowest is returned. A candidate whose evaluation fails is
/// dropped.
pub fn optimize_pose(
    image: &FeatureMap,
    nm: &NeuralMesh,
    camera: &Camera,
    mask: &ForegroundMask,
    opts: &OptimizeOptions,
) -> Result<PoseEstimate> {
    opts.validate()?;
    let starts = init_candidates(image, nm, camera, mask, &opts.grid, opts.candidates)?;
    let mut best: Option<PoseEstimate> = None;
    let mut failures = Vec::new();
    for (rank, (start, start_nll)) in starts.into_iter().enumerate() {
        if !start_nll.is_finite() {
            failures.push(format!("candidate {rank}: degenerate start"));
            continue;
        }
        match descend(image, nm, camera, mask, start, start_nll, opts) {
            Ok((pose, nll, iterations, converged)) => {
                if best.as_ref().is_none_or(|b| nll < b.final_nll) {
                    best = Some(PoseEstimate {
                        pose,
                        final_nll: nll,
                        iterations,
                        converged,
                        candidate_rank: rank,
                    });
                }
            }
            Err(e) => {
                log::debug!("candidate {rank} aborted: {e}");
                failures.push(format!("candidate {rank}: {e}"));
            }
        }
    }
    best.ok_or_else(|| RenderError::AllCandidatesFailed(failures.join("; ")))
}

impl PoseEstimate {
    /// `id azimuth elevation theta distance nll converged`
    pub fn to_line(&self, id: &str) -> String {
        let p = &self.pose;
        format!(
            "{id}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.azimuth, p.elevation, p.theta, p.distance, self.final_nll, self.converged as u8
        )
    }
}

/// Writes one estimate per line, prefixed by a header comment.
pub fn write_estimates(path: impl AsRef<Path>, estimates: &[(String, PoseEstimate)]) -> Result<()> {
    let mut text = String::from("# id\tazimuth\televation\ttheta\tdistance\tnll\tconverged\n");
    for (id, e) in estimates {
        writeln!(text, "{}", e.to_line(id)).unwrap();
    }
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|source| RenderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads estimates written by [`write_estimates`]. Iteration count and
/// candidate rank are not stored and come back as zero.
pub fn read_estimates(path: impl AsRef<Path>) -> Result<Vec<(String, PoseEstimate)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| RenderError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_estimates(&text)
}

pub fn parse_estimates(text: &str) -> Result<Vec<(String, PoseEstimate)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| RenderError::InvalidParameter(format!("estimates line {}: {m}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let pose = Pose::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?)?;
        let converged = match f[6] {
            "0" => false,
            "1" => true,
            s => return Err(bad(format!("converged flag {s:?}"))),
        };
        out.push((
            f[0].to_string(),
            PoseEstimate {
                pose,
                final_nll: num(f[5])?,
                iterations: 0,
                converged,
                candidate_rank: 0,
            },
        ));
    }
    Ok(out)
}
