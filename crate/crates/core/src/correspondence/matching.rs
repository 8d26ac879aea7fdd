use rayon::prelude::*;

use super::{CorrespondenceError, CorrespondenceSet, Match, Result, ScoreTable, ViewBank};
use crate::featureio::{FeatureMap, ForegroundMask};
use crate::kernel::dot;

pub const DEFAULT_LAMBDA: f64 = 0.25;

/// How matches are aggregated into a view label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoteRule {
    /// One vote per match; ties by summed score, then lowest view.
    #[default]
    Count,
    /// Votes weighted by match score; ties by count, then lowest view.
    ScoreWeighted,
}

/// Matches every foreground pixel to its most similar vertex.
///
/// A vertex's score is the maximum cosine similarity over the features it has
/// in the views where it is visible. Ties go to the lowest vertex index, and
/// within a vertex to the lowest view index.
pub fn match_raw(image: &FeatureMap, mask: &ForegroundMask, bank: &ViewBank) -> Result<CorrespondenceSet> {
    if image.channels() != bank.channels() {
        return Err(CorrespondenceError::ChannelMismatch {
            expected: bank.channels(),
            found: image.channels(),
        });
    }
    if mask.shape() != image.shape() {
        return Err(CorrespondenceError::ShapeMismatch {
            expected: image.shape(),
            found: mask.shape(),
        });
    }
    let pixels = mask.foreground_pixels();
    if pixels.is_empty() {
        return Err(CorrespondenceError::EmptyForeground);
    }
    let n = bank.num_vertices();
    let c = bank.channels();
    let entries = bank.entries();

    let per_pixel: Vec<(Match, Vec<f32>, Vec<u32>)> = pixels
        .par_iter()
        .map(|&(row, col)| {
            let f = image.cell(row, col);
            let mut scores = vec![f32::NEG_INFINITY; n];
            let mut views = vec![u32::MAX; n];
            for (v, (s_out, view_out)) in scores.iter_mut().zip(views.iter_mut()).enumerate() {
                for e in bank.vertex_range(v) {
                    let s = dot(f, &entries[e * c..(e + 1) * c]).clamp(-1.0, 1.0);
                    if s > *s_out {
                        *s_out = s;
                        *view_out = bank.entry_view()[e];
                    }
                }
            }
            let m = best_match(row, col, &scores, &views);
            (m, scores, views)
        })
        .collect();

    let mut matches = Vec::with_capacity(per_pixel.len());
    let mut table = ScoreTable {
        num_vertices: n,
        scores: Vec::with_capacity(per_pixel.len() * n),
        views: Vec::with_capacity(per_pixel.len() * n),
    };
    for (m, s, v) in per_pixel {
        matches.push(m);
        table.scores.extend_from_slice(&s);
        table.views.extend_from_slice(&v);
    }
    Ok(CorrespondenceSet {
        matches,
        pose_label: None,
        refined: false,
        table: Some(table),
    })
}

fn best_match(row: usize, col: usize, scores: &[f32], views: &[u32]) -> Match {
    let mut best = 0;
    for (v, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = v;
        }
    }
    Match {
        row,
        col,
        vertex: best,
        score: if scores[best].is_finite() { scores[best] } else { 0.0 },
        view: if views[best] == u32::MAX {
            0
        } else {
            views[best] as usize
        },
    }
}

/// Majority vote of the matches' best views.
pub fn vote_pose(raw: &CorrespondenceSet, bank: &ViewBank, rule: VoteRule) -> Result<usize> {
    if raw.matches.is_empty() {
        return Err(CorrespondenceError::EmptySet);
    }
    let views = bank.num_views();
    let mut count = vec![0usize; views];
    let mut sum = vec![0.0f64; views];
    for m in &raw.matches {
        if m.view >= views {
            return Err(CorrespondenceError::InvalidPoseLabel { label: m.view, views });
        }
        count[m.view] += 1;
        sum[m.view] += m.score as f64;
    }
    let key = |k: usize| match rule {
        VoteRule::Count => (count[k] as f64, sum[k]),
        VoteRule::ScoreWeighted => (sum[k], count[k] as f64),
    };
    let mut best = 0;
    for k in 1..views {
        if key(k) > key(best) {
            best = k;
        }
    }
    Ok(best)
}

/// Re-matches every pixel after downweighting vertices hidden in `pose_label`.
///
/// A hidden vertex's positive score is multiplied by `lambda`; non-positive
/// scores are left alone. Runs once; the stored match score is the
/// downweighted one.
pub fn refine(raw: &CorrespondenceSet, pose_label: usize, bank: &ViewBank, lambda: f64) -> Result<CorrespondenceSet> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CorrespondenceError::InvalidLambda(lambda));
    }
    if pose_label >= bank.num_views() {
        return Err(CorrespondenceError::InvalidPoseLabel {
            label: pose_label,
            views: bank.num_views(),
        });
    }
    let table = raw.table.as_ref().ok_or(CorrespondenceError::MissingScores)?;
    let n = table.num_vertices;
    if n != bank.num_vertices() {
        return Err(CorrespondenceError::ShapeMismatch {
            expected: (bank.num_vertices(), 1),
            found: (n, 1),
        });
    }
    let visible = &bank.views()[pose_label].visibility.visible;
    let lambda = lambda as f32;
    let mut adjusted = vec![0.0f32; n];
    let matches = raw
        .matches
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let scores = &table.scores[i * n..(i + 1) * n];
            let views = &table.views[i * n..(i + 1) * n];
            for ((a, &s), &vis) in adjusted.iter_mut().zip(scores).zip(visible) {
                *a = if !vis && s > 0.0 { lambda * s } else { s };
            }
            best_match(m.row, m.col, &adjusted, views)
        })
        .collect();
    Ok(CorrespondenceSet {
        matches,
        pose_label: Some(pose_label),
        refined: true,
        table: raw.table.clone(),
    })
}

/// Raw matching, pose vote and visibility refinement in sequence.
pub fn generate(
    image: &FeatureMap,
    mask: &ForegroundMask,
    bank: &ViewBank,
    lambda: f64,
    rule: VoteRule,
) -> Result<CorrespondenceSet> {
    let raw = match_raw(image, mask, bank)?;
    let label = vote_pose(&raw, bank, rule)?;
    refine(&raw, label, bank, lambda)
}

impl CorrespondenceSet {
    /// Drops the per-vertex score table kept for refinement.
    pub fn without_scores(mut self) -> Self {
        self.table = None;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::build_view_bank;
    use crate::geometry::{Camera, Mesh, Pose};

    fn basis(c: usize, k: usize) -> Vec<f32> {
        let mut v = vec![0.0; c];
        v[k % c] = 1.0;
        v
    }

    /// Two views of a unit cube; every cell of view `k` carries the one-hot
    /// feature of the vertex that owns it, offset by `k * 8`.
    fn cube_setup() -> (Mesh, Camera, Vec<Pose>, Vec<FeatureMap>) {
        let mesh = Mesh::cuboid([1.0, 1.0, 1.0], [1, 1, 1]).unwrap();
        let cam = Camera::centered(60.0, 40, 40).unwrap();
        let poses = vec![
            Pose::new(0.3, 0.2, 0.0, 5.0).unwrap(),
            Pose::new(0.3 + std::f64::consts::PI, 0.2, 0.0, 5.0).unwrap(),
        ];
        let c = 16;
        let maps = poses
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let rec = crate::geometry::rasterize_visibility(&mesh, p, &cam).unwrap();
                let fp = rec.footprint.unwrap();
                FeatureMap::from_fn(40, 40, c, |r, col| match fp.vertex_at(r, col) {
                    Some(v) => basis(c, v + 8 * k),
                    None => vec![0.0; c],
                })
                .unwrap()
            })
            .collect();
        (mesh, cam, poses, maps)
    }

    fn footprint_mask(map: &FeatureMap) -> ForegroundMask {
        let (h, w) = map.shape();
        let bits = (0..h * w)
            .map(|i| map.cell(i / w, i % w).iter().any(|&x| x != 0.0))
            .collect();
        ForegroundMask::new(h, w, bits).unwrap()
    }

    #[test]
    fn exact_copy_image_matches_generating_vertices() {
        let (mesh, cam, poses, maps) = cube_setup();
        let bank = build_view_bank(&mesh, &maps, &poses, &cam).unwrap();
        for (k, p) in poses.iter().enumerate() {
            let fp = crate::geometry::rasterize_visibility(&mesh, p, &cam)
                .unwrap()
                .footprint
                .unwrap();
            let mask = footprint_mask(&maps[k]);
            let set = generate(&maps[k], &mask, &bank, DEFAULT_LAMBDA, VoteRule::Count).unwrap();
            assert_eq!(set.pose_label, Some(k));
            assert!(set.refined);
            for m in &set.matches {
                assert_eq!(m.vertex, fp.vertex_at(m.row, m.col).unwrap());
                assert_eq!(m.score, 1.0);
                assert_eq!(m.view, k);
            }
        }
    }

    #[test]
    fn orthogonal_pixel_ties_to_vertex_zero() {
        let (mesh, cam, poses, maps) = cube_setup();
        let bank = build_view_bank(&mesh, &maps, &poses, &cam).unwrap();
        let used: Vec<bool> = (0..16)
            .map(|ch| (0..bank.num_entries()).any(|e| bank.entries()[e * 16 + ch] != 0.0))
            .collect();
        let free = used.iter().position(|&u| !u).expect("an unused channel");
        let img = FeatureMap::from_fn(40, 40, 16, |_, _| basis(16, free)).unwrap();
        let mut mask = ForegroundMask::filled(40, 40, false);
        mask.set(3, 4, true);
        let raw = match_raw(&img, &mask, &bank).unwrap();
        assert_eq!(raw.matches.len(), 1);
        let m = raw.matches[0];
        // lowest vertex that has any bank feature
        let first = (0..8).find(|&v| bank.entry_count(v) > 0).unwrap();
        assert_eq!((m.row, m.col, m.vertex, m.score), (3, 4, first, 0.0));
    }

    #[test]
    fn pixel_equal_to_bank_feature() {
        let (mesh, cam, poses, maps) = cube_setup();
        let bank = build_view_bank(&mesh, &maps, &poses, &cam).unwrap();
        let (j, u) = (0..8)
            .flat_map(|v| bank.vertex_features(v).map(move |(u, _)| (v, u)))
            .find(|&(_, u)| u == 1)
            .unwrap();
        let feat = bank.vertex_features(j).find(|&(w, _)| w == u).unwrap().1.to_vec();
        let img = FeatureMap::from_fn(40, 40, 16, |_, _| feat.clone()).unwrap();
        let mut mask = ForegroundMask::filled(40, 40, false);
        mask.set(0, 0, true);
        let m = match_raw(&img, &mask, &bank).unwrap().matches[0];
        assert_eq!((m.vertex, m.score, m.view), (j, 1.0, u));
    }

    fn set_with_views(views: &[(usize, f32)]) -> CorrespondenceSet {
        CorrespondenceSet::new(
            views
                .iter()
                .enumerate()
                .map(|(i, &(view, score))| Match {
                    row: i,
                    col: 0,
                    vertex: 0,
                    score,
                    view,
                })
                .collect(),
            None,
            false,
        )
    }

    fn many_view_bank() -> ViewBank {
        let mesh = Mesh::cuboid([1.0, 1.0, 1.0], [1, 1, 1]).unwrap();
        let cam = Camera::centered(60.0, 32, 32).unwrap();
        let poses: Vec<Pose> = (0..8)
            .map(|k| Pose::new(k as f64 * 0.7, 0.1, 0.0, 5.0).unwrap())
            .collect();
        let maps: Vec<FeatureMap> = (0..8)
            .map(|_| FeatureMap::from_fn(32, 32, 4, |_, _| basis(4, 1)).unwrap())
            .collect();
        build_view_bank(&mesh, &maps, &poses, &cam).unwrap()
    }

    #[test]
    fn vote_examples() {
        let bank = many_view_bank();
        let unanimous = set_with_views(&[(7, 0.5); 5]);
        assert_eq!(vote_pose(&unanimous, &bank, VoteRule::Count).unwrap(), 7);

        let mut v = vec![(3, 0.1); 10];
        v.extend([(5, 0.9); 4]);
        assert_eq!(vote_pose(&set_with_views(&v), &bank, VoteRule::Count).unwrap(), 3);

        // 4 vs 4; bin 5 sums to 3.2, bin 2 to 2.9
        let mut v = vec![(2, 0.725); 4];
        v.extend([(5, 0.8); 4]);
        assert_eq!(vote_pose(&set_with_views(&v), &bank, VoteRule::Count).unwrap(), 5);

        // exact tie in both count and score: lowest index
        let v = [(6, 0.5), (1, 0.5)];
        assert_eq!(vote_pose(&set_with_views(&v), &bank, VoteRule::Count).unwrap(), 1);

        // weighted rule prefers fewer, stronger votes
        let mut v = vec![(3, 0.1); 10];
        v.extend([(5, 0.9); 4]);
        assert_eq!(
            vote_pose(&set_with_views(&v), &bank, VoteRule::ScoreWeighted).unwrap(),
            5
        );

        assert!(vote_pose(&set_with_views(&[]), &bank, VoteRule::Count).is_err());
    }

    #[test]
    fn refine_identity_cases() {
        let (mesh, cam, poses, maps) = cube_setup();
        let bank = build_view_bank(&mesh, &maps, &poses, &cam).unwrap();
        let mask = footprint_mask(&maps[0]);
        let raw = match_raw(&maps[0], &mask, &bank).unwrap();
        let r1 = refine(&raw, 1, &bank, 1.0).unwrap();
        assert_eq!(r1.matches, raw.matches);
        // every raw vertex visible in view 0
        let r0 = refine(&raw, 0, &bank, 0.25).unwrap();
        assert_eq!(r0.matches, raw.matches);
        assert!(matches!(
            refine(&raw, 2, &bank, 0.25),
            Err(CorrespondenceError::InvalidPoseLabel { .. })
        ));
        assert!(matches!(
            refine(&raw, 0, &bank, 1.5),
            Err(CorrespondenceError::InvalidLambda(_))
        ));
        let stripped = raw.clone().without_scores();
        assert!(matches!(
            refine(&stripped, 0, &bank, 0.25),
            Err(CorrespondenceError::MissingScores)
        ));
    }

    #[test]
    fn input_checks() {
        let (mesh, cam, poses, maps) = cube_setup();
        let bank = build_view_bank(&mesh, &maps, &poses, &cam).unwrap();
        let empty = ForegroundMask::filled(40, 40, false);
        assert!(matches!(
            match_raw(&maps[0], &empty, &bank),
            Err(CorrespondenceError::EmptyForeground)
        ));
        let small = ForegroundMask::filled(10, 10, true);
        assert!(matches!(
            match_raw(&maps[0], &small, &bank),
            Err(CorrespondenceError::ShapeMismatch { .. })
        ));
        let other = FeatureMap::from_fn(40, 40, 3, |_, _| vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            match_raw(&other, &ForegroundMask::filled(40, 40, true), &bank),
            Err(CorrespondenceError::ChannelMismatch { .. })
        ));
    }
}
