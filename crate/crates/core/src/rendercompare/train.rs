use rayon::prelude::*;

use super::{NeuralMesh, RenderError, Result};
use crate::correspondence::{generate, CorrespondenceSet, ViewBank, VoteRule};
use crate::featureio::{CorpusManifest, FeatureMap, ForegroundMask};
use crate::kernel::{dot64, normalize};

fn check_step_inputs(
    nm: &NeuralMesh,
    image: &FeatureMap,
    corr: &CorrespondenceSet,
    mask: &ForegroundMask,
) -> Result<()> {
    if image.channels() != nm.channels() {
        return Err(RenderError::ChannelMismatch {
            expected: nm.channels(),
            found: image.channels(),
        });
    }
    if mask.shape() != image.shape() {
        return Err(RenderError::ShapeMismatch {
            expected: image.shape(),
            found: mask.shape(),
        });
    }
    if corr.is_empty() {
        return Err(RenderError::EmptyCorrespondence);
    }
    if !corr.refined {
        return Err(RenderError::NotRefined);
    }
    let (h, w) = image.shape();
    for m in &corr.matches {
        if m.row >= h || m.col >= w || m.vertex >= nm.num_vertices() {
            return Err(RenderError::MatchOutOfRange {
                row: m.row,
                col: m.col,
                vertex: m.vertex,
            });
        }
    }
    Ok(())
}

/// Mean cross-entropy of each matched pixel against its vertex, over the
/// softmax of `f . C_k / T` for every vertex and the background.
pub fn contrastive_loss(nm: &NeuralMesh, image: &FeatureMap, corr: &CorrespondenceSet) -> Result<f64> {
    if corr.is_empty() {
        return Err(RenderError::EmptyCorrespondence);
    }
    let inv_t = 1.0 / nm.temperature();
    let n = nm.num_vertices();
    let mut logits = vec![0.0f64; n + 1];
    let mut total = 0.0;
    for m in &corr.matches {
        let f = image.cell(m.row, m.col);
        for (k, l) in logits.iter_mut().enumerate().take(n) {
            *l = dot64(f, nm.vertex_feature(k)) * inv_t;
        }
        logits[n] = dot64(f, nm.background()) * inv_t;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[m.vertex];
    }
    Ok(total / corr.len() as f64)
}

fn blend_toward(target: &mut [f32], sum: &[f64], count: usize, momentum: f64) {
    let inv = 1.0 / count as f64;
    let mut out: Vec<f32> = target
        .iter()
        .zip(sum)
        .map(|(&c, &s)| (momentum * c as f64 + (1.0 - momentum) * s * inv) as f32)
        .collect();
    normalize(&mut out);
    if out.iter().any(|&v| v != 0.0) {
        target.copy_from_slice(&out);
    }
}

/// One contrastive update from one image. Returns the loss before the update.
///
/// Each matched vertex feature moves to `normalize(m C + (1 - m) mean)` where
/// `mean` is the average feature of its matched pixels; the background moves
/// the same way toward the mean of mask-background pixels.
pub fn contrastive_step(
    nm: &mut NeuralMesh,
    image: &FeatureMap,
    corr: &CorrespondenceSet,
    mask: &ForegroundMask,
) -> Result<f64> {
    check_step_inputs(nm, image, corr, mask)?;
    let loss = contrastive_loss(nm, image, corr)?;
    let mu = nm.momentum();
    if mu == 1.0 {
        return Ok(loss);
    }
    let c = nm.channels();
    let mut sums = vec![0.0f64; nm.num_vertices() * c];
    let mut counts = vec![0usize; nm.num_vertices()];
    for m in &corr.matches {
        counts[m.vertex] += 1;
        for (s, &f) in sums[m.vertex * c..(m.vertex + 1) * c]
            .iter_mut()
            .zip(image.cell(m.row, m.col))
        {
            *s += f as f64;
        }
    }
    let mut bg_sum = vec![0.0f64; c];
    let mut bg_count = 0;
    let (h, w) = image.shape();
    for row in 0..h {
        for col in 0..w {
            if !mask.get(row, col) {
                bg_count += 1;
                for (s, &f) in bg_sum.iter_mut().zip(image.cell(row, col)) {
                    *s += f as f64;
                }
            }
        }
    }
    let (features, background) = nm.features_mut();
    for (v, &count) in counts.iter().enumerate() {
        if count > 0 {
            blend_toward(&mut features[v * c..(v + 1) * c], &sums[v * c..(v + 1) * c], count, mu);
        }
    }
    if bg_count > 0 {
        blend_toward(background, &bg_sum, bg_count, mu);
    }
    nm.check_unit()?;
    Ok(loss)
}

/// One training image with its pseudo-correspondences.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub id: String,
    pub image: FeatureMap,
    pub mask: ForegroundMask,
    pub correspondences: CorrespondenceSet,
}

/// Corpus loaded once and paired with pseudo-correspondences from the bank.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub items: Vec<TrainingItem>,
    /// Entries that could not be read or matched.
    pub skipped: usize,
}

impl TrainingSet {
    /// Loads every entry (in parallel) and generates its refined
    /// correspondences. Entries without a mask, unreadable entries and
    /// entries that fail matching are skipped and counted.
    pub fn prepare(manifest: &CorpusManifest, bank: &ViewBank, lambda: f64, rule: VoteRule) -> Result<Self> {
        let loaded: Vec<Option<TrainingItem>> = manifest
            .entries
            .par_iter()
            .map(|e| {
                let item = (|| -> std::result::Result<TrainingItem, String> {
                    let mask_path = e.mask_path.as_ref().ok_or("no mask")?;
                    let image = FeatureMap::read(&e.feature_path).map_err(|x| x.to_string())?;
                    let mask =
                        ForegroundMask::read(mask_path, image.height(), image.width()).map_err(|x| x.to_string())?;
                    let corr = generate(&image, &mask, bank, lambda, rule).map_err(|x| x.to_string())?;
                    Ok(TrainingItem {
                        id: e.id.clone(),
                        image,
                        mask,
                        correspondences: corr.without_scores(),
                    })
                })();
                item.map_err(|m| log::warn!("skipping training entry {}: {m}", e.id))
                    .ok()
            })
            .collect();
        let skipped = loaded.iter().filter(|x| x.is_none()).count();
        let items: Vec<TrainingItem> = loaded.into_iter().flatten().collect();
        if items.is_empty() {
            return Err(RenderError::NoTrainingData { skipped });
        }
        if skipped > 0 {
            log::warn!("{skipped} training entries skipped");
        }
        Ok(Self { items, skipped })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean pre-update loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub skipped: usize,
    pub images: usize,
}

/// Sequential epochs over the set in manifest order.
pub fn train_epochs(nm: &mut NeuralMesh, set: &TrainingSet, epochs: usize) -> Result<TrainReport> {
    if set.is_empty() {
        return Err(RenderError::NoTrainingData { skipped: set.skipped });
    }
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut steps = 0;
    for epoch in 0..epochs {
        let mut total = 0.0;
        for item in &set.items {
            total += contrastive_step(nm, &item.image, &item.correspondences, &item.mask)?;
            steps += 1;
        }
        let mean = total / set.len() as f64;
        log::info!("epoch {} loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps,
        skipped: set.skipped,
        images: set.len(),
    })
}

/// [`TrainingSet::prepare`] followed by [`train_epochs`].
pub fn train(
    nm: &mut NeuralMesh,
    manifest: &CorpusManifest,
    bank: &ViewBank,
    epochs: usize,
    lambda: f64,
    rule: VoteRule,
) -> Result<TrainReport> {
    let set = TrainingSet::prepare(manifest, bank, lambda, rule)?;
    train_epochs(nm, &set, epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::Match;
    use crate::geometry::Mesh;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(mu: f64) -> NeuralMesh {
        let mesh = Mesh::cuboid([1.0, 0.5, 0.7], [2, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        NeuralMesh::random(mesh, 8, &mut rng, 0.07, mu).unwrap()
    }

    /// 4x4 image whose first row copies vertex features 0..4, the rest background.
    fn copy_image(nm: &NeuralMesh) -> (FeatureMap, ForegroundMask, CorrespondenceSet) {
        let img = FeatureMap::from_fn(4, 4, 8, |r, c| {
            if r == 0 {
                nm.vertex_feature(c).to_vec()
            } else {
                nm.background().to_vec()
            }
        })
        .unwrap();
        let mut mask = ForegroundMask::filled(4, 4, false);
        let mut matches = Vec::new();
        for c in 0..4 {
            mask.set(0, c, true);
            matches.push(Match {
                row: 0,
                col: c,
                vertex: c,
                score: 1.0,
                view: 0,
            });
        }
        (img, mask, CorrespondenceSet::new(matches, Some(0), true))
    }

    #[test]
    fn fixed_point_keeps_features() {
        let mut nm = model(0.9);
        let before = nm.clone();
        let (img, mask, corr) = copy_image(&nm);
        let expect = contrastive_loss(&nm, &img, &corr).unwrap();
        let loss = contrastive_step(&mut nm, &img, &corr, &mask).unwrap();
        assert_eq!(loss, expect);
        for (a, b) in nm.features().iter().zip(before.features()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in nm.background().iter().zip(before.background()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_matches_direct_softmax() {
        let nm = model(0.9);
        let (img, _, corr) = copy_image(&nm);
        let m = corr.matches[2];
        let f = img.cell(m.row, m.col);
        let mut z = 0.0;
        for k in 0..nm.num_vertices() {
            z += (dot64(f, nm.vertex_feature(k)) / 0.07).exp();
        }
        z += (dot64(f, nm.background()) / 0.07).exp();
        let one = CorrespondenceSet::new(vec![m], Some(0), true);
        let direct = -((dot64(f, nm.vertex_feature(2)) / 0.07).exp() / z).ln();
        assert!((contrastive_loss(&nm, &img, &one).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn unit_momentum_is_frozen() {
        let mut nm = model(1.0);
        let before = nm.clone();
        let img = FeatureMap::from_fn(4, 4, 8, |r, c| {
            (0..8).map(|k| ((r * 7 + c * 3 + k) % 5) as f32 - 2.0).collect()
        })
        .unwrap();
        let mask = ForegroundMask::filled(4, 4, true);
        let corr = CorrespondenceSet::new(
            vec![Match {
                row: 1,
                col: 1,
                vertex: 3,
                score: 0.5,
                view: 0,
            }],
            Some(0),
            true,
        );
        contrastive_step(&mut nm, &img, &corr, &mask).unwrap();
        assert_eq!(nm, before);
    }

    #[test]
    fn step_moves_toward_pixels() {
        let mut nm = model(0.5);
        let target = model(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let other = NeuralMesh::random(nm.mesh().clone(), 8, &mut rng, 0.07, 0.5).unwrap();
        let (img, mask, corr) = copy_image(&other);
        let before = dot64(nm.vertex_feature(1), other.vertex_feature(1));
        contrastive_step(&mut nm, &img, &corr, &mask).unwrap();
        assert!(dot64(nm.vertex_feature(1), other.vertex_feature(1)) > before);
        // unmatched vertices are untouched
        assert_eq!(nm.vertex_feature(7), target.vertex_feature(7));
    }

    #[test]
    fn input_errors() {
        let mut nm = model(0.9);
        let (img, mask, corr) = copy_image(&nm);
        let empty = CorrespondenceSet::new(vec![], Some(0), true);
        assert!(matches!(
            contrastive_step(&mut nm, &img, &empty, &mask),
            Err(RenderError::EmptyCorrespondence)
        ));
        let raw = CorrespondenceSet::new(corr.matches.clone(), None, false);
        assert!(matches!(
            contrastive_step(&mut nm, &img, &raw, &mask),
            Err(RenderError::NotRefined)
        ));
        let mut far = corr.clone();
        far.matches[0].vertex = 99;
        assert!(matches!(
            contrastive_step(&mut nm, &img, &far, &mask),
            Err(RenderError::MatchOutOfRange { .. })
        ));
        let small = ForegroundMask::filled(3, 4, true);
        assert!(matches!(
            contrastive_step(&mut nm, &img, &corr, &small),
            Err(RenderError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn epochs_count_steps_and_resume() {
        let nm0 = model(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let other = NeuralMesh::random(nm0.mesh().clone(), 8, &mut rng, 0.07, 0.9).unwrap();
        let (image, mask, correspondences) = copy_image(&other);
        let set = TrainingSet {
            items: vec![TrainingItem {
                id: "a".into(),
                image,
                mask,
                correspondences,
            }],
            skipped: 0,
        };
        let mut one = nm0.clone();
        let r = train_epochs(&mut one, &set, 1).unwrap();
        assert_eq!(r.steps, 1);

        let mut straight = nm0.clone();
        let full = train_epochs(&mut straight, &set, 6).unwrap();
        let mut resumed = nm0.clone();
        let a = train_epochs(&mut resumed, &set, 2).unwrap();
        let resumed = NeuralMesh::from_bytes(&resumed.to_bytes()).unwrap();
        let mut resumed = resumed;
        let b = train_epochs(&mut resumed, &set, 4).unwrap();
        assert_eq!(resumed, straight);
        assert_eq!([a.epoch_losses, b.epoch_losses].concat(), full.epoch_losses);
        assert!(full.epoch_losses.windows(2).all(|w| w[1] < w[0]));
    }
}
