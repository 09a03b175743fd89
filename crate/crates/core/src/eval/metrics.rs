//! Distribution, retrieval and pose-consistency metrics. Inputs are feature
//! matrices with one row per sample, or motion sequences.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::data::MotionSequence;
use crate::error::{Error, Result};

const EIGEN_TOLERANCE: f64 = -1e-8;
const JITTER: f64 = 1e-6;

fn row_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_and_cov(x: &Mat) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Symmetric square root by eigendecomposition; `None` when an eigenvalue
/// is negative beyond tolerance or not finite.
fn sqrt_psd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig
        .eigenvalues
        .iter()
        .any(|&l| !l.is_finite() || l < EIGEN_TOLERANCE * scale)
    {
        return None;
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `Tr((Σa Σb)^{1/2})` as the sum of square roots of the eigenvalues of the
/// symmetric product `S Σb S` with `S = Σa^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let s = sqrt_psd(a)?;
    let p = &s * b * &s;
    let p = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(p);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if eig
        .eigenvalues
        .iter()
        .any(|&l| !l.is_finite() || l < EIGEN_TOLERANCE * scale)
    {
        return None;
    }
    Some(eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidValue {
    pub value: f64,
    /// Diagonal jitter had to be added to the covariances.
    pub jittered: bool,
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(real: &Mat, generated: &Mat) -> Result<f64> {
    fid_detailed(real, generated).map(|f| f.value)
}

pub fn fid_detailed(real: &Mat, generated: &Mat) -> Result<FidValue> {
    if real.nrows() < 2 || generated.nrows() < 2 {
        return Err(Error::domain("FID needs at least two samples on each side"));
    }
    if real.ncols() != generated.ncols() {
        return Err(Error::domain("feature widths differ"));
    }
    let (mu_r, cov_r) = mean_and_cov(real);
    let (mu_g, cov_g) = mean_and_cov(generated);
    let mean_term = (&mu_r - &mu_g).norm_squared();
    let mut jittered = false;
    let tr = match trace_sqrt_product(&cov_r, &cov_g) {
        Some(t) => t,
        None => {
            jittered = true;
            let eye = DMatrix::<f64>::identity(cov_r.nrows(), cov_r.ncols()) * JITTER;
            trace_sqrt_product(&(&cov_r + &eye), &(&cov_g + &eye))
                .ok_or_else(|| Error::domain("covariance square root failed after jitter"))?
        }
    };
    let value = mean_term + cov_r.trace() + cov_g.trace() - 2.0 * tr;
    if !value.is_finite() {
        return Err(Error::domain("FID is not finite"));
    }
    Ok(FidValue {
        value: value.max(0.0),
        jittered,
    })
}

/// Mean distance between paired rows.
pub fn mm_dist(text_feats: &Mat, motion_feats: &Mat) -> Result<f64> {
    if text_feats.dim() != motion_feats.dim() {
        return Err(Error::domain(format!(
            "paired features differ in shape: {:?} vs {:?}",
            text_feats.dim(),
            motion_feats.dim()
        )));
    }
    if text_feats.nrows() == 0 {
        return Err(Error::domain("no pairs"));
    }
    let total: f64 = text_feats
        .outer_iter()
        .zip(motion_feats.outer_iter())
        .map(|(t, m)| row_distance(t, m))
        .sum();
    Ok(total / text_feats.nrows() as f64)
}

/// Top-1..=`k` motion→text retrieval accuracy. Each motion row `i` ranks a
/// pool whose index 0 is its own text row `i`, followed by `pool_size - 1`
/// other rows drawn at random; ties go to the lower pool index.
pub fn r_precision(motion_feats: &Mat, text_feats: &Mat, pool_size: usize, k: usize, seed: u64) -> Result<Vec<f64>> {
    let n = motion_feats.nrows();
    if text_feats.dim() != motion_feats.dim() {
        return Err(Error::domain("motion and text features must be paired"));
    }
    if k == 0 || pool_size < k + 1 {
        return Err(Error::domain(format!("pool of {pool_size} is too small for top-{k}")));
    }
    if pool_size > n {
        return Err(Error::domain(format!(
            "pool of {pool_size} exceeds the {n} available samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; k];
    for i in 0..n {
        let m = motion_feats.row(i);
        let true_d = row_distance(m, text_feats.row(i));
        let others = sample(&mut rng, n - 1, pool_size - 1);
        let rank = others
            .iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .filter(|&j| row_distance(m, text_feats.row(j)) < true_d)
            .count();
        for (slot, h) in hits.iter_mut().enumerate() {
            if rank <= slot {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / n as f64).collect())
}

/// Mean distance between the matched elements of two disjoint random
/// subsets of size `subset_size`.
pub fn diversity(feats: &Mat, subset_size: usize, seed: u64) -> Result<f64> {
    let n = feats.nrows();
    if subset_size == 0 || 2 * subset_size > n {
        return Err(Error::domain(format!(
            "diversity needs two disjoint subsets of {subset_size} from {n} samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, n, 2 * subset_size).into_vec();
    let total: f64 = idx[..subset_size]
        .iter()
        .zip(&idx[subset_size..])
        .map(|(&a, &b)| row_distance(feats.row(a), feats.row(b)))
        .sum();
    Ok(total / subset_size as f64)
}

/// Default diversity subset size: `min(300, n / 2)`.
pub fn default_diversity_subset(n: usize) -> usize {
    (n / 2).min(300)
}

fn check_positions(len: usize, positions: &[usize]) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::domain("no condition positions"));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= len) {
        return Err(Error::domain(format!(
            "position {p} is outside a motion of {len} frames"
        )));
    }
    Ok(())
}

/// Mean over condition frames of the distance between `gen[positions[i]]`
/// and `cond_frames[i]`.
pub fn recon_loss(gen: &MotionSequence, cond_frames: &MotionSequence, positions: &[usize]) -> Result<f64> {
    check_positions(gen.len(), positions)?;
    if cond_frames.len() != positions.len() || cond_frames.dim() != gen.dim() {
        return Err(Error::domain("one condition frame per position, of matching width"));
    }
    let total: f64 = positions
        .iter()
        .enumerate()
        .map(|(i, &p)| row_distance(gen.frames().row(p), cond_frames.frames().row(i)))
        .sum();
    Ok(total / positions.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelMode {
    /// Only the steps entering and leaving the condition window.
    #[default]
    Boundary,
    /// Every step inside the window plus the boundary steps.
    Window,
}

/// Distance between the velocities of `gen` and `gt` at the steps adjoining
/// the condition window, averaged over steps. A step `t` is `frames[t+1] -
/// frames[t]`; both sequences are indexed by the same positions.
pub fn vel_loss(gen: &MotionSequence, gt: &MotionSequence, positions: &[usize]) -> Result<f64> {
    vel_loss_with(gen, gt, positions, VelMode::Boundary)
}

pub fn vel_loss_with(gen: &MotionSequence, gt: &MotionSequence, positions: &[usize], mode: VelMode) -> Result<f64> {
    if gen.len() < 2 || gt.len() < 2 {
        return Err(Error::domain("velocity needs at least two frames"));
    }
    if gen.dim() != gt.dim() {
        return Err(Error::domain("feature widths differ"));
    }
    let len = gen.len().min(gt.len());
    check_positions(len, positions)?;
    let lo = *positions.iter().min().expect("non-empty");
    let hi = *positions.iter().max().expect("non-empty");
    let mut steps = Vec::new();
    if lo >= 1 {
        steps.push(lo - 1);
    }
    if mode == VelMode::Window {
        steps.extend(lo..hi);
    }
    if hi + 1 < len {
        steps.push(hi);
    }
    if steps.is_empty() {
        return Err(Error::domain("condition window has no neighbouring frame"));
    }
    let (g, r) = (gen.frames(), gt.frames());
    let total: f64 = steps
        .iter()
        .map(|&t| {
            let vg = &g.row(t + 1) - &g.row(t);
            let vr = &r.row(t + 1) - &r.row(t);
            row_distance(vg.view(), vr.view())
        })
        .sum();
    Ok(total / steps.len() as f64)
}

/// Mean over key frames of the distance to the nearest generated frame.
pub fn key_dist(gen: &MotionSequence, key_frames: &MotionSequence) -> Result<f64> {
    if gen.is_empty() || key_frames.is_empty() {
        return Err(Error::domain("key distance needs generated frames and key frames"));
    }
    if gen.dim() != key_frames.dim() {
        return Err(Error::domain("feature widths differ"));
    }
    let total: f64 = key_frames
        .frames()
        .outer_iter()
        .map(|k| {
            gen.frames()
                .outer_iter()
                .map(|f| row_distance(k, f))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / key_frames.len() as f64)
}
