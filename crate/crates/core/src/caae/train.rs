use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, population_std};
use super::model::build_forward;
use super::{CaaeConfig, CaaeError, ModelState, Result};
use crate::autodiff::{adam_step, AutodiffError, Tape};
use crate::baselines::pca_rows;
use crate::data::PixelMatrix;
use crate::rng::substream;

/// Samples per gradient work unit. Fixed so the reduction order, and hence
/// the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 16;

/// PCA teacher vectors, one row of `latent_dim` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTargets {
    pub latent_dim: usize,
    pub data: Vec<f64>,
    /// Numerical rank of the matrix the targets came from.
    pub rank: usize,
    /// `true` when `rank < latent_dim` and trailing coordinates are zero.
    pub padded: bool,
}

impl PcaTargets {
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.latent_dim..(p + 1) * self.latent_dim]
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.latent_dim
    }
}

/// Projection of every row onto the top-`latent_dim` temporal components.
pub fn pca_targets(pm: &PixelMatrix, latent_dim: usize) -> Result<PcaTargets> {
    if !pm.is_centered() {
        return Err(CaaeError::Data(crate::data::DataError::NotCentered));
    }
    if latent_dim == 0 {
        return Err(CaaeError::Config("latent_dim must be positive".into()));
    }
    let rows = pm.n_rows();
    let k = latent_dim.min(rows).min(pm.n_t());
    let res = pca_rows(pm.as_slice(), rows, pm.n_t(), k)?;
    let kept = res.rank.min(k);
    let mut data = vec![0.0; rows * latent_dim];
    for p in 0..rows {
        data[p * latent_dim..p * latent_dim + kept].copy_from_slice(&res.score_row(p)[..kept]);
    }
    let padded = kept < latent_dim;
    if padded {
        log::warn!("PCA teacher has rank {kept} < latent_dim {latent_dim}; padding with zeros");
    }
    Ok(PcaTargets {
        latent_dim,
        data,
        rank: res.rank,
        padded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub rec: f64,
    pub kd: f64,
    /// Set when a zero-norm latent made the distillation term undefined.
    pub kd_skipped: bool,
}

/// Loss of one sample: `‖S̃ − S‖² + α (1 − cos(z, z′))`.
pub fn loss(z: &[f64], reconstruction: &[f64], clean: &[f64], teacher: &[f64], alpha: f64) -> Result<LossTerms> {
    if z.len() != teacher.len() || reconstruction.len() != clean.len() {
        return Err(CaaeError::Shape(format!(
            "latent {} vs teacher {}, reconstruction {} vs target {}",
            z.len(),
            teacher.len(),
            reconstruction.len(),
            clean.len()
        )));
    }
    let rec: f64 = reconstruction.iter().zip(clean).map(|(a, b)| (a - b).powi(2)).sum();
    let (nz, nt) = (norm(z), norm(teacher));
    let (kd, kd_skipped) = if nz > 0.0 && nt > 0.0 {
        let cos = z.iter().zip(teacher).map(|(a, b)| a * b).sum::<f64>() / (nz * nt);
        ((1.0 - cos).clamp(0.0, 2.0), false)
    } else {
        (0.0, true)
    };
    let total = rec + alpha * kd;
    if !total.is_finite() {
        return Err(CaaeError::NonFiniteLoss { rec, kd });
    }
    Ok(LossTerms {
        total,
        rec,
        kd,
        kd_skipped,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub rec: f64,
    pub kd: f64,
    pub wall_seconds: f64,
    pub kd_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    pub steps: Vec<StepLoss>,
}

impl TrainHistory {
    /// `epoch,total,rec,kd,wall_seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,rec,kd,wall_seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:?},{:?},{:?},{:?}", e.epoch, e.total, e.rec, e.kd, e.wall_seconds);
        }
        out
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_seconds).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelState,
    pub history: TrainHistory,
    /// Training pixel indices, ascending.
    pub subset: Vec<usize>,
    pub teacher_rank: usize,
}

/// Trains on a seeded pixel subset of a centered matrix.
pub fn train(pm: &PixelMatrix, cfg: &CaaeConfig) -> Result<TrainOutput> {
    train_with_progress(pm, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    pm: &PixelMatrix,
    cfg: &CaaeConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if !pm.is_centered() {
        return Err(CaaeError::Data(crate::data::DataError::NotCentered));
    }
    if pm.n_t() != cfg.n_t {
        return Err(CaaeError::Shape(format!("sequence has n_t = {}, config {}", pm.n_t(), cfg.n_t)));
    }
    let n_pix = pm.n_rows();
    let subset = select_subset(n_pix, cfg.subset_size, cfg.seed)?;
    let train_pm = pm.select_rows(&subset);
    let teacher = pca_targets(&train_pm, cfg.latent_dim)?;

    let scale = match population_std(train_pm.as_slice()) {
        s if s > 0.0 && s.is_finite() => s,
        _ => 1.0,
    };
    let clean: Vec<f64> = train_pm.as_slice().iter().map(|v| v / scale).collect();

    let mut model = ModelState::init(cfg.clone(), scale, &mut substream(cfg.seed, "caae/init"))?;
    let mut shuffle_rng = substream(cfg.seed, "caae/shuffle");
    let mut corrupt_rng = substream(cfg.seed, "caae/corrupt");
    let corruption = cfg.corruption();
    let t = cfg.n_t;
    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut sum_total, mut sum_rec, mut sum_kd, mut skipped) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut clean_b = Vec::with_capacity(batch.len() * t);
            let mut teacher_b = Vec::with_capacity(batch.len() * cfg.latent_dim);
            for &i in batch {
                clean_b.extend_from_slice(&clean[i * t..(i + 1) * t]);
                teacher_b.extend_from_slice(teacher.row(i));
            }
            let corrupted = corrupt(&clean_b, t, &corruption, &mut corrupt_rng)?;
            let (grads, stats) = batch_gradients(&model, &corrupted.data, &clean_b, &teacher_b)?;
            let diverged = |reason: String, model: &ModelState, history: &TrainHistory| CaaeError::Diverged {
                epoch,
                step,
                reason,
                last_good: Box::new(model.clone()),
                history: Box::new(history.clone()),
            };
            if !(stats.total.is_finite() && stats.rec.is_finite() && stats.kd.is_finite()) {
                return Err(diverged(format!("loss became {} (rec {}, kd {})", stats.total, stats.rec, stats.kd), &model, &history));
            }
            match adam_step(&mut model.params, &grads, &mut model.adam) {
                Ok(()) => {}
                Err(e @ AutodiffError::NonFiniteGradient { .. }) => {
                    return Err(diverged(e.to_string(), &model, &history));
                }
                Err(e) => return Err(e.into()),
            }
            history.steps.push(StepLoss {
                epoch,
                step,
                total: stats.total,
                rec: stats.rec,
                kd: stats.kd,
            });
            let n = batch.len() as f64;
            sum_total += stats.total * n;
            sum_rec += stats.rec * n;
            sum_kd += stats.kd * n;
            skipped += stats.kd_skipped;
        }
        let n = order.len() as f64;
        let record = EpochLoss {
            epoch,
            total: sum_total / n,
            rec: sum_rec / n,
            kd: sum_kd / n,
            wall_seconds: start.elapsed().as_secs_f64(),
            kd_skipped: skipped,
        };
        if skipped > 0 {
            log::warn!("epoch {epoch}: distillation term skipped for {skipped} samples with a zero-norm latent");
        }
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(TrainOutput {
        model,
        history,
        subset,
        teacher_rank: teacher.rank,
    })
}

fn select_subset(n_pix: usize, subset_size: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    match subset_size {
        Some(n) if n > n_pix => Err(CaaeError::Config(format!("subset of {n} from {n_pix} pixels"))),
        Some(n) if n < n_pix => {
            let mut idx = rand::seq::index::sample(&mut substream(seed, "caae/subset"), n_pix, n).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
        _ => Ok((0..n_pix).collect()),
    }
}

/// Batch means of the loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub total: f64,
    pub rec: f64,
    pub kd: f64,
    pub kd_skipped: usize,
}

#[derive(Default)]
struct ChunkSums {
    rec: f64,
    kd: f64,
    kd_count: usize,
    skipped: usize,
}

/// Gradient of the batch loss
/// `(1/N) Σ ‖S̃_i − S_i‖² + α · mean_i (1 − cos(z_i, z′_i))`
/// with respect to every parameter, plus the loss terms.
///
/// The distillation mean runs over samples whose teacher vector is nonzero;
/// a sample whose latent is exactly zero contributes nothing and is counted
/// as skipped.
pub fn batch_gradients(
    model: &ModelState,
    corrupted: &[f64],
    clean: &[f64],
    teacher: &[f64],
) -> Result<(Vec<Vec<f64>>, BatchStats)> {
    let cfg = &model.config;
    let (t, latent) = (cfg.n_t, cfg.latent_dim);
    let n = clean.len() / t;
    if n == 0 || corrupted.len() != clean.len() || clean.len() != n * t || teacher.len() != n * latent {
        return Err(CaaeError::Shape("inconsistent batch buffers".into()));
    }
    let kd_count = teacher.chunks_exact(latent).filter(|z| norm(z) > 0.0).count();
    let rec_coef = t as f64 / n as f64;
    let kd_coef = if kd_count > 0 { cfg.kd_weight / kd_count as f64 } else { 0.0 };

    let indices: Vec<usize> = (0..n).collect();
    let partials: Vec<Result<(Vec<Vec<f64>>, ChunkSums)>> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut sinks: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
            let mut sums = ChunkSums::default();
            for &i in chunk {
                let clean_i = &clean[i * t..(i + 1) * t];
                let teacher_i = &teacher[i * latent..(i + 1) * latent];
                let mut tape = Tape::new();
                let fv = build_forward(&mut tape, cfg, &model.params, &corrupted[i * t..(i + 1) * t])?;
                let target = tape.constant_slice(vec![t], clean_i)?;
                let r = tape.mse(fv.reconstruction, target)?;
                sums.rec += tape.scalar(r) * t as f64;
                let mut l = tape.scale(r, rec_coef);
                if norm(teacher_i) > 0.0 {
                    if norm(tape.value(fv.z)) > 0.0 {
                        let zt = tape.constant_slice(vec![latent], teacher_i)?;
                        let kd = tape.cosine_distance(fv.z, zt)?;
                        sums.kd += tape.scalar(kd);
                        sums.kd_count += 1;
                        let kd_term = tape.scale(kd, kd_coef);
                        l = tape.add(l, kd_term)?;
                    } else {
                        sums.skipped += 1;
                    }
                }
                tape.backward_into(l, 1.0, &mut sinks)?;
            }
            Ok((sinks, sums))
        })
        .collect();

    let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut sums = ChunkSums::default();
    for part in partials {
        let (g, s) = part?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
        sums.rec += s.rec;
        sums.kd += s.kd;
        sums.kd_count += s.kd_count;
        sums.skipped += s.skipped;
    }
    let rec = sums.rec / n as f64;
    let kd = if sums.kd_count > 0 { sums.kd / sums.kd_count as f64 } else { 0.0 };
    Ok((
        grads,
        BatchStats {
            total: rec + cfg.kd_weight * kd,
            rec,
            kd,
            kd_skipped: sums.skipped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let s = [1.0, -2.0, 0.5];
        let z = [0.3, 0.4];
        assert_eq!(loss(&z, &s, &s, &[0.6, 0.8], 0.1).unwrap().total, 0.0);
        let ortho = loss(&[1.0, 0.0], &s, &s, &[0.0, 2.0], 0.1).unwrap();
        assert!((ortho.total - 0.1).abs() < 1e-15);
        let rec_only = loss(&z, &[0.0, 0.0, 0.0], &s, &[-1.0, 5.0], 0.0).unwrap();
        assert_eq!(rec_only.total, rec_only.rec);
        assert_eq!(rec_only.rec, 5.25);
        let skipped = loss(&[0.0, 0.0], &s, &s, &[1.0, 0.0], 0.1).unwrap();
        assert!(skipped.kd_skipped);
        assert_eq!(skipped.total, 0.0);
        assert!(matches!(
            loss(&z, &[f64::NAN, 0.0, 0.0], &s, &z, 0.1),
            Err(CaaeError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn teacher_of_rank_one_data() {
        let pattern = [1.0, -2.0, 0.5, 0.5];
        let amps = [1.0, -3.0, 2.0, 0.5, 0.0];
        let data: Vec<f64> = amps.iter().flat_map(|a| pattern.iter().map(move |p| a * p)).collect();
        let pm = PixelMatrix::from_rows(1, 5, 4, 0.1, data).unwrap();
        // the rows already have zero mean, so centering leaves them unchanged
        let pm = pm.center().unwrap();
        let tg = pca_targets(&pm, 3).unwrap();
        assert!(tg.padded);
        assert_eq!(tg.rank, 1);
        for p in 0..5 {
            let row = tg.row(p);
            assert_eq!(&row[1..], &[0.0, 0.0]);
            let expected = amps[p] * pattern.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((row[0].abs() - expected.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn subset_selection() {
        let s = select_subset(100, Some(10), 3).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, select_subset(100, Some(10), 3).unwrap());
        assert_ne!(s, select_subset(100, Some(10), 4).unwrap());
        assert_eq!(select_subset(5, None, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_subset(5, Some(5), 0).unwrap().len(), 5);
        assert!(select_subset(5, Some(6), 0).is_err());
    }
}
