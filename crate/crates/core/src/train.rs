//! Mini-batch training with mixup, Adam and the adaptive-scale head.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;

use crate::audio::{condition_clip, AudioClip, ClipMeta, FeaturePair, Manifest, Split};
use crate::autograd::Mode;
use crate::error::{arg_err, Error, Result};
use crate::model::{adacos_scale, Detector, LabelMap};
use crate::nn::Session;
use crate::optim::Adam;
use crate::synth::derive_seed;
use crate::tensor::Tensor;

/// Loads and conditions the given rows in parallel, preserving order.
pub fn load_conditioned(
    manifest: &Manifest,
    rows: &[ClipMeta],
    sample_rate: u32,
    seconds: f64,
) -> Result<Vec<AudioClip>> {
    rows.par_iter()
        .map(|r| {
            let clip = manifest.load(r)?;
            if clip.sample_rate != sample_rate {
                return Err(Error::Format(format!(
                    "{}: sample rate {} differs from configured {sample_rate}",
                    r.path, clip.sample_rate
                )));
            }
            condition_clip(&clip, seconds)
        })
        .collect()
}

/// Training rows of a manifest and their label map.
pub fn training_rows(manifest: &Manifest) -> Result<(Vec<ClipMeta>, LabelMap)> {
    let rows: Vec<ClipMeta> = manifest.split(Split::Train).cloned().collect();
    if rows.is_empty() {
        return Err(arg_err!("manifest has no training clips"));
    }
    let labels = LabelMap::from_rows(&rows)?;
    Ok((rows, labels))
}

/// A random cyclic permutation of `0..n` (no fixed points for `n ≥ 2`).
pub fn derangement<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Mixes each wave and one-hot label with a partner from a derangement of the batch.
pub fn mixup<R: Rng>(
    rng: &mut R,
    waves: &[&[f64]],
    labels: &[usize],
    n_classes: usize,
    alpha: f64,
) -> Result<(Vec<Vec<f64>>, Tensor)> {
    let b = waves.len();
    if b != labels.len() || b == 0 {
        return Err(arg_err!("mixup needs matching non-empty waves and labels"));
    }
    let mut targets = vec![0.0; b * n_classes];
    if alpha <= 0.0 || b < 2 {
        for (i, &c) in labels.iter().enumerate() {
            targets[i * n_classes + c] = 1.0;
        }
        return Ok((
            waves.iter().map(|w| w.to_vec()).collect(),
            Tensor::new(&[b, n_classes], targets)?,
        ));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| arg_err!("mixup alpha {alpha}: {e}"))?;
    let partner = derangement(rng, b);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let lam: f64 = beta.sample(rng);
        let j = partner[i];
        if waves[i].len() != waves[j].len() {
            return Err(arg_err!("mixup waves differ in length"));
        }
        out.push(
            waves[i]
                .iter()
                .zip(waves[j])
                .map(|(x, y)| lam * x + (1.0 - lam) * y)
                .collect(),
        );
        targets[i * n_classes + labels[i]] += lam;
        targets[i * n_classes + labels[j]] += 1.0 - lam;
    }
    Ok((out, Tensor::new(&[b, n_classes], targets)?))
}

/// Shuffled batches of `batch` indices; a trailing singleton joins the previous batch.
pub fn batches<R: Rng>(rng: &mut R, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Trains `det` in place on conditioned normal clips.
///
/// Writes `epoch,loss,seconds` rows to `log` when given. A non-finite loss
/// aborts with the paths of the clips in the offending batch.
pub fn train(det: &mut Detector, clips: &[AudioClip], log: Option<&Path>) -> Result<Vec<EpochRecord>> {
    let tc = det.config.training.clone();
    if clips.len() < 2 {
        return Err(arg_err!("need at least two training clips"));
    }
    let labels = clips
        .iter()
        .map(|c| det.labels.id_of(&c.meta))
        .collect::<Result<Vec<usize>>>()?;
    let mut logw = match log {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "epoch,loss,seconds").map_err(|e| Error::io(p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[tc.seed, 1]));
    let mut adam = Adam::new(tc.lr)?;
    let n_classes = det.labels.len();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(&mut rng, clips.len(), tc.batch_size) {
            let waves: Vec<&[f64]> = batch.iter().map(|&i| clips[i].samples.as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (mixed, targets) = mixup(&mut rng, &waves, &ys, n_classes, tc.mixup_alpha)?;
            let fx = &det.features;
            let feats: Vec<FeaturePair> = mixed.par_iter().map(|w| fx.extract(w)).collect::<Result<_>>()?;
            let refs: Vec<&FeaturePair> = feats.iter().collect();

            let model = &det.model;
            let mut s = Session::new(&mut det.store, Mode::Train);
            let emb = model.embed(&mut s, &refs)?;
            let (loss, cos) = model.head.loss(&mut s, emb.combined, &targets)?;
            let value = s.graph.value(loss).item();
            if !value.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| clips[i].meta.path.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}; batch clips: {}",
                    ids.join(", ")
                )));
            }
            let cos = s.graph.value(cos).clone();
            s.backward(loss)?;
            drop(s);
            adam.step(&mut det.store)?;
            det.model.head.renormalize(&mut det.store);
            let cur = det.model.head.scale_value(&det.store);
            let next = adacos_scale(&cos, &targets, det.model.head.n_sub, cur)?;
            det.store.tensor_mut(det.model.head.scale).data_mut()[0] = next;
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let rec = EpochRecord {
            epoch,
            loss: total / count as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} loss {:.5} ({:.1} s)", rec.epoch, rec.loss, rec.seconds);
        if let Some((p, f)) = logw.as_mut() {
            writeln!(f, "{},{},{:.3}", rec.epoch, rec.loss, rec.seconds).map_err(|e| Error::io(*p, e))?;
        }
        history.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..40 {
            let p = derangement(&mut rng, n);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mixup_targets_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 3]).collect();
        let refs: Vec<&[f64]> = w.iter().map(Vec::as_slice).collect();
        let (mixed, t) = mixup(&mut rng, &refs, &[0, 1, 2, 0, 1], 3, 0.2).unwrap();
        for r in t.data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(mixed.len(), 5);
        let (plain, t) = mixup(&mut rng, &refs, &[0, 1, 2, 0, 1], 3, 0.0).unwrap();
        assert_eq!(plain, w);
        assert_eq!(&t.data()[..3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn batches_cover_everything_without_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = batches(&mut rng, 33, 16);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 17);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
    }
}
