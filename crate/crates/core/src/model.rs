//! Dual-path model assembly and the sub-cluster AdaCos head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{ClipMeta, FeatureExtractor, FeaturePair};
use crate::autograd::{Mode, Var};
use crate::config::ExperimentConfig;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::excitation::{ExcitationNetwork, SeTap};
use crate::ftc::FtcEncoder;
use crate::nn::{Linear, Session};
use crate::spectrum::SpectrumNet;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Sorted `(machine_type, attribute)` classes; the index is the class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    classes: Vec<(String, String)>,
}

impl LabelMap {
    pub fn new(mut classes: Vec<(String, String)>) -> Result<Self> {
        classes.sort();
        classes.dedup();
        if classes.is_empty() {
            return Err(arg_err!("no classes"));
        }
        Ok(Self { classes })
    }

    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a ClipMeta>) -> Result<Self> {
        Self::new(
            rows.into_iter()
                .map(|r| (r.machine_type.clone(), r.attribute.clone()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[(String, String)] {
        &self.classes
    }

    pub fn id(&self, machine_type: &str, attribute: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|(m, a)| (m.as_str(), a.as_str()).cmp(&(machine_type, attribute)))
            .ok()
    }

    pub fn id_of(&self, meta: &ClipMeta) -> Result<usize> {
        self.id(&meta.machine_type, &meta.attribute).ok_or_else(|| {
            arg_err!(
                "class ({}, {}) of {} is not in the label map",
                meta.machine_type,
                meta.attribute,
                meta.path
            )
        })
    }
}

/// Initial AdaCos scale for `k` sub-cluster centres in total.
pub fn initial_scale(k: usize) -> f64 {
    std::f64::consts::SQRT_2 * ((k.max(3) - 1) as f64).ln()
}

/// Sub-cluster centres `[n_classes·n_sub, D]` and the adaptive scale.
#[derive(Debug, Clone)]
pub struct ClassHead {
    pub centers: ParamId,
    pub scale: ParamId,
    pub n_classes: usize,
    pub n_sub: usize,
}

impl ClassHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        n_classes: usize,
        n_sub: usize,
        dim: usize,
    ) -> Result<Self> {
        if n_classes == 0 || n_sub == 0 || dim == 0 {
            return Err(arg_err!("class head needs positive sizes"));
        }
        let k = n_classes * n_sub;
        let mut data: Vec<f64> = (0..k * dim).map(|_| StandardNormal.sample(rng)).collect();
        normalize_rows(&mut data, dim);
        let centers = store.add(&format!("{name}.centers"), Tensor::new(&[k, dim], data)?)?;
        let scale = store.add_buffer(&format!("{name}.scale"), Tensor::vector(vec![initial_scale(k)]))?;
        Ok(Self {
            centers,
            scale,
            n_classes,
            n_sub,
        })
    }

    pub fn scale_value(&self, store: &ParamStore) -> f64 {
        store.tensor(self.scale).data()[0]
    }

    /// Cosine similarity of every embedding to every centre, `[B, K]`.
    pub fn cosines(&self, s: &mut Session, embedding: Var) -> Result<Var> {
        let e = s.graph.l2_normalize_rows(embedding)?;
        let c = s.param(self.centers);
        let c = s.graph.l2_normalize_rows(c)?;
        s.graph.matmul_nt(e, c)
    }

    /// Returns `(loss, cosines)`; `targets` is `[B, n_classes]`.
    pub fn loss(&self, s: &mut Session, embedding: Var, targets: &Tensor) -> Result<(Var, Var)> {
        let cos = self.cosines(s, embedding)?;
        let scale = self.scale_value(s.store);
        let logits = s.graph.scale(cos, scale);
        let loss = s.graph.subcluster_xent(logits, targets, self.n_sub)?;
        Ok((loss, cos))
    }

    /// Rescales every centre to unit norm.
    pub fn renormalize(&self, store: &mut ParamStore) {
        let t = store.tensor_mut(self.centers);
        let d = t.shape()[1];
        normalize_rows(t.data_mut(), d);
    }
}

fn normalize_rows(data: &mut [f64], dim: usize) {
    for row in data.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// AdaCos scale update from one batch.
///
/// `cos: [B, K]` class-major, `targets: [B, n_classes]`. Non-target mass sums
/// `exp(s·cos)` over sub-clusters of classes with target weight below 1; the
/// angle is taken to the nearest sub-cluster of each row's dominant class.
/// Returns `current` when the update is not a finite positive number.
pub fn adacos_scale(cos: &Tensor, targets: &Tensor, n_sub: usize, current: f64) -> Result<f64> {
    let (b, k) = match cos.shape() {
        [b, k] => (*b, *k),
        s => return Err(dim_err!("cosines must be [B, K], got {s:?}")),
    };
    let n_cls = targets.shape().get(1).copied().unwrap_or(0);
    if targets.shape() != [b, n_cls] || n_sub == 0 || n_cls * n_sub != k {
        return Err(dim_err!(
            "targets {:?} do not match cosines {:?}",
            targets.shape(),
            cos.shape()
        ));
    }
    let (c, t) = (cos.data(), targets.data());
    let mut b_sum = 0.0;
    let mut thetas = Vec::with_capacity(b);
    for r in 0..b {
        let row = &c[r * k..][..k];
        let y = &t[r * n_cls..][..n_cls];
        for (j, &v) in row.iter().enumerate() {
            if y[j / n_sub] < 1.0 {
                b_sum += (current * v).exp();
            }
        }
        let top = (0..n_cls).fold(0, |best, i| if y[i] > y[best] { i } else { best });
        let near = row[top * n_sub..][..n_sub]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        thetas.push(near.clamp(-1.0, 1.0).acos());
    }
    let b_avg = b_sum / b as f64;
    let theta = median(&mut thetas).min(std::f64::consts::FRAC_PI_4);
    let s = b_avg.ln() / theta.cos();
    Ok(if s.is_finite() && s > 0.0 { s } else { current })
}

/// Outputs of one forward pass through the embedding paths.
#[derive(Debug, Clone)]
pub struct EmbeddingVars {
    /// `[B, embedding_dim + spectrum_dim]`.
    pub combined: Var,
    pub z_gram: Var,
    pub z_trum: Var,
    pub taps: Vec<SeTap>,
}

/// FTC encoder + excitation network → assembly layer, alongside the spectrum network.
#[derive(Debug, Clone)]
pub struct DualPathModel {
    pub ftc: Option<FtcEncoder>,
    pub excitation: Option<ExcitationNetwork>,
    pub assemble: Linear,
    pub spectrum: SpectrumNet,
    pub head: ClassHead,
    freq_bins: usize,
    frames: usize,
}

impl DualPathModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ExperimentConfig,
        freq_bins: usize,
        frames: usize,
        n_classes: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let ftc = if m.use_ftc_encoder {
            let (fs, ts) = cfg.chunking.specs()?;
            Some(FtcEncoder::new(store, rng, "ftc", fs, ts, &m.ftc)?)
        } else {
            None
        };
        let excitation = if m.use_excitation_network {
            Some(ExcitationNetwork::new(
                store,
                rng,
                "excitation",
                [1, freq_bins, frames],
                &m.excitation,
                m.masks,
            )?)
        } else {
            None
        };
        let gram_in =
            ftc.as_ref().map_or(0, FtcEncoder::out_dim) + excitation.as_ref().map_or(0, ExcitationNetwork::out_dim);
        let assemble = Linear::new(store, rng, "assemble", gram_in, m.embedding_dim)?;
        let spectrum = SpectrumNet::new(store, rng, "spectrum", cfg.audio.spectrum_bins, &cfg.spectrum_net)?;
        let dim = m.embedding_dim + spectrum.out_dim();
        let head = ClassHead::new(store, rng, "head", n_classes, cfg.training.n_subclusters, dim)?;
        Ok(Self {
            ftc,
            excitation,
            assemble,
            spectrum,
            head,
            freq_bins,
            frames,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.assemble.out_dim + self.spectrum.out_dim()
    }

    /// `z_gram = W · [z_f; z_t; z_s] + b` over the branches that exist.
    pub fn assemble(&self, s: &mut Session, parts: &[Var]) -> Result<Var> {
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            s.graph.concat_cols(parts)?
        };
        self.assemble.forward(s, x)
    }

    pub fn embed(&self, s: &mut Session, batch: &[&FeaturePair]) -> Result<EmbeddingVars> {
        if batch.is_empty() {
            return Err(arg_err!("empty batch"));
        }
        let grams: Vec<&Tensor> = batch.iter().map(|p| &p.spectrogram).collect();
        for g in &grams {
            if g.shape() != [self.freq_bins, self.frames] {
                return Err(dim_err!(
                    "model expects [{}, {}] spectrograms, got {:?}",
                    self.freq_bins,
                    self.frames,
                    g.shape()
                ));
            }
        }
        let mut parts = Vec::with_capacity(3);
        if let Some(ftc) = &self.ftc {
            let (zf, zt) = ftc.forward(s, &grams)?;
            parts.extend([zf, zt]);
        }
        let mut taps = Vec::new();
        if let Some(exc) = &self.excitation {
            let mut data = Vec::with_capacity(grams.len() * self.freq_bins * self.frames);
            grams.iter().for_each(|g| data.extend_from_slice(g.data()));
            let x = s
                .graph
                .input(Tensor::new(&[grams.len(), 1, self.freq_bins, self.frames], data)?);
            let (zs, t) = exc.forward(s, x)?;
            parts.push(zs);
            taps = t;
        }
        let z_gram = self.assemble(s, &parts)?;
        let spectra: Vec<&Tensor> = batch.iter().map(|p| &p.spectrum).collect();
        let x = s.graph.input(self.spectrum.batch_input(&spectra)?);
        let z_trum = self.spectrum.forward(s, x)?;
        let combined = s.graph.concat_cols(&[z_gram, z_trum])?;
        Ok(EmbeddingVars {
            combined,
            z_gram,
            z_trum,
            taps,
        })
    }
}

/// A configured model with its parameters, label map and feature front end.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ExperimentConfig,
    pub labels: LabelMap,
    pub store: ParamStore,
    pub model: DualPathModel,
    pub features: FeatureExtractor,
}

impl Detector {
    /// Fresh parameters drawn from `config.training.seed`.
    pub fn new(config: ExperimentConfig, labels: LabelMap) -> Result<Self> {
        let features = FeatureExtractor::new(
            config.audio.window,
            config.audio.hop,
            config.signal_len(),
            config.audio.spectrum_bins,
        )?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
        let model = DualPathModel::new(
            &mut store,
            &mut rng,
            &config,
            features.freq_bins(),
            features.frames(),
            labels.len(),
        )?;
        Ok(Self {
            config,
            labels,
            store,
            model,
            features,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.model.embedding_dim()
    }

    /// Conditions a raw waveform to the configured length and extracts features.
    pub fn features_of(&self, samples: &[f64]) -> Result<FeaturePair> {
        let x = crate::audio::repeat_to_length(samples, self.features.signal_len())?;
        self.features.extract(&x)
    }

    /// Eval-mode embeddings, one row per input.
    pub fn embed(&mut self, batch: &[&FeaturePair]) -> Result<Vec<Vec<f64>>> {
        let mut s = Session::new(&mut self.store, Mode::Eval);
        let out = self.model.embed(&mut s, batch)?;
        let v = s.graph.value(out.combined);
        let d = v.shape()[1];
        let rows: Vec<Vec<f64>> = v.data().chunks(d).map(<[f64]>::to_vec).collect();
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        Ok(rows)
    }

    /// Embeds many feature pairs in batches of `batch_size`.
    pub fn embed_all(&mut self, feats: &[FeaturePair], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(feats.len());
        for chunk in feats.chunks(batch_size.max(1)) {
            let refs: Vec<&FeaturePair> = chunk.iter().collect();
            out.extend(self.embed(&refs)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_sorts_and_dedups() {
        let m = LabelMap::new(vec![
            ("valve".into(), "b".into()),
            ("fan".into(), "a".into()),
            ("valve".into(), "b".into()),
        ])
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.id("fan", "a"), Some(0));
        assert_eq!(m.id("valve", "b"), Some(1));
        assert_eq!(m.id("valve", "c"), None);
    }

    #[test]
    fn initial_scale_is_positive() {
        assert!(initial_scale(1) > 0.0);
        assert!(initial_scale(2) > 0.0);
        assert!((initial_scale(17) - std::f64::consts::SQRT_2 * 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adacos_update_matches_hand_computation() {
        // two classes, one sub-cluster each
        let cos = Tensor::new(&[2, 2], vec![0.9, 0.1, 0.2, 0.6]).unwrap();
        let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s0 = 2.0;
        let b_avg = ((s0 * 0.1f64).exp() + (s0 * 0.2f64).exp()) / 2.0;
        let theta = 0.5 * (0.9f64.acos() + 0.6f64.acos());
        let want = b_avg.ln() / theta.min(std::f64::consts::FRAC_PI_4).cos();
        let got = adacos_scale(&cos, &y, 1, s0).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn adacos_keeps_scale_when_update_is_degenerate() {
        // non-target mass below 1 gives a negative log
        let cos = Tensor::new(&[1, 2], vec![0.9, -0.9]).unwrap();
        let y = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(adacos_scale(&cos, &y, 1, 3.0).unwrap(), 3.0);
    }
}
