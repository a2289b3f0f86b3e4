//! Deterministic machine-like audio with labelled anomalies.
//!
//! A clip is a harmonic stack with `1/k` rolloff, amplitude-modulated at the
//! profile's rate, plus white noise. Tone phases depend only on
//! `(machine, attribute, domain)`, so normal clips of one class differ only in
//! their noise. An optional per-clip interference tone at a random frequency
//! adds class-irrelevant variation.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::audio::{write_wav_pcm16, AudioClip, ClipMeta, Domain, Label, Manifest, Split};
use crate::error::{arg_err, Error, Result};

/// Output gain keeping the loudest profile inside PCM16 range.
const GAIN: f64 = 0.08;
const AM_DEPTH: f64 = 0.5;
const TARGET_NOISE_FACTOR: f64 = 1.5;
const CLICK_RATE_HZ: f64 = 6.0;
const CLICK_LEN: usize = 1024;
const CLICK_DECAY: f64 = 200.0;
/// Interference frequencies as fractions of the sample rate, above every harmonic stack.
const INTERFERENCE_BAND: (f64, f64) = (0.2, 0.45);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnomalyKind {
    Detune,
    ExtraTone,
    AmRateChange,
    TransientClicks,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::Detune,
        AnomalyKind::ExtraTone,
        AnomalyKind::AmRateChange,
        AnomalyKind::TransientClicks,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Detune => "detune",
            AnomalyKind::ExtraTone => "extra_tone",
            AnomalyKind::AmRateChange => "am_rate_change",
            AnomalyKind::TransientClicks => "transient_clicks",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown anomaly kind `{s}`")))
    }
}

/// One injected fault.
///
/// `magnitude` is a frequency ratio for `Detune`, a rate ratio for
/// `AmRateChange`, and an amplitude relative to the fundamental for
/// `ExtraTone` and `TransientClicks`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub magnitude: f64,
}

impl AnomalySpec {
    pub fn new(kind: AnomalyKind, magnitude: f64) -> Result<Self> {
        if !(magnitude > 0.0) || !magnitude.is_finite() {
            return Err(arg_err!("anomaly magnitude must be positive, got {magnitude}"));
        }
        Ok(Self { kind, magnitude })
    }
}

/// Operating-condition variant of a machine.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub f0_scale: f64,
    pub am_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineProfile {
    pub name: String,
    pub fundamental_hz: f64,
    pub n_harmonics: usize,
    pub am_rate_hz: f64,
    pub noise_level: f64,
    /// Multiplicative detune applied in the target domain.
    pub target_shift: f64,
    pub attributes: Vec<Attribute>,
}

impl MachineProfile {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.attributes.is_empty() || self.n_harmonics == 0 {
            return Err(arg_err!("profile {} needs attributes and harmonics", self.name));
        }
        let nyq = sample_rate as f64 / 2.0;
        for a in &self.attributes {
            let f0 = self.fundamental_hz * a.f0_scale * self.target_shift.max(1.0);
            if !(f0 > 0.0) || f0 * self.n_harmonics as f64 >= nyq {
                return Err(arg_err!(
                    "profile {} attribute {} aliases: {:.1} Hz x {} harmonics >= {nyq} Hz",
                    self.name,
                    a.name,
                    f0,
                    self.n_harmonics
                ));
            }
        }
        Ok(())
    }
}

/// The two shipped machine types, each with two attributes.
pub fn default_profiles() -> Vec<MachineProfile> {
    vec![
        MachineProfile {
            name: "fan".into(),
            fundamental_hz: 120.0,
            n_harmonics: 12,
            am_rate_hz: 6.0,
            noise_level: 0.3,
            target_shift: 1.04,
            attributes: vec![
                Attribute {
                    name: "speed_low".into(),
                    f0_scale: 1.0,
                    am_scale: 1.0,
                },
                Attribute {
                    name: "speed_high".into(),
                    f0_scale: 1.08,
                    am_scale: 1.3,
                },
            ],
        },
        MachineProfile {
            name: "pump".into(),
            fundamental_hz: 310.0,
            n_harmonics: 8,
            am_rate_hz: 2.5,
            noise_level: 0.3,
            target_shift: 0.97,
            attributes: vec![
                Attribute {
                    name: "load_a".into(),
                    f0_scale: 1.0,
                    am_scale: 1.0,
                },
                Attribute {
                    name: "load_b".into(),
                    f0_scale: 0.93,
                    am_scale: 1.4,
                },
            ],
        },
    ]
}

/// Parameters of one clip that are not part of the machine profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipParams {
    pub sample_rate: u32,
    pub seconds: f64,
    /// Amplitude of the per-clip interference tone relative to the fundamental; 0 disables it.
    pub interference: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes values into a seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Synthesizes one clip. `meta` is attached unchanged apart from validation.
pub fn generate_clip(
    profile: &MachineProfile,
    attribute: usize,
    domain: Domain,
    anomaly: Option<AnomalySpec>,
    seed: u64,
    params: ClipParams,
    meta: ClipMeta,
) -> Result<AudioClip> {
    profile.validate(params.sample_rate)?;
    let attr = profile
        .attributes
        .get(attribute)
        .ok_or_else(|| arg_err!("profile {} has no attribute {attribute}", profile.name))?;
    let sr = params.sample_rate as f64;
    let n = crate::audio::target_len(params.sample_rate, params.seconds);
    if n == 0 {
        return Err(arg_err!("clip length {} s is empty", params.seconds));
    }

    let shift = if domain == Domain::Target {
        profile.target_shift
    } else {
        1.0
    };
    let mut f0 = profile.fundamental_hz * attr.f0_scale * shift;
    let mut am = profile.am_rate_hz * attr.am_scale;
    let mut noise = profile.noise_level;
    if domain == Domain::Target {
        noise *= TARGET_NOISE_FACTOR;
    }
    match anomaly {
        Some(AnomalySpec {
            kind: AnomalyKind::Detune,
            magnitude,
        }) => f0 *= magnitude,
        Some(AnomalySpec {
            kind: AnomalyKind::AmRateChange,
            magnitude,
        }) => am *= magnitude,
        _ => {}
    }
    let n_harm = profile.n_harmonics.min(((sr / 2.0 - 1.0) / f0).floor() as usize).max(1);

    // tonal skeleton phases are a function of the class only
    let mut skel = ChaCha8Rng::seed_from_u64(derive_seed(&[
        name_hash(&profile.name),
        attribute as u64,
        domain as u64,
    ]));
    let phases: Vec<f64> = (0..n_harm).map(|_| skel.random::<f64>() * 2.0 * PI).collect();
    let am_phase = skel.random::<f64>() * 2.0 * PI;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; n];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut s = 0.0;
        for (k, ph) in phases.iter().enumerate() {
            let h = (k + 1) as f64;
            s += (2.0 * PI * h * f0 * t + ph).sin() / h;
        }
        *v = s * (1.0 + AM_DEPTH * (2.0 * PI * am * t + am_phase).sin());
    }
    if params.interference > 0.0 {
        let fi = rng.random_range(INTERFERENCE_BAND.0..INTERFERENCE_BAND.1) * sr;
        let amp = params.interference * rng.random_range(0.25..1.0);
        let ph = rng.random::<f64>() * 2.0 * PI;
        for (i, v) in x.iter_mut().enumerate() {
            *v += amp * (2.0 * PI * fi * i as f64 / sr + ph).sin();
        }
    }
    match anomaly {
        Some(AnomalySpec {
            kind: AnomalyKind::ExtraTone,
            magnitude,
        }) => {
            // between two harmonics, well clear of both
            let k = rng.random_range(1..n_harm.max(2)) as f64;
            let fe = (k + rng.random_range(0.3..0.7)) * f0;
            let ph = rng.random::<f64>() * 2.0 * PI;
            for (i, v) in x.iter_mut().enumerate() {
                *v += magnitude * (2.0 * PI * fe * i as f64 / sr + ph).sin();
            }
        }
        Some(AnomalySpec {
            kind: AnomalyKind::TransientClicks,
            magnitude,
        }) => {
            // damped resonant knocks placed between two harmonics
            let count = ((params.seconds * CLICK_RATE_HZ).round() as usize).max(1);
            for _ in 0..count {
                let fr = (rng.random_range(1..n_harm.max(2)) as f64 + rng.random_range(0.3..0.7)) * f0;
                let at = rng.random_range(0..n.saturating_sub(CLICK_LEN).max(1));
                let ph = rng.random::<f64>() * 2.0 * PI;
                for j in 0..CLICK_LEN.min(n - at) {
                    let env = (-(j as f64) / CLICK_DECAY).exp();
                    x[at + j] += magnitude * env * (2.0 * PI * fr * j as f64 / sr + ph).sin();
                }
            }
        }
        _ => {}
    }
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = GAIN * (*v + noise * z);
    }
    AudioClip::new(x, params.sample_rate, meta)
}

/// Clip counts per machine type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train_source: usize,
    pub train_target: usize,
    /// Split evenly over domain × label.
    pub test: usize,
}

/// One planned clip, before synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPlan {
    pub machine: usize,
    pub attribute: usize,
    pub anomaly: Option<AnomalySpec>,
    pub seed: u64,
    pub meta: ClipMeta,
}

/// Deterministic list of clips for a dataset.
pub fn plan_dataset(
    profiles: &[MachineProfile],
    counts: DatasetCounts,
    anomalies: &[AnomalySpec],
    seed: u64,
) -> Result<Vec<ClipPlan>> {
    if profiles.is_empty() {
        return Err(arg_err!("no machine profiles"));
    }
    if anomalies.is_empty() && counts.test > 0 {
        return Err(arg_err!("test clips need at least one anomaly kind"));
    }
    if !counts.test.is_multiple_of(4) {
        return Err(arg_err!(
            "test count {} must split evenly over domain x label",
            counts.test
        ));
    }
    let mut plans = Vec::new();
    for (mi, p) in profiles.iter().enumerate() {
        let na = p.attributes.len();
        let mut push =
            |split: Split, domain: Domain, label: Label, idx: usize, anomaly: Option<AnomalySpec>, attribute: usize| {
                let path = format!(
                    "{}/{}/{}_{}_{}_{:04}.wav",
                    p.name, split, domain, label, p.attributes[attribute].name, idx
                );
                plans.push(ClipPlan {
                    machine: mi,
                    attribute,
                    anomaly,
                    seed: derive_seed(&[seed, mi as u64, split as u64, domain as u64, label as u64, idx as u64]),
                    meta: ClipMeta {
                        path,
                        machine_type: p.name.clone(),
                        attribute: p.attributes[attribute].name.clone(),
                        domain,
                        split,
                        label,
                    },
                });
            };
        for i in 0..counts.train_source {
            push(Split::Train, Domain::Source, Label::Normal, i, None, i % na);
        }
        for i in 0..counts.train_target {
            push(Split::Train, Domain::Target, Label::Normal, i, None, i % na);
        }
        let q = counts.test / 4;
        for domain in [Domain::Source, Domain::Target] {
            for i in 0..q {
                push(Split::Test, domain, Label::Normal, i, None, i % na);
            }
            for i in 0..q {
                // kind advances once per attribute cycle so kinds and attributes cross
                let kind = anomalies[(i / na) % anomalies.len()];
                push(Split::Test, domain, Label::Anomalous, i, Some(kind), i % na);
            }
        }
    }
    Ok(plans)
}

/// Writes every planned clip as PCM16 WAV under `out_dir` plus `manifest.csv`.
pub fn generate_dataset(
    profiles: &[MachineProfile],
    counts: DatasetCounts,
    anomalies: &[AnomalySpec],
    params: ClipParams,
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest> {
    let plans = plan_dataset(profiles, counts, anomalies, seed)?;
    for p in profiles {
        p.validate(params.sample_rate)?;
        for split in [Split::Train, Split::Test] {
            let d = out_dir.join(&p.name).join(split.as_str());
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    plans.par_iter().try_for_each(|plan| -> Result<()> {
        let clip = generate_clip(
            &profiles[plan.machine],
            plan.attribute,
            plan.meta.domain,
            plan.anomaly,
            plan.seed,
            params,
            plan.meta.clone(),
        )?;
        write_wav_pcm16(&out_dir.join(&plan.meta.path), &clip.samples, params.sample_rate)
    })?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        rows: plans.into_iter().map(|p| p.meta).collect(),
    };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
