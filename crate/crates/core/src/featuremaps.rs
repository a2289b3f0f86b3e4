//! Excitation feature-map archives.
//!
//! An archive is a directory holding, per array, `<name>.bin` (raw f64
//! little-endian, row-major) and `<name>.hdr` with three lines:
//! `name=<name>`, `dtype=f64`, `shape=<d0>,<d1>,..`.

use std::path::Path;

use crate::audio::FeaturePair;
use crate::autograd::Mode;
use crate::error::{arg_err, Error, Result};
use crate::model::Detector;
use crate::nn::Session;
use crate::tensor::Tensor;

pub const MAP_NAMES: [&str; 5] = ["x", "y", "w_c", "w_f", "w_t"];

/// Writes one array as a `.bin`/`.hdr` pair.
pub fn write_array(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    let bin = dir.join(format!("{name}.bin"));
    let hdr = dir.join(format!("{name}.hdr"));
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let text = format!("name={name}\ndtype=f64\nshape={}\n", shape.join(","));
    std::fs::write(&hdr, text).map_err(|e| Error::io(&hdr, e))
}

pub fn read_array(dir: &Path, name: &str) -> Result<Tensor> {
    let hdr = dir.join(format!("{name}.hdr"));
    let text = std::fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let mut shape = None;
    for line in text.lines() {
        match line.split_once('=') {
            Some(("dtype", d)) if d != "f64" => return Err(Error::Format(format!("{}: dtype {d}", hdr.display()))),
            Some(("shape", s)) => {
                shape = Some(
                    s.split(',')
                        .map(|p| p.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Format(format!("{}: bad shape", hdr.display())))?,
                )
            }
            _ => {}
        }
    }
    let shape = shape.ok_or_else(|| Error::Format(format!("{}: no shape", hdr.display())))?;
    let bin = dir.join(format!("{name}.bin"));
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{}: length not a multiple of 8", bin.display())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

/// Input, output and masks of excitation block `stage` for one clip.
///
/// `x` and `y` are `[C, H, W]`; `w_c`, `w_f`, `w_t` are `[C]`, `[H]`, `[W]`.
/// Disabled mask families are absent.
pub fn capture(det: &mut Detector, features: &FeaturePair, stage: usize) -> Result<Vec<(&'static str, Tensor)>> {
    let exc = det
        .model
        .excitation
        .as_ref()
        .ok_or_else(|| arg_err!("model has no excitation network"))?;
    let n = exc.n_stages();
    if stage >= n {
        return Err(arg_err!("stage {stage} out of range (0..{n})"));
    }
    if exc.block(stage).is_none() {
        return Err(arg_err!("stage {stage} has no excitation masks in this model"));
    }
    let model = &det.model;
    let mut s = Session::new(&mut det.store, Mode::Eval);
    let out = model.embed(&mut s, &[features])?;
    let tap = out.taps[stage];
    let strip = |t: &Tensor| Tensor::new(&t.shape()[1..], t.data().to_vec());
    let mut maps = vec![
        ("x", strip(s.graph.value(tap.input))?),
        ("y", strip(s.graph.value(tap.output))?),
    ];
    for (k, m) in tap.masks.iter().enumerate() {
        if let Some(v) = m {
            maps.push((MAP_NAMES[2 + k], strip(s.graph.value(*v))?));
        }
    }
    Ok(maps)
}

/// Captures block `stage` for `samples` and writes the archive into `dir`.
pub fn dump_feature_maps(det: &mut Detector, samples: &[f64], stage: usize, dir: &Path) -> Result<Vec<&'static str>> {
    let feats = det.features_of(samples)?;
    let maps = capture(det, &feats, stage)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in &maps {
        write_array(dir, name, t)?;
    }
    Ok(maps.iter().map(|(n, _)| *n).collect())
}
