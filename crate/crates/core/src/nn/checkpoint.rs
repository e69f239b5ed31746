//! On-disk checkpoints.
//!
//! A checkpoint directory holds `manifest.txt` (`key = value` lines) and, per
//! layer with parameters, `layer{i}.bin`: a sequence of blobs, each a
//! little-endian `u64` element count followed by that many little-endian
//! `f32` values, in the order weights, bias, running mean, running variance,
//! initial signs. Rotating layers add `layer{i}.rot` with the `R1` and `R2`
//! blobs. Loading re-derives every blob length from the architecture and
//! rejects mismatches.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::spec::{Architecture, Shape3, Variant};
use crate::nn::state::{Gradients, NetworkState};
use crate::quantize::AdjustState;
use crate::rotation::{balanced_factorization, RotationPair};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT_VERSION: &str = "1";

/// Appends one length-prefixed `f32` blob.
pub fn push_blob(out: &mut Vec<u8>, values: &[f64]) {
    out.extend((values.len() as u64).to_le_bytes());
    for &v in values {
        out.extend((v as f32).to_le_bytes());
    }
}

/// Splits a file into its length-prefixed `f32` blobs.
pub fn read_blobs(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_blobs(&bytes, path)
}

fn parse_blobs(bytes: &[u8], path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut blobs = Vec::new();
    let mut at = 0usize;
    while at < bytes.len() {
        let Some(head) = bytes.get(at..at + 8) else {
            return Err(format_error(path, at, "truncated length prefix"));
        };
        let count = u64::from_le_bytes(head.try_into().expect("8 bytes"));
        let end = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(4))
            .and_then(|b| b.checked_add(at + 8))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_error(path, at, format!("blob of {count} values runs past the end of the file")))?;
        let values = bytes[at + 8..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        blobs.push(values);
        at = end;
    }
    Ok(blobs)
}

fn format_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `state` into `dir`, creating it if needed.
pub fn save(state: &NetworkState, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut kv = |k: &str, v: String| {
        manifest.push_str(k);
        manifest.push_str(" = ");
        manifest.push_str(&v);
        manifest.push('\n');
    };
    kv("format", FORMAT_VERSION.into());
    kv("architecture", state.arch.name.clone());
    kv("input", state.arch.input.to_string());
    kv("classes", state.arch.classes.to_string());
    kv("variant", state.variant.label().into());
    kv("epoch", state.epoch.to_string());
    kv("seed", seed.to_string());
    kv("layers", state.layers.len().to_string());
    for (i, layer) in state.layers.iter().enumerate() {
        if layer.weights.is_empty() && layer.bias.is_empty() {
            continue;
        }
        kv(&format!("layer{i}.weights"), layer.weights.len().to_string());
        kv(&format!("layer{i}.beta"), format!("{:?}", layer.adjust.beta));
        let mut blob = Vec::new();
        for part in [&layer.weights, &layer.bias, &layer.running_mean, &layer.running_var, &layer.init_signs] {
            push_blob(&mut blob, part);
        }
        write(&dir.join(format!("layer{i}.bin")), &blob)?;
        if let Some(rot) = &layer.rotation {
            kv(&format!("layer{i}.rotation"), format!("{}x{}", rot.n1(), rot.n2()));
            let mut blob = Vec::new();
            push_blob(&mut blob, rot.r1.as_slice());
            push_blob(&mut blob, rot.r2.as_slice());
            write(&dir.join(format!("layer{i}.rot")), &blob)?;
        }
    }
    write(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let (k, v) = trimmed
                .split_once('=')
                .ok_or_else(|| format_error(path, offset, format!("expected key = value, got {trimmed:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        offset += line.len();
    }
    Ok(map)
}

/// Checkpoint contents: the restored state and the seed it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: NetworkState,
    pub seed: u64,
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let map = parse_manifest(&text, &manifest_path)?;
    let get = |k: &str| {
        map.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("{}: missing key {k}", manifest_path.display())))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("{}: {k} is not a count", manifest_path.display())))
    };
    if get("format")? != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint format {}", get("format")?)));
    }
    let input: Shape3 = get("input")?.parse()?;
    let arch = Architecture::parse(get("architecture")?, input, num("classes")?)?;
    let variant: Variant = get("variant")?.parse()?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::Config("seed is not an integer".into()))?;
    if num("layers")? != arch.layers.len() {
        return Err(Error::Shape(format!(
            "manifest lists {} layers, {} has {}",
            num("layers")?,
            arch.name,
            arch.layers.len()
        )));
    }

    let mut state = NetworkState::init(arch, variant, seed);
    state.epoch = num("epoch")?;
    for i in 0..state.layers.len() {
        let layer = &mut state.layers[i];
        if layer.weights.is_empty() && layer.bias.is_empty() {
            continue;
        }
        if num(&format!("layer{i}.weights"))? != layer.weights.len() {
            return Err(Error::Shape(format!("layer {i}: manifest weight count disagrees with the architecture")));
        }
        layer.adjust = AdjustState::new(
            get(&format!("layer{i}.beta"))?
                .parse()
                .map_err(|_| Error::Config(format!("layer{i}.beta is not a number")))?,
        );
        let path = dir.join(format!("layer{i}.bin"));
        let blobs = read_blobs(&path)?;
        let targets = [
            &mut layer.weights,
            &mut layer.bias,
            &mut layer.running_mean,
            &mut layer.running_var,
            &mut layer.init_signs,
        ];
        if blobs.len() != targets.len() {
            return Err(format_error(&path, 0, format!("expected {} blobs, found {}", targets.len(), blobs.len())));
        }
        for (k, (target, blob)) in targets.into_iter().zip(blobs).enumerate() {
            if target.len() != blob.len() {
                return Err(format_error(&path, 0, format!("blob {k} has {} values, expected {}", blob.len(), target.len())));
            }
            *target = blob;
        }
        if layer.rotation.is_some() {
            let (n1, n2) = balanced_factorization(layer.weights.len());
            if get(&format!("layer{i}.rotation"))? != format!("{n1}x{n2}") {
                return Err(Error::Shape(format!("layer {i}: rotation shape disagrees with the architecture")));
            }
            let path = dir.join(format!("layer{i}.rot"));
            let mut blobs = read_blobs(&path)?.into_iter();
            let (Some(r1), Some(r2), None) = (blobs.next(), blobs.next(), blobs.next()) else {
                return Err(format_error(&path, 0, "expected two rotation blobs"));
            };
            if r1.len() != n1 * n1 || r2.len() != n2 * n2 {
                return Err(format_error(&path, 0, "rotation blob lengths do not match the layer"));
            }
            layer.rotation = Some(RotationPair::new(DenseMatrix::new(n1, n1, r1)?, DenseMatrix::new(n2, n2, r2)?)?);
        }
    }
    state.velocity = Gradients::zeros_like(&state.layers);
    state.validate()?;
    Ok(Checkpoint { state, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> NetworkState {
        let arch = Architecture::parse("mlp:6-4-4-2", Shape3::flat(6), 2).unwrap();
        let mut s = NetworkState::init(arch, Variant::BTRA, 9);
        s.epoch = 3;
        s.layers[2].adjust.beta = 1.25;
        s
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        save(&s, 9, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.state.epoch, 3);
        assert_eq!(back.state.layers[2].adjust.beta, 1.25);
        for (a, b) in s.layers.iter().zip(&back.state.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_eq!(*x as f32, *y as f32);
            }
            assert_eq!(a.init_signs, b.init_signs);
        }
        let rot = back.state.layers[2].rotation.as_ref().unwrap();
        assert!(rot.orthogonality_error() < 1e-6);
    }

    #[test]
    fn rejects_bad_lengths() {
        let dir = tempfile::tempdir().unwrap();
        save(&state(), 9, dir.path()).unwrap();
        let path = dir.path().join("layer0.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format { .. })));

        save(&state(), 9, dir.path()).unwrap();
        let mut blob = Vec::new();
        push_blob(&mut blob, &[1.0, 2.0]);
        fs::write(dir.path().join("layer2.rot"), blob).unwrap();
        assert!(load(dir.path()).is_err());

        save(&state(), 9, dir.path()).unwrap();
        let m = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        fs::write(dir.path().join(MANIFEST), m.replace("layer0.weights = 24", "layer0.weights = 25")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn blob_parsing() {
        let mut bytes = Vec::new();
        push_blob(&mut bytes, &[0.5, -2.0]);
        push_blob(&mut bytes, &[]);
        let p = Path::new("x");
        assert_eq!(parse_blobs(&bytes, p).unwrap(), vec![vec![0.5, -2.0], vec![]]);
        assert!(matches!(parse_blobs(&bytes[..5], p), Err(Error::Format { offset: 0, .. })));
    }
}
