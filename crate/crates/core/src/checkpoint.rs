//! JSON checkpoints with parameters stored as base64 little-endian f64.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Fold;
use crate::denoiser::{Denoiser, DenoiserArch};
use crate::detector::{ToyDetector, ToyDetectorArch};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<A> {
    pub format_version: u32,
    pub kind: String,
    pub arch: A,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    /// Training iterations (denoiser) or epochs (detector) completed.
    pub iterations: usize,
    /// Fold of the training data, `None` for the full set.
    #[serde(default)]
    pub fold: Option<Fold>,
    pub params: String,
}

pub fn encode_params(p: &[f64]) -> String {
    let bytes: Vec<u8> = p.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_params(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("bad parameter blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("parameter blob is not a multiple of 8 bytes".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl<A: Serialize + DeserializeOwned> Checkpoint<A> {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Self = serde_json::from_slice(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", ck.kind)));
        }
        Ok(ck)
    }
}

pub const DENOISER_KIND: &str = "denoiser";
pub const DETECTOR_KIND: &str = "detector";

pub fn denoiser_checkpoint(
    model: &Denoiser,
    schedule: ScheduleConfig,
    iterations: usize,
    fold: Option<Fold>,
) -> Checkpoint<DenoiserArch> {
    Checkpoint {
        format_version: FORMAT_VERSION,
        kind: DENOISER_KIND.into(),
        arch: model.arch(),
        schedule: Some(schedule),
        iterations,
        fold,
        params: encode_params(model.params()),
    }
}

pub fn detector_checkpoint(model: &ToyDetector, epochs: usize, fold: Option<Fold>) -> Checkpoint<ToyDetectorArch> {
    use crate::detector::Detector;
    Checkpoint {
        format_version: FORMAT_VERSION,
        kind: DETECTOR_KIND.into(),
        arch: model.arch(),
        schedule: None,
        iterations: epochs,
        fold,
        params: encode_params(model.params()),
    }
}

impl Checkpoint<DenoiserArch> {
    pub fn to_model(&self) -> Result<Denoiser> {
        Denoiser::from_params(self.arch, decode_params(&self.params)?)
    }
}

impl Checkpoint<ToyDetectorArch> {
    pub fn to_model(&self) -> Result<ToyDetector> {
        ToyDetector::from_params(self.arch, decode_params(&self.params)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detector;

    #[test]
    fn params_round_trip_bit_exact() {
        let p = vec![0.0, -0.0, 1.5e-300, f64::MAX, -3.25, std::f64::consts::PI];
        let back = decode_params(&encode_params(&p)).unwrap();
        assert_eq!(p.len(), back.len());
        assert!(p.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode_params("AAAA").is_err());
        assert!(decode_params("!!").is_err());
    }

    #[test]
    fn model_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let den = Denoiser::new(
            DenoiserArch {
                channels: 3,
                base_width: 4,
                temb_dim: 8,
            },
            1,
        );
        let path = dir.path().join("d.json");
        denoiser_checkpoint(&den, ScheduleConfig::DESK, 12, Some(Fold::B))
            .save(&path)
            .unwrap();
        let ck = Checkpoint::<DenoiserArch>::load(&path, DENOISER_KIND).unwrap();
        assert_eq!((ck.iterations, ck.fold), (12, Some(Fold::B)));
        assert_eq!(ck.to_model().unwrap().params(), den.params());
        assert!(Checkpoint::<DenoiserArch>::load(&path, DETECTOR_KIND).is_err());

        let det = ToyDetector::new(ToyDetectorArch::for_size(16), 2);
        let path = dir.path().join("t.json");
        detector_checkpoint(&det, 3, None).save(&path).unwrap();
        let ck = Checkpoint::<ToyDetectorArch>::load(&path, DETECTOR_KIND).unwrap();
        assert_eq!(ck.to_model().unwrap().params(), det.params());
    }
}
