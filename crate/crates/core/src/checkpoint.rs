//! Model checkpoints: network parameters, BN training statistics and the
//! domain-shift detector calibration, stored as a tensor archive.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{Archive, ArchiveWriter};
use crate::error::{Error, Result};
use crate::nn::{Architecture, BatchNormLayer, Block, Conv2d, Head, SegmentationNet};
use crate::scene::{generate_scene, SceneSpec};
use crate::selective_bn::DomainCalibration;
use crate::train::KlStatSummary;

/// Seed of the scene used to fingerprint backbone features.
pub const PROBE_SCENE_SEED: u64 = 0x5e_ed0f_fea7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    pub bn_epsilon: f32,
    pub training_seed: u64,
    pub calibration: DomainCalibration,
    #[serde(default)]
    pub kl_summary: Option<KlStatSummary>,
    #[serde(default)]
    pub train_pixel_accuracy: Option<f64>,
    #[serde(default)]
    pub loss_curve: Vec<f64>,
    /// SHA-256 of the backbone features of the probe scene, recorded when the
    /// checkpoint was produced.
    #[serde(default)]
    pub probe_feature_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub net: SegmentationNet,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn new(net: SegmentationNet, training_seed: u64) -> Self {
        let meta = CheckpointMeta {
            arch: net.arch.clone(),
            bn_epsilon: net.blocks[0].bn.epsilon,
            training_seed,
            calibration: DomainCalibration::default(),
            kl_summary: None,
            train_pixel_accuracy: None,
            loss_curve: Vec::new(),
            probe_feature_sha256: None,
        };
        Self { net, meta }
    }

    pub fn calibration(&self) -> DomainCalibration {
        self.meta.calibration
    }

    /// Parameter bytes in archive order; equal bytes mean equal parameters.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, _, data) in tensors_of(&self.net) {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn record_probe(&mut self) -> Result<()> {
        self.meta.probe_feature_sha256 = Some(probe_feature_hash(&self.net)?);
        Ok(())
    }
}

/// SHA-256 over the little-endian feature bytes of the probe scene, run with
/// the network's training statistics.
pub fn probe_feature_hash(net: &SegmentationNet) -> Result<String> {
    let spec = SceneSpec {
        width: 32,
        height: 32,
        num_seen_classes: net.num_classes(),
        seed: PROBE_SCENE_SEED,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec)?;
    let (features, _) = net.forward_backbone(&scene.image, &net.train_stats())?;
    let mut hasher = Sha256::new();
    for v in features.data() {
        hasher.update(v.to_le_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

fn tensors_of(net: &SegmentationNet) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (l, block) in net.blocks.iter().enumerate() {
        let c = &block.conv;
        out.push((
            format!("block{l}.conv.weight"),
            vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
            c.weight.clone(),
        ));
        out.push((
            format!("block{l}.conv.bias"),
            vec![c.out_channels],
            c.bias.clone(),
        ));
        let n = block.bn.channels();
        out.push((
            format!("block{l}.bn.gamma"),
            vec![n],
            block.bn.gamma.clone(),
        ));
        out.push((format!("block{l}.bn.beta"), vec![n], block.bn.beta.clone()));
        out.push((
            format!("block{l}.bn.mu_train"),
            vec![n],
            block.bn.mu_train.clone(),
        ));
        out.push((
            format!("block{l}.bn.sigma_train"),
            vec![n],
            block.bn.sigma_train.clone(),
        ));
    }
    let h = &net.head;
    out.push((
        "head.weight".into(),
        vec![h.num_classes, h.in_channels],
        h.weight.clone(),
    ));
    out.push(("head.bias".into(), vec![h.num_classes], h.bias.clone()));
    out
}

pub fn save_checkpoint(checkpoint: &ModelCheckpoint, path: &Path) -> Result<()> {
    let metadata = serde_json::to_value(&checkpoint.meta).map_err(|e| Error::json(path, e))?;
    let mut writer = ArchiveWriter::new(metadata);
    for (name, shape, data) in tensors_of(&checkpoint.net) {
        writer.add(name, &shape, &data)?;
    }
    writer.write(path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let archive = Archive::read(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(archive.metadata().clone()).map_err(|e| Error::Format {
            offset: 0,
            message: format!("bad checkpoint metadata: {e}"),
        })?;
    meta.arch.validate()?;
    let arch = &meta.arch;
    let mut blocks = Vec::with_capacity(arch.widths.len());
    let mut in_ch = arch.in_channels;
    for (l, &out_ch) in arch.widths.iter().enumerate() {
        let weight =
            archive.tensor_with_shape(&format!("block{l}.conv.weight"), &[out_ch, in_ch, 3, 3])?;
        let bias = archive.tensor_with_shape(&format!("block{l}.conv.bias"), &[out_ch])?;
        let vec_of =
            |name: &str| archive.tensor_with_shape(&format!("block{l}.bn.{name}"), &[out_ch]);
        let bn = BatchNormLayer {
            gamma: vec_of("gamma")?,
            beta: vec_of("beta")?,
            mu_train: vec_of("mu_train")?,
            sigma_train: vec_of("sigma_train")?,
            epsilon: meta.bn_epsilon,
        };
        if let Some(i) = bn.sigma_train.iter().position(|&s| !(s > 0.0)) {
            let entry = archive.entry(&format!("block{l}.bn.sigma_train"))?;
            return Err(Error::Format {
                offset: entry.offset + 4 * i as u64,
                message: format!("block {l}: training sigma must be positive"),
            });
        }
        blocks.push(Block {
            conv: Conv2d {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel: 3,
                weight,
                bias,
            },
            bn,
        });
        in_ch = out_ch;
    }
    let head = Head {
        in_channels: in_ch,
        num_classes: arch.num_classes,
        weight: archive.tensor_with_shape("head.weight", &[arch.num_classes, in_ch])?,
        bias: archive.tensor_with_shape("head.bias", &[arch.num_classes])?,
    };
    let net = SegmentationNet {
        arch: arch.clone(),
        blocks,
        head,
    };
    Ok(ModelCheckpoint { net, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::archive_paths;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = SegmentationNet::init(&Architecture::default(), &mut rng).unwrap();
        net.blocks[1].bn.sigma_train[3] = 0.123_456_7;
        net.blocks[0].bn.mu_train[0] = -1.0e-7;
        let mut ck = ModelCheckpoint::new(net, 42);
        ck.meta.calibration = DomainCalibration {
            a: -0.1 / 3.0,
            b: 1.0 / 7.0,
            ..DomainCalibration::default()
        };
        ck.record_probe().unwrap();
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ck = sample_checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.parameter_bytes(), ck.parameter_bytes());
        assert_eq!(back.meta, ck.meta);
        assert_eq!(
            back.meta.calibration.a.to_bits(),
            ck.meta.calibration.a.to_bits()
        );
        assert_eq!(back, ck);
        assert_eq!(
            probe_feature_hash(&back.net).unwrap(),
            ck.meta.probe_feature_sha256.unwrap()
        );
    }

    #[test]
    fn channel_count_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let (json_path, _) = archive_paths(&path);
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&json_path).unwrap()).unwrap();
        manifest["metadata"]["arch"]["widths"][1] = serde_json::json!(48);
        std::fs::write(&json_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_blob_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let (_, bin) = archive_paths(&path);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..100]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("{other:?}"),
        }
    }
}
