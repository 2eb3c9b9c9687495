//! Checkpoint container and CSV exports.
//!
//! Layout: magic `UGCKPT\x01`, u32 version, u32 metadata length, JSON
//! metadata, u32 tensor count, then per tensor a u16 name length, the name,
//! a u8 rank, rank u64 dims and the f64 values. A SHA-256 of everything
//! after the magic closes the file. All integers and floats are little-endian.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{AlignOutcome, DifficultyTracker, FrozenHead, MetricRow, Projector};
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, OptimizerKind, OptimizerState, ParamSet};
use crate::pretrain::{EpochLoss, PretrainedModel};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"UGCKPT\x01";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub seed: u64,
    pub step: u64,
    pub domains: Vec<String>,
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamSet,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?;
    let count = u32::try_from(ckpt.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    let mut body = Vec::new();
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    body.extend_from_slice(&meta_len.to_le_bytes());
    body.extend_from_slice(&meta);
    body.extend_from_slice(&count.to_le_bytes());
    for (name, m) in ckpt.tensors.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name `{name}` too long")))?;
        body.extend_from_slice(&len.to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(2);
        body.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        body.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + body.len() + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Length(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct RawTensor<'a> {
    name: &'a [u8],
    dims: Vec<u64>,
    values: &'a [u8],
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let magic_len = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic_len {
        if CHECKPOINT_MAGIC.starts_with(bytes) {
            return Err(Error::Length(format!(
                "only {} bytes, shorter than the magic",
                bytes.len()
            )));
        }
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if &bytes[..magic_len] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: magic_len,
    };
    let version = r.u32("version")?;
    if version == 0 || version > CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }

    // walk the structure first so truncation is reported before the checksum
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.take(meta_len, "metadata")?;
    let count = r.u32("tensor count")?;
    let mut raw = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = r.take(name_len, "tensor name")?;
        let rank = r.u8("tensor rank")?;
        let dims = (0..rank).map(|_| r.u64("tensor dim")).collect::<Result<Vec<_>>>()?;
        let elems = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::Length("tensor size overflows".into()))?;
        let values = r.take(elems, "tensor values")?;
        raw.push(RawTensor { name, dims, values });
    }
    let body_end = r.pos;
    let stored = r.take(DIGEST_LEN, "checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the checksum",
            bytes.len() - r.pos
        )));
    }
    if Sha256::digest(&bytes[magic_len..body_end]).as_slice() != stored {
        return Err(Error::Checksum);
    }

    let meta: CheckpointMeta =
        serde_json::from_slice(meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut tensors = ParamSet::new();
    for t in raw {
        let name = std::str::from_utf8(t.name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let (rows, cols) = match t.dims[..] {
            [n] => (1, n as usize),
            [r, c] => (r as usize, c as usize),
            _ => {
                return Err(Error::Format(format!(
                    "tensor `{name}` has unsupported rank {}",
                    t.dims.len()
                )))
            }
        };
        let data: Vec<f64> = t
            .values
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors
            .push(name, Matrix::from_vec(rows, cols, data)?)
            .map_err(|_| Error::Format(format!("duplicate tensor `{name}`")))?;
    }
    Ok(Checkpoint { meta, tensors })
}

/// Writes the encoded checkpoint and syncs it to disk.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// SHA-256 over names, shapes and little-endian values.
pub fn param_digest(params: &ParamSet) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, m) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// 17 significant digits, enough to round-trip any f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `header` and `records` as CSV.
pub fn write_csv<I>(path: &Path, header: &[&str], records: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const METRICS_HEADER: [&str; 6] = ["step", "domain", "loss", "grad_norm", "smoothed", "weight"];

pub fn export_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    write_csv(
        path,
        &METRICS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.domain.clone(),
                format_f64(r.loss),
                format_f64(r.grad_norm),
                format_f64(r.smoothed),
                format_f64(r.weight),
            ]
        }),
    )
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {what} `{field}`"),
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}", METRICS_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 6 fields, found {}", rec.len()),
            });
        }
        out.push(MetricRow {
            step: parse_field(path, line, &rec[0], "step")?,
            domain: rec[1].to_string(),
            loss: parse_field(path, line, &rec[2], "loss")?,
            grad_norm: parse_field(path, line, &rec[3], "grad_norm")?,
            smoothed: parse_field(path, line, &rec[4], "smoothed")?,
            weight: parse_field(path, line, &rec[5], "weight")?,
        });
    }
    Ok(out)
}

pub fn export_epoch_losses(losses: &[EpochLoss], path: &Path) -> Result<()> {
    write_csv(
        path,
        &["epoch", "mean_loss"],
        losses
            .iter()
            .map(|l| vec![l.epoch.to_string(), format_f64(l.mean_loss)]),
    )
}

pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_ALIGN: &str = "align";
const HEAD_PREFIX: &str = "head.";
const FIRST_MOMENT_PREFIX: &str = "optimizer.first.";
const SECOND_MOMENT_PREFIX: &str = "optimizer.second.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderExtra {
    pub dims: EncoderDims,
    pub text_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorExtra {
    pub input_dim: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub steps: usize,
    pub optimizer: OptimizerMeta,
    pub tracker: DifficultyTracker,
}

fn extra<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint, stage: &str) -> Result<T> {
    if ckpt.meta.stage != stage {
        return Err(Error::Format(format!(
            "expected a {stage} checkpoint, found stage `{}`",
            ckpt.meta.stage
        )));
    }
    serde_json::from_value(ckpt.meta.extra.clone())
        .map_err(|e| Error::Format(format!("{stage} checkpoint metadata: {e}")))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data always serializes")
}

/// Stage I checkpoint: encoder and adapter tensors.
pub fn encoder_checkpoint(
    model: &PretrainedModel,
    text_dim: usize,
    domains: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    step: u64,
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            stage: STAGE_PRETRAIN.into(),
            seed,
            step,
            domains,
            config,
            extra: to_value(&EncoderExtra {
                dims: model.encoder.dims(),
                text_dim,
            }),
        },
        tensors: model.to_params(),
    }
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(PretrainedModel, EncoderExtra)> {
    let ex: EncoderExtra = extra(ckpt, STAGE_PRETRAIN)?;
    let model = PretrainedModel::from_params(ex.dims, &ckpt.tensors)?;
    Ok((model, ex))
}

/// Stage II checkpoint: projector, optimizer moments, tracker and the frozen head.
pub fn projector_checkpoint(outcome: &AlignOutcome, config: serde_json::Value, seed: u64) -> Result<Checkpoint> {
    let opt = &outcome.optimizer;
    let mut tensors = outcome.projector.params().clone();
    tensors.extend_prefixed(FIRST_MOMENT_PREFIX, &opt.first_moment)?;
    tensors.extend_prefixed(SECOND_MOMENT_PREFIX, &opt.second_moment)?;
    tensors.extend_prefixed(HEAD_PREFIX, &outcome.head.to_params())?;
    Ok(Checkpoint {
        meta: CheckpointMeta {
            stage: STAGE_ALIGN.into(),
            seed,
            step: outcome.steps as u64,
            domains: outcome.head.domains().iter().map(|h| h.domain.clone()).collect(),
            config,
            extra: to_value(&ProjectorExtra {
                input_dim: outcome.projector.input_dim(),
                tokens: outcome.projector.tokens(),
                token_dim: outcome.projector.token_dim(),
                steps: outcome.steps,
                optimizer: OptimizerMeta {
                    kind: opt.kind,
                    learning_rate: opt.learning_rate,
                    beta1: opt.beta1,
                    beta2: opt.beta2,
                    epsilon: opt.epsilon,
                    step: opt.step,
                },
                tracker: outcome.tracker.clone(),
            }),
        },
        tensors,
    })
}

#[derive(Debug, Clone)]
pub struct LoadedProjector {
    pub projector: Projector,
    pub head: FrozenHead,
    pub optimizer: OptimizerState,
    pub extra: ProjectorExtra,
}

pub fn projector_from_checkpoint(ckpt: &Checkpoint) -> Result<LoadedProjector> {
    let ex: ProjectorExtra = extra(ckpt, STAGE_ALIGN)?;
    let mut proj = ParamSet::new();
    for name in ["weight", "bias"] {
        let m = ckpt
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("projector checkpoint lacks `{name}`")))?;
        proj.push(name, m.clone())?;
    }
    let projector = Projector::from_params(ex.tokens, ex.token_dim, proj)?;
    let head = FrozenHead::from_params(ex.tokens, ex.token_dim, &ckpt.tensors.strip_prefix(HEAD_PREFIX))?;
    let o = &ex.optimizer;
    let optimizer = OptimizerState {
        kind: o.kind,
        learning_rate: o.learning_rate,
        beta1: o.beta1,
        beta2: o.beta2,
        epsilon: o.epsilon,
        step: o.step,
        first_moment: ckpt.tensors.strip_prefix(FIRST_MOMENT_PREFIX),
        second_moment: ckpt.tensors.strip_prefix(SECOND_MOMENT_PREFIX),
    };
    Ok(LoadedProjector {
        projector,
        head,
        optimizer,
        extra: ex,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = ParamSet::new();
        tensors
            .push(
                "w",
                Matrix::from_rows(&[[1.0, -0.0, f64::MIN_POSITIVE], [1e300, -2.5, 0.1]]).unwrap(),
            )
            .unwrap();
        tensors.push("b", Matrix::row_vector(&[f64::NAN, 3.0])).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                stage: "pretrain".into(),
                seed: 7,
                step: 30,
                domains: vec!["a".into(), "b".into()],
                config: serde_json::json!({"lr": 0.01, "epochs": 3}),
                extra: serde_json::Value::Null,
            },
            tensors,
        }
    }

    fn bits(c: &Checkpoint) -> Vec<u64> {
        c.tensors
            .values()
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.tensors.names(), c.tensors.names());
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(
            encode_checkpoint(&sample()).unwrap(),
            encode_checkpoint(&sample()).unwrap()
        );
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        let at = bytes.len() - 40;
        bytes[at] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checksum)));
    }

    #[test]
    fn error_kinds_are_distinct() {
        let good = encode_checkpoint(&sample()).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad_magic), Err(Error::Format(_))));
        let mut future = good.clone();
        future[7..11].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&future),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
        for cut in [3, 9, 20, good.len() / 2, good.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&good[..cut]), Err(Error::Length(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        assert_eq!(bits(&load_checkpoint(&p).unwrap()), bits(&sample()));
        assert!(load_checkpoint(&dir.path().join("missing")).unwrap_err().is_io());
    }

    #[test]
    fn metrics_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        export_metrics(&[], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "step,domain,loss,grad_norm,smoothed,weight\n"
        );
        let rows = vec![MetricRow {
            step: 3,
            domain: "easy".into(),
            loss: 0.1 + 0.2,
            grad_norm: std::f64::consts::PI,
            smoothed: 1e-300,
            weight: 2.0 / 3.0,
        }];
        export_metrics(&rows, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    #[test]
    fn pipeline_checkpoints_round_trip() {
        use crate::align::{align_loop, AlignConfig};
        use crate::graphdata::TaskKind;
        use crate::synthgen::{generate_domain, DomainSpec};

        let ds = generate_domain(&DomainSpec {
            domain: "toy".into(),
            task: TaskKind::Graph,
            num_instances: 20,
            classes: 3,
            nodes: (3, 5),
            feature_dim: 4,
            text_dim: 6,
            feature_noise: 0.2,
            text_noise: 0.1,
            label_noise: 0.0,
            split: (0.6, 0.2),
            seed: 4,
        })
        .unwrap();
        let dims = EncoderDims {
            input_dim: 4,
            hidden_dim: 5,
            layers: 2,
        };
        let model = PretrainedModel::new(dims, 6, 2).unwrap();
        let ck = encoder_checkpoint(&model, 6, vec!["toy".into()], serde_json::json!({}), 2, 0);
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        let (m2, ex) = model_from_checkpoint(&back).unwrap();
        assert_eq!(ex.dims, dims);
        assert_eq!(param_digest(&m2.to_params()), param_digest(&model.to_params()));

        let config = AlignConfig {
            steps: Some(4),
            batch_size: 4,
            token_dim: 3,
            tokens: 2,
            ..AlignConfig::default()
        };
        let datasets = vec![ds];
        let out = align_loop(&config, &datasets, &model.encoder).unwrap();
        let ck = projector_checkpoint(&out, serde_json::to_value(&config).unwrap(), 0).unwrap();
        let loaded = projector_from_checkpoint(&decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap()).unwrap();
        assert_eq!(loaded.projector, out.projector);
        assert_eq!(loaded.head, out.head);
        assert_eq!(loaded.optimizer, out.optimizer);
        assert_eq!(loaded.extra.tracker, out.tracker);
        assert!(model_from_checkpoint(&ck).is_err());
    }

    #[test]
    fn digest_tracks_values() {
        let a = sample().tensors;
        let mut b = a.clone();
        assert_eq!(param_digest(&a), param_digest(&b));
        b.at_mut(0).set(0, 0, 1.0 + f64::EPSILON);
        assert_ne!(param_digest(&a), param_digest(&b));
    }
}
