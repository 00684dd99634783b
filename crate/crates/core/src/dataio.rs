//! Epoch files, per-epoch scaling, decimation and subject-wise splits.
//!
//! # The MEGB file format (version 1)
//!
//! All integers and floats are little-endian.
//!
//! | offset | type     | field                                  |
//! |--------|----------|----------------------------------------|
//! | 0      | `[u8;4]` | magic `b"MEGB"`                        |
//! | 4      | `u16`    | version (= 1)                          |
//! | 6      | `u32`    | `n_trials`                             |
//! | 10     | `u32`    | `n_channels`                           |
//! | 14     | `u32`    | `n_times`                              |
//! | 18     | `f32`    | `sample_rate_hz`                       |
//! | 22     | `u16`    | `n_classes`                            |
//! | 24     | `u16`    | flags (bit 0: payload is `f64`)        |
//! | 26     | `u16[n_trials]` | labels                          |
//! | ...    | `u16[n_trials]` | subject ids                     |
//! | ...    | `f64` or `f32`  | epochs, trial-major, then channel-major |
//!
//! Writers always emit `f64` payloads, so a write/read round trip is lossless.

use std::fs;
use std::path::Path;

use crate::error::{param_err, Error, Result};
use crate::rng::Rng;
use crate::synth::EpochSet;
use crate::tensor::Tensor;

pub const EPOCH_MAGIC: &[u8; 4] = b"MEGB";
pub const EPOCH_VERSION: u16 = 1;
const HEADER_LEN: usize = 26;
const FLAG_F64: u16 = 1;

/// Fixed-size header at the start of an MEGB file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochFileHeader {
    pub version: u16,
    pub n_trials: u32,
    pub n_channels: u32,
    pub n_times: u32,
    pub sample_rate_hz: f32,
    pub n_classes: u16,
    pub flags: u16,
}

impl EpochFileHeader {
    fn payload_len(&self) -> usize {
        let width = if self.flags & FLAG_F64 != 0 { 8 } else { 4 };
        let n = self.n_trials as usize;
        4 * n + n * self.n_channels as usize * self.n_times as usize * width
    }
}

fn to_u16(v: usize, field: &'static str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format {
        field,
        msg: format!("{v} does not fit in u16"),
    })
}

fn to_u32(v: usize, field: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format {
        field,
        msg: format!("{v} does not fit in u32"),
    })
}

pub fn encode_epochs(set: &EpochSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * set.n_trials() + 8 * set.epochs.len());
    buf.extend_from_slice(EPOCH_MAGIC);
    buf.extend_from_slice(&EPOCH_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(set.n_trials(), "n_trials")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(set.n_channels(), "n_channels")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(set.n_times(), "n_times")?.to_le_bytes());
    buf.extend_from_slice(&(set.sample_rate_hz as f32).to_le_bytes());
    buf.extend_from_slice(&to_u16(set.n_classes, "n_classes")?.to_le_bytes());
    buf.extend_from_slice(&FLAG_F64.to_le_bytes());
    for &l in &set.labels {
        buf.extend_from_slice(&to_u16(l, "labels")?.to_le_bytes());
    }
    for &s in &set.subjects {
        buf.extend_from_slice(&to_u16(s, "subjects")?.to_le_bytes());
    }
    for v in set.epochs.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn write_epochs(path: impl AsRef<Path>, set: &EpochSet) -> Result<()> {
    fs::write(path, encode_epochs(set)?)?;
    Ok(())
}

/// Cursor over a little-endian byte buffer that reports the field being read.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                field,
                msg: format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<EpochFileHeader> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != EPOCH_MAGIC {
        return Err(Error::Format {
            field: "magic",
            msg: "expected b\"MEGB\"".into(),
        });
    }
    let version = r.u16("version")?;
    if version != EPOCH_VERSION {
        return Err(Error::Format {
            field: "version",
            msg: format!("unsupported version {version}, expected {EPOCH_VERSION}"),
        });
    }
    Ok(EpochFileHeader {
        version,
        n_trials: r.u32("n_trials")?,
        n_channels: r.u32("n_channels")?,
        n_times: r.u32("n_times")?,
        sample_rate_hz: r.f32("sample_rate_hz")?,
        n_classes: r.u16("n_classes")?,
        flags: r.u16("flags")?,
    })
}

pub fn decode_epochs(bytes: &[u8]) -> Result<EpochSet> {
    let header = decode_header(bytes)?;
    let body = bytes.len() - HEADER_LEN;
    if header.n_trials == 0 {
        return Err(Error::Format {
            field: "n_trials",
            msg: format!("header declares 0 trials with {body} payload bytes"),
        });
    }
    if header.n_channels == 0 || header.n_times == 0 {
        return Err(Error::Format {
            field: "n_channels",
            msg: "epoch dimensions must be nonzero".into(),
        });
    }
    if body != header.payload_len() {
        return Err(Error::Format {
            field: "payload",
            msg: format!(
                "declared sizes need {} bytes after the header, found {body}",
                header.payload_len()
            ),
        });
    }
    let mut r = Reader::new(&bytes[HEADER_LEN..]);
    let n = header.n_trials as usize;
    let labels = (0..n)
        .map(|_| r.u16("labels").map(usize::from))
        .collect::<Result<Vec<_>>>()?;
    let subjects = (0..n)
        .map(|_| r.u16("subjects").map(usize::from))
        .collect::<Result<Vec<_>>>()?;
    let count = n * header.n_channels as usize * header.n_times as usize;
    let data = if header.flags & FLAG_F64 != 0 {
        (0..count).map(|_| r.f64("epochs")).collect::<Result<Vec<_>>>()?
    } else {
        (0..count)
            .map(|_| r.f32("epochs").map(f64::from))
            .collect::<Result<Vec<_>>>()?
    };
    debug_assert_eq!(r.remaining(), 0);
    let epochs = Tensor::new(
        vec![n, header.n_channels as usize, header.n_times as usize],
        data,
    )
    .map_err(|_| Error::Format {
        field: "epochs",
        msg: "payload contains non-finite values".into(),
    })?;
    EpochSet::new(
        epochs,
        labels,
        subjects,
        f64::from(header.sample_rate_hz),
        usize::from(header.n_classes),
    )
    .map_err(|e| Error::Format {
        field: "labels",
        msg: e.to_string(),
    })
}

pub fn read_epochs(path: impl AsRef<Path>) -> Result<EpochSet> {
    decode_epochs(&fs::read(path)?)
}

/// Scales an epoch by the scalar mean and standard deviation (divisor `N - 1`)
/// of all channels over its first `baseline_len` samples.
pub fn baseline_scale(epoch: &Tensor, baseline_len: usize, eps: f64) -> Result<Tensor> {
    let [n, t] = epoch.shape() else {
        return param_err(format!("epoch must be 2-d, got {:?}", epoch.shape()));
    };
    let (n, t) = (*n, *t);
    if baseline_len == 0 || baseline_len > t {
        return param_err(format!("baseline_len {baseline_len} outside 1..={t}"));
    }
    let count = (n * baseline_len) as f64;
    let values = (0..n).flat_map(|i| epoch.row(i)[..baseline_len].iter().copied());
    let rough = values.clone().sum::<f64>() / count;
    // One refinement pass so constant baselines give an exact mean.
    let mean = rough + values.clone().map(|v| v - rough).sum::<f64>() / count;
    let std = if count > 1.0 {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0)).sqrt()
    } else {
        0.0
    };
    let denom = std.max(eps);
    let data = epoch.data().iter().map(|v| (v - mean) / denom).collect();
    Tensor::new(vec![n, t], data)
}

pub const DEFAULT_SCALE_EPS: f64 = 1e-12;

/// Keeps every `factor`-th sample starting at index 0. No anti-alias filtering.
pub fn decimate(epoch: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return param_err("decimation factor must be >= 1");
    }
    let [n, t] = epoch.shape() else {
        return param_err(format!("epoch must be 2-d, got {:?}", epoch.shape()));
    };
    let (n, t) = (*n, *t);
    let kept = t.div_ceil(factor);
    let mut data = Vec::with_capacity(n * kept);
    for i in 0..n {
        data.extend(epoch.row(i).iter().step_by(factor));
    }
    Tensor::new(vec![n, kept], data)
}

/// Decimates every epoch and divides the sample rate by `factor`.
pub fn decimate_set(set: &EpochSet, factor: usize) -> Result<EpochSet> {
    let mut out = set.map_epochs(|e| decimate(e, factor))?;
    out.sample_rate_hz = set.sample_rate_hz / factor as f64;
    Ok(out)
}

/// Baseline-scales each epoch on its first `baseline_len` samples, then drops them.
pub fn preprocess(set: &EpochSet, baseline_len: usize) -> Result<EpochSet> {
    if baseline_len >= set.n_times() {
        return param_err(format!(
            "baseline_len {baseline_len} leaves no post-stimulus samples of {}",
            set.n_times()
        ));
    }
    set.map_epochs(|e| {
        let scaled = baseline_scale(e, baseline_len, DEFAULT_SCALE_EPS)?;
        let (n, t) = (scaled.rows(), scaled.cols());
        let mut data = Vec::with_capacity(n * (t - baseline_len));
        for i in 0..n {
            data.extend_from_slice(&scaled.row(i)[baseline_len..]);
        }
        Tensor::new(vec![n, t - baseline_len], data)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub held_out_subject: usize,
    pub validation_fraction: f64,
}

/// Index-level result of [`split_indices`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Leave-one-subject-out split. The held-out subject's trials (in original
/// order) form the test set; the rest are shuffled and split stratified by
/// class so that `|validation| = round(fraction · |rest|)`.
pub fn split_indices(set: &EpochSet, spec: &SplitSpec, rng: &mut Rng) -> Result<SplitIndices> {
    if !(spec.validation_fraction > 0.0 && spec.validation_fraction < 1.0) {
        return param_err(format!(
            "validation_fraction must be in (0, 1), got {}",
            spec.validation_fraction
        ));
    }
    let test: Vec<usize> = (0..set.n_trials())
        .filter(|&i| set.subjects[i] == spec.held_out_subject)
        .collect();
    if test.is_empty() {
        return param_err(format!("subject {} not present", spec.held_out_subject));
    }
    let rest: Vec<usize> = (0..set.n_trials())
        .filter(|&i| set.subjects[i] != spec.held_out_subject)
        .collect();
    if rest.is_empty() {
        return param_err("no trials left for training after holding out the test subject");
    }
    let total_val = (spec.validation_fraction * rest.len() as f64).round() as usize;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.n_classes];
    for &i in &rest {
        by_class[set.labels[i]].push(i);
    }
    for group in &mut by_class {
        rng.shuffle(group);
    }
    // Largest-remainder apportionment of the validation quota across classes.
    let exact: Vec<f64> = by_class
        .iter()
        .map(|g| g.len() as f64 * total_val as f64 / rest.len() as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut missing = total_val - quota.iter().sum::<usize>();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut validation = Vec::with_capacity(total_val);
    let mut train = Vec::with_capacity(rest.len() - total_val);
    for (group, &q) in by_class.iter().zip(&quota) {
        validation.extend_from_slice(&group[..q]);
        train.extend_from_slice(&group[q..]);
    }
    rng.shuffle(&mut validation);
    rng.shuffle(&mut train);
    Ok(SplitIndices {
        train,
        validation,
        test,
    })
}

/// `(train, validation, test)` sets for one held-out subject.
pub fn split(set: &EpochSet, spec: &SplitSpec, rng: &mut Rng) -> Result<(EpochSet, EpochSet, EpochSet)> {
    let idx = split_indices(set, spec, rng)?;
    if idx.validation.is_empty() || idx.train.is_empty() {
        return param_err("split produced an empty training or validation set");
    }
    Ok((
        set.subset(&idx.train)?,
        set.subset(&idx.validation)?,
        set.subset(&idx.test)?,
    ))
}
