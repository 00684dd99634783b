//! Model files.
//!
//! # The MEGW file format (version 1)
//!
//! Little-endian throughout.
//!
//! | type      | field                                              |
//! |-----------|----------------------------------------------------|
//! | `[u8;4]`  | magic `b"MEGW"`                                    |
//! | `u16`     | version (= 1)                                      |
//! | `u8`      | variant (0 = LF, 1 = VAR)                          |
//! | `u32` ×7  | n_channels, n_latent, filter_len, n_times, pool_factor, pool_stride, n_classes |
//! | `f64` ×2  | dropout_rate, l1_lambda                            |
//! | `u64`     | seed                                               |
//! | `u64`     | optimizer step                                     |
//! | tensors   | spatial, temporal, b_temporal, w_out, b_out        |
//! | tensors   | first moments, same order                          |
//! | tensors   | second moments, same order                         |
//!
//! Each tensor is `u8` rank, `u32` dims, then `f64` values in row-major order.

use std::fs;
use std::path::Path;

use crate::dataio::Reader;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::optim::{AdamState, AdamStateInit, Network};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"MEGW";
pub const MODEL_VERSION: u16 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize, field: &'static str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format {
        field,
        msg: format!("{v} does not fit in u32"),
    })?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u32(buf, d, "tensor")?;
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn get_tensor(r: &mut Reader<'_>, expect: &[usize]) -> Result<Tensor> {
    let rank = r.take(1, "tensor")?[0] as usize;
    let shape = (0..rank)
        .map(|_| r.u32("tensor").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if shape != expect {
        return Err(Error::Format {
            field: "tensor",
            msg: format!("shape {shape:?} does not match config {expect:?}"),
        });
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.f64("tensor")).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data)
}

fn get_params(r: &mut Reader<'_>, cfg: &ModelConfig) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(cfg);
    for t in p.tensors_mut() {
        *t = get_tensor(r, &t.shape().to_vec())?;
    }
    Ok(p)
}

pub fn encode_network(net: &Network) -> Result<Vec<u8>> {
    let c = &net.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.push(match c.variant {
        Variant::Lf => 0,
        Variant::Var => 1,
    });
    for (v, field) in [
        (c.n_channels, "n_channels"),
        (c.n_latent, "n_latent"),
        (c.filter_len, "filter_len"),
        (c.n_times, "n_times"),
        (c.pool_factor, "pool_factor"),
        (c.pool_stride, "pool_stride"),
        (c.n_classes, "n_classes"),
    ] {
        put_u32(&mut buf, v, field)?;
    }
    buf.extend_from_slice(&c.dropout_rate.to_le_bytes());
    buf.extend_from_slice(&c.l1_lambda.to_le_bytes());
    buf.extend_from_slice(&net.seed.to_le_bytes());
    buf.extend_from_slice(&net.adam.step.to_le_bytes());
    for p in [&net.params, &net.adam.m, &net.adam.v] {
        for t in p.tensors() {
            put_tensor(&mut buf, t)?;
        }
    }
    Ok(buf)
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::Format {
            field: "magic",
            msg: "not a model file".into(),
        });
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format {
            field: "version",
            msg: format!("unsupported version {version}"),
        });
    }
    let variant = match r.take(1, "variant")?[0] {
        0 => Variant::Lf,
        1 => Variant::Var,
        v => {
            return Err(Error::Format {
                field: "variant",
                msg: format!("unknown code {v}"),
            })
        }
    };
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32("config")? as usize;
    }
    let cfg = ModelConfig {
        variant,
        n_channels: dims[0],
        n_latent: dims[1],
        filter_len: dims[2],
        n_times: dims[3],
        pool_factor: dims[4],
        pool_stride: dims[5],
        n_classes: dims[6],
        dropout_rate: r.f64("config")?,
        l1_lambda: r.f64("config")?,
    };
    cfg.validate().map_err(|e| Error::Format {
        field: "config",
        msg: e.to_string(),
    })?;
    let seed = r.u64("seed")?;
    let step = r.u64("step")?;
    let params = get_params(&mut r, &cfg)?;
    let m = get_params(&mut r, &cfg)?;
    let v = get_params(&mut r, &cfg)?;
    if r.remaining() != 0 {
        return Err(Error::Format {
            field: "payload",
            msg: format!("{} trailing bytes", r.remaining()),
        });
    }
    Network::from_parts(cfg, params, AdamStateInit::Restored(AdamState { step, m, v }), seed)
}

pub fn save_network(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    fs::write(path, encode_network(net)?)?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    decode_network(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::optim::TrainConfig;
    use crate::rng::Rng;

    fn trained(variant: Variant) -> Network {
        let cfg = ModelConfig {
            n_latent: 3,
            filter_len: 4,
            ..ModelConfig::new(variant, 5, 16, 3)
        };
        let mut net = Network::new(cfg, 77).unwrap();
        let mut rng = Rng::new(1);
        let tc = TrainConfig { learning_rate: 1e-2, ..TrainConfig::default() };
        for i in 0..5 {
            let x = rng.normal(0.0, 1.0, &[5, 16]).unwrap();
            net.online_update(&x, i % 3, &tc).unwrap();
        }
        net
    }

    #[test]
    fn round_trip_is_lossless() {
        for variant in [Variant::Lf, Variant::Var] {
            let net = trained(variant);
            let back = decode_network(&encode_network(&net).unwrap()).unwrap();
            assert_eq!(back.config, net.config);
            assert_eq!(back.params, net.params);
            assert_eq!(back.adam, net.adam);
            assert_eq!(back.seed, net.seed);
        }
    }

    #[test]
    fn restored_network_continues_identically() {
        let mut a = trained(Variant::Lf);
        let mut b = decode_network(&encode_network(&a).unwrap()).unwrap();
        let x = Rng::new(4).normal(0.0, 1.0, &[5, 16]).unwrap();
        let tc = TrainConfig::default();
        a.online_update(&x, 1, &tc).unwrap();
        b.online_update(&x, 1, &tc).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_network(&trained(Variant::Var)).unwrap();
        let field = |b: &[u8]| match decode_network(b) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(field(&bad), "magic");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(field(&bad), "version");
        assert_eq!(field(&bytes[..bytes.len() - 3]), "tensor");
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(field(&long), "payload");
    }
}
