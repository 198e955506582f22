//! Binary checkpoint format.
//!
//! ```text
//! MVCNN-CHECKPOINT\n
//! format_version=1\n
//! [config]\n
//! key=value\n            (one line per NetworkConfig field)
//! [vocab]\n
//! count=N\n
//! word\n                 (N lines, row order)
//! [params]\n
//! count=P\n
//! name shape=d1,d2,..\n  then d1·d2·… little-endian f32 values, then \n
//! end\n
//! ```
//!
//! Parameters are written in the model's visiting order. Only values are
//! stored; gradients and AdaGrad state start from zero after loading.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::MultichannelTable;
use crate::error::{Error, Result};
use crate::network::{Mvcnn, NetworkConfig};
use crate::tensor::{ParameterSet, RealArray};
use crate::vocab::Vocabulary;

pub const MAGIC: &str = "MVCNN-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn config_to_kv(cfg: &NetworkConfig) -> Vec<(&'static str, String)> {
    let sizes: Vec<String> = cfg.filter_sizes.iter().map(usize::to_string).collect();
    vec![
        ("channels", cfg.channels.to_string()),
        ("dim", cfg.dim.to_string()),
        ("layers", cfg.layers.to_string()),
        ("filter_sizes", sizes.join(",")),
        ("kernels_per_size", cfg.kernels_per_size.to_string()),
        ("k_top", cfg.k_top.to_string()),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("num_classes", cfg.num_classes.to_string()),
        ("dropout_keep_prob", cfg.dropout_keep_prob.to_string()),
    ]
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(format!("invalid value '{value}' for {key}")))
}

fn config_from_kv(lines: &[(String, String)]) -> Result<NetworkConfig> {
    let get = |key: &str| -> Result<&str> {
        lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing config key {key}")))
    };
    let sizes = get("filter_sizes")?
        .split(',')
        .map(|s| parse("filter_sizes", s))
        .collect::<Result<Vec<usize>>>()?;
    let cfg = NetworkConfig {
        channels: parse("channels", get("channels")?)?,
        dim: parse("dim", get("dim")?)?,
        layers: parse("layers", get("layers")?)?,
        filter_sizes: sizes,
        kernels_per_size: parse("kernels_per_size", get("kernels_per_size")?)?,
        k_top: parse("k_top", get("k_top")?)?,
        hidden_dim: parse("hidden_dim", get("hidden_dim")?)?,
        num_classes: parse("num_classes", get("num_classes")?)?,
        dropout_keep_prob: parse("dropout_keep_prob", get("dropout_keep_prob")?)?,
    };
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cfg)
}

pub fn write_checkpoint<W: Write>(model: &Mvcnn, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "format_version={FORMAT_VERSION}")?;
    writeln!(out, "[config]")?;
    for (k, v) in config_to_kv(&model.config) {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out, "[vocab]")?;
    writeln!(out, "count={}", model.table.vocab.len())?;
    for w in model.table.vocab.words() {
        writeln!(out, "{w}")?;
    }
    writeln!(out, "[params]")?;
    let mut count = 0;
    model.visit_params(&mut |_, _| count += 1);
    writeln!(out, "count={count}")?;
    let mut result = Ok(());
    model.visit_params(&mut |name, p| {
        if result.is_err() {
            return;
        }
        let shape: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        let mut buf = format!("{name} shape={}\n", shape.join(",")).into_bytes();
        buf.reserve(p.len() * 4 + 1);
        for &v in p.value.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.push(b'\n');
        result = out.write_all(&buf);
    });
    result?;
    writeln!(out, "end")?;
    Ok(())
}

pub fn checkpoint_bytes(model: &Mvcnn) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    Ok(buf)
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(bad("unexpected end of file"));
    }
    if s.ends_with('\n') {
        s.pop();
    }
    Ok(s)
}

fn expect_line<R: BufRead>(r: &mut R, want: &str) -> Result<()> {
    let got = read_line(r)?;
    if got != want {
        return Err(bad(format!("expected '{want}', found '{got}'")));
    }
    Ok(())
}

fn read_count<R: BufRead>(r: &mut R) -> Result<usize> {
    let line = read_line(r)?;
    let v = line
        .strip_prefix("count=")
        .ok_or_else(|| bad(format!("expected count=, found '{line}'")))?;
    parse("count", v)
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Mvcnn> {
    let magic = read_line(&mut r)?;
    if magic != MAGIC {
        return Err(bad("not an MVCNN checkpoint"));
    }
    let version_line = read_line(&mut r)?;
    let version: u32 = version_line
        .strip_prefix("format_version=")
        .ok_or_else(|| bad("missing format_version"))
        .and_then(|v| parse("format_version", v))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    expect_line(&mut r, "[config]")?;
    let mut kv = Vec::new();
    loop {
        let line = read_line(&mut r)?;
        if line == "[vocab]" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed config line '{line}'")))?;
        kv.push((k.to_string(), v.to_string()));
    }
    let config = config_from_kv(&kv)?;

    let n_words = read_count(&mut r)?;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        words.push(read_line(&mut r)?);
    }
    let vocab = Vocabulary::from_words(words.iter().skip(2));
    if vocab.words() != words.as_slice() {
        return Err(bad("vocabulary section is inconsistent"));
    }

    // Build a skeleton with the right shapes, then overwrite every value.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let table = MultichannelTable::random(vocab, config.channels, config.dim, 0.0, &mut rng)?;
    let mut model = Mvcnn::new(config, table, &mut rng)?;

    expect_line(&mut r, "[params]")?;
    let n_params = read_count(&mut r)?;
    let mut expected = Vec::new();
    model.visit_params(&mut |name, p| expected.push((name.to_string(), p.shape().to_vec())));
    if n_params != expected.len() {
        return Err(bad(format!(
            "{n_params} parameters stored, model has {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(n_params);
    for (name, shape) in &expected {
        let header = read_line(&mut r)?;
        let want: Vec<String> = shape.iter().map(usize::to_string).collect();
        let want = format!("{name} shape={}", want.join(","));
        if header != want {
            return Err(bad(format!("expected '{want}', found '{header}'")));
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| bad(format!("truncated data for {name}")))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mut nl = [0u8; 1];
        r.read_exact(&mut nl)?;
        if nl[0] != b'\n' {
            return Err(bad(format!("missing terminator after {name}")));
        }
        values.push(RealArray::new(shape.clone(), data)?);
    }
    expect_line(&mut r, "end")?;

    let mut it = values.into_iter();
    model.visit_params_mut(&mut |_, p| {
        p.value = it.next().expect("count checked above");
    });
    if let Some(bad_param) = first_non_finite(&model) {
        return Err(bad(format!("non-finite values in {bad_param}")));
    }
    Ok(model)
}

fn first_non_finite(model: &Mvcnn) -> Option<String> {
    let mut out = None;
    model.visit_params(&mut |name, p| {
        if out.is_none() && !p.value.is_finite() {
            out = Some(name.to_string());
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Mvcnn {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = NetworkConfig {
            channels: 2,
            dim: 3,
            layers: 2,
            filter_sizes: vec![2, 3],
            kernels_per_size: 2,
            k_top: 3,
            hidden_dim: 3,
            num_classes: 2,
            dropout_keep_prob: 0.8,
        };
        let vocab = Vocabulary::from_words(["the", "cat", "sat"]);
        let table = MultichannelTable::random(vocab, 2, 3, 0.1, &mut rng).unwrap();
        Mvcnn::new(cfg, table, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let m = model();
        let bytes = checkpoint_bytes(&m).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.table.vocab, m.table.vocab);
        let mut a = Vec::new();
        m.visit_params(&mut |_, p| a.extend(p.value.as_slice().iter().map(|&v| v as f32)));
        let mut b = Vec::new();
        back.visit_params(&mut |_, p| b.extend(p.value.as_slice().iter().map(|&v| v as f32)));
        assert_eq!(a, b);
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_other_format_versions() {
        let bytes = checkpoint_bytes(&model()).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("format_version=1", "format_version=2", 1);
        let err = read_checkpoint(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("format version 2"), "{err}");
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint("hello\n".as_bytes()).is_err());
        let bytes = checkpoint_bytes(&model()).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 20]).is_err());
    }
}
