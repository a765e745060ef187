//! Checkpoint container format.
//!
//! Layout: magic `SKV1`, format version (u32 LE), a UTF-8 config block of
//! line-oriented `key=value` pairs (u32 length prefix), then a tensor table:
//! for each tensor a u32 name length, the name bytes, u32 rank, u64 extents,
//! and raw 32-bit little-endian scalars. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::attn::HeadInjection;
use crate::config::{ModelConfig, Positional, VariantKind};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SKV1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("malformed config block: {0}")]
    BadConfig(String),
    #[error("malformed tensor table: {0}")]
    BadTable(String),
}

// ── Config block as key=value lines ─────────────────────────────────────────

/// Render a config as line-oriented `key=value` text.
pub fn config_to_kv(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("layers", cfg.layers.to_string());
    kv("dim", cfg.dim.to_string());
    kv("heads", cfg.heads.to_string());
    kv("ffn_dim", cfg.ffn_dim.to_string());
    kv("vocab", cfg.vocab.to_string());
    kv("n_max", cfg.n_max.to_string());
    kv("variant", cfg.variant.name().to_string());
    match cfg.variant {
        VariantKind::ResFormer { lambda } => kv("lambda", format!("{lambda}")),
        VariantKind::Gqa { groups } | VariantKind::SkipV1Gqa { groups } => {
            kv("groups", groups.to_string())
        }
        VariantKind::Mla { d_c, d_r } | VariantKind::SkipV1Mla { d_c, d_r } => {
            kv("d_c", d_c.to_string());
            kv("d_r", d_r.to_string());
        }
        VariantKind::ClaV { period } => kv("period", period.to_string()),
        _ => {}
    }
    kv("skip_ratio", format!("{}", cfg.skip_ratio));
    kv(
        "injection",
        match cfg.injection {
            HeadInjection::SecondHalf => "second-half",
            HeadInjection::Pooling => "pooling",
            HeadInjection::Dynamic => "dynamic",
            HeadInjection::OddEven => "odd-even",
            HeadInjection::SkipV1PlusRes => "skip-res",
        }
        .to_string(),
    );
    kv(
        "positional",
        match cfg.positional {
            Positional::Learned => "learned",
            Positional::Rotary => "rotary",
        }
        .to_string(),
    );
    kv("elem_bytes", cfg.elem_bytes.to_string());
    s
}

/// Parse `key=value` lines (with `#` comments) into a map.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got '{raw}'", idx + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Rebuild a config from `key=value` pairs.
pub fn config_from_kv(map: &BTreeMap<String, String>) -> Result<ModelConfig, String> {
    fn get<'a>(map: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str, String> {
        map.get(k).map(|s| s.as_str()).ok_or_else(|| format!("missing key '{k}'"))
    }
    fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, k: &str) -> Result<T, String> {
        get(map, k)?.parse().map_err(|_| format!("bad value for '{k}'"))
    }
    let variant = match get(map, "variant")? {
        "mha" => VariantKind::Mha,
        "skipv1" => VariantKind::SkipV1,
        "resformer" => VariantKind::ResFormer { lambda: num(map, "lambda")? },
        "gqa" => VariantKind::Gqa { groups: num(map, "groups")? },
        "skipv1-gqa" => VariantKind::SkipV1Gqa { groups: num(map, "groups")? },
        "mla" => VariantKind::Mla { d_c: num(map, "d_c")?, d_r: num(map, "d_r")? },
        "skipv1-mla" => VariantKind::SkipV1Mla { d_c: num(map, "d_c")?, d_r: num(map, "d_r")? },
        "yoco-v" => VariantKind::YocoV,
        "cla-v" => VariantKind::ClaV { period: num(map, "period")? },
        "skipkv1" => VariantKind::SkipKv1,
        "skipv1-yoco" => VariantKind::SkipV1Yoco,
        other => return Err(format!("unknown variant '{other}'")),
    };
    let injection = match map.get("injection").map(|s| s.as_str()).unwrap_or("second-half") {
        "second-half" => HeadInjection::SecondHalf,
        "pooling" => HeadInjection::Pooling,
        "dynamic" => HeadInjection::Dynamic,
        "odd-even" => HeadInjection::OddEven,
        "skip-res" => HeadInjection::SkipV1PlusRes,
        other => return Err(format!("unknown injection '{other}'")),
    };
    let positional = match map.get("positional").map(|s| s.as_str()).unwrap_or("learned") {
        "learned" => Positional::Learned,
        "rotary" => Positional::Rotary,
        other => return Err(format!("unknown positional '{other}'")),
    };
    Ok(ModelConfig {
        layers: num(map, "layers")?,
        dim: num(map, "dim")?,
        heads: num(map, "heads")?,
        ffn_dim: num(map, "ffn_dim")?,
        vocab: num(map, "vocab")?,
        n_max: num(map, "n_max")?,
        variant,
        skip_ratio: num(map, "skip_ratio")?,
        injection,
        positional,
        elem_bytes: num(map, "elem_bytes")?,
    })
}

// ── Binary read/write ───────────────────────────────────────────────────────

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<(), CkptIoError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let cfg = config_to_kv(&ck.config);
    let cfg_bytes = cfg.as_bytes();
    w.write_all(&(cfg_bytes.len() as u32).to_le_bytes())?;
    w.write_all(cfg_bytes)?;
    w.write_all(&(ck.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ck.tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, CkptIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CkptIoError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CkptIoError::BadVersion(version));
    }
    let cfg_len = read_u32(r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg_text =
        String::from_utf8(cfg_bytes).map_err(|e| CkptIoError::BadConfig(e.to_string()))?;
    let kv = parse_kv(&cfg_text).map_err(CkptIoError::BadConfig)?;
    let config = config_from_kv(&kv).map_err(CkptIoError::BadConfig)?;

    let count = read_u32(r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name =
            String::from_utf8(name_bytes).map_err(|e| CkptIoError::BadTable(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| CkptIoError::BadTable(e.to_string()))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(CkptIoError::BadTable(format!("duplicate tensor '{name}'")));
        }
    }
    Ok(Checkpoint { config, tensors })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CkptIoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CkptIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptIoError> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn sample_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 13,
            n_max: 8,
            variant: VariantKind::SkipV1Gqa { groups: 2 },
            skip_ratio: 0.5,
            injection: HeadInjection::SecondHalf,
            positional: Positional::Learned,
            elem_bytes: 4,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = init_weights(&sample_config(), 77).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for (name, t) in &ck.tensors {
            let u = &back.tensors[name];
            assert_eq!(t.shape(), u.shape());
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        // Writing the reloaded checkpoint reproduces the bytes exactly.
        let mut buf2 = Vec::new();
        write_checkpoint(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn config_kv_round_trip() {
        for variant in [
            VariantKind::Mha,
            VariantKind::ResFormer { lambda: 0.25 },
            VariantKind::Mla { d_c: 4, d_r: 2 },
            VariantKind::ClaV { period: 3 },
        ] {
            let mut cfg = sample_config();
            cfg.variant = variant;
            let text = config_to_kv(&cfg);
            let kv = parse_kv(&text).unwrap();
            let back = config_from_kv(&kv).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_checkpoint(&mut &b"NOPE"[..]).unwrap_err();
        assert!(matches!(err, CkptIoError::BadMagic));
    }

    #[test]
    fn kv_parser_handles_comments_and_errors() {
        let map = parse_kv("# comment\n  a = 1 \n\nb=two\n").unwrap();
        assert_eq!(map["a"], "1");
        assert_eq!(map["b"], "two");
        assert!(parse_kv("not-a-pair\n").is_err());
    }
}
