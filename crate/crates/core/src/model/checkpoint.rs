//! Parameter checkpoint file.
//!
//! ```text
//! pwff-checkpoint 1
//! tensors <count>
//! <name> <group> <d0>x<d1>...
//! ...
//! data <bytes>
//! <bytes of little-endian f32, tensors concatenated in manifest order>
//! ```
//!
//! `<bytes>` must equal 4 × the parameter count predicted by the manifest and
//! the file must end exactly after the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::{ParamGroup, ParamSet};
use crate::error::{PwffError, Result};

const MAGIC: &str = "pwff-checkpoint 1";

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    let _ = writeln!(out, "{}", MAGIC);
    let _ = writeln!(out, "tensors {}", params.len());
    for e in params.entries() {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "{} {} {}", e.name, e.group, dims.join("x"));
    }
    let _ = writeln!(out, "data {}", 4 * params.total_count());
    for e in params.entries() {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(msg: impl Into<String>) -> PwffError {
    PwffError::Format(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| format_err("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| format_err("header is not utf-8"))
    };

    if next_line()? != MAGIC {
        return Err(format_err("bad magic line"));
    }
    let count: usize = next_line()?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("expected `tensors <count>`"))?;

    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let mut parts = line.split(' ');
        let (name, group, dims) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(g), Some(d), None) => (n, g, d),
            _ => return Err(format_err(format!("bad tensor line `{}`", line))),
        };
        let group = ParamGroup::parse(group).ok_or_else(|| format_err(format!("unknown group `{}`", group)))?;
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format_err(format!("bad shape `{}`", dims)))?;
        manifest.push((name.to_string(), group, shape));
    }
    let declared: usize = next_line()?
        .strip_prefix("data ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("expected `data <bytes>`"))?;

    let predicted: usize = manifest.iter().map(|(_, _, s)| 4 * s.iter().product::<usize>()).sum();
    let payload = &bytes[pos..];
    if declared != predicted || payload.len() != predicted {
        return Err(format_err(format!(
            "payload is {} bytes, header declares {}, manifest predicts {}",
            payload.len(),
            declared,
            predicted
        )));
    }

    let mut set = ParamSet::new();
    let mut off = 0;
    for (name, group, shape) in manifest {
        let n: usize = shape.iter().product();
        let data =
            payload[off..off + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        off += 4 * n;
        set.push(name, group, shape, data)?;
    }
    Ok(set)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        PwffError::Format(m) => PwffError::Format(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("emb", ParamGroup::Base, vec![3, 2], vec![0.1, -0.2, 1e-30, f32::MAX, -0.0, 7.5]).unwrap();
        p.push("up", ParamGroup::Adapter, vec![2], vec![0.0, 1.0]).unwrap();
        p
    }

    #[test]
    fn payload_size_matches_manifest() {
        let p = sample();
        let bytes = encode(&p);
        let header_end = bytes.len() - 4 * p.total_count();
        assert!(std::str::from_utf8(&bytes[..header_end]).unwrap().ends_with("data 32\n"));
        let q = decode(&bytes).unwrap();
        assert_eq!(q.hash(&ParamGroup::ALL), p.hash(&ParamGroup::ALL));
    }

    #[test]
    fn truncated_or_padded_payload_is_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(decode(&padded).is_err());
    }
}
