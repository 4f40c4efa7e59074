//! File formats: text and binary point clouds, checkpoints, and dataset
//! manifests.
//!
//! Binary layouts are little-endian and bit-exact on round trip. Values are
//! stored as f32 on disk and widened to f64 on load.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::model::ModelParams;
use crate::points::PointCloud;
use crate::tensor::Tensor;
use crate::training::OptimizerState;

/// Magic for binary point-cloud files.
pub const CLOUD_MAGIC: &[u8; 4] = b"LCPC";
/// Magic for checkpoint files.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCPW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum IoError {
    Io(io::Error),
    Format { path: String, message: String },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "{e}"),
            IoError::Format { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<io::Error> for IoError {
    fn from(e: io::Error) -> Self {
        IoError::Io(e)
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

// ── text format ─────────────────────────────────────────────────────────

/// Writes the text format: a header comment, then one whitespace-separated
/// point per line (`x y z`, features, optional label), nine significant
/// digits.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let width = cloud.feature_width();
    let has_labels = cloud.labels.is_some();
    let mut out = String::new();
    out.push_str(&format!(
        "# xyz points={} features={} labels={}\n",
        cloud.len(),
        width,
        has_labels as u8
    ));
    for i in 0..cloud.len() {
        let p = cloud.coords[i];
        out.push_str(&format!("{:.9e} {:.9e} {:.9e}", p[0], p[1], p[2]));
        if let Some(f) = &cloud.features {
            for c in 0..width {
                out.push_str(&format!(" {:.9e}", f.data()[i * width + c]));
            }
        }
        if let Some(labels) = &cloud.labels {
            out.push_str(&format!(" {}", labels[i]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_xyz(path: &Path) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path)?;
    let mut declared: Option<(usize, usize, bool)> = None;
    let mut coords = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if declared.is_none() && rest.trim_start().starts_with("xyz ") {
                let mut points = 0usize;
                let mut width = 0usize;
                let mut has_labels = false;
                for token in rest.split_whitespace().skip(1) {
                    if let Some((k, v)) = token.split_once('=') {
                        match k {
                            "points" => points = v.parse().map_err(|_| format_err(path, "bad header"))?,
                            "features" => width = v.parse().map_err(|_| format_err(path, "bad header"))?,
                            "labels" => has_labels = v == "1",
                            _ => {}
                        }
                    }
                }
                declared = Some((points, width, has_labels));
            }
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let (width, has_labels) = match declared {
            Some((_, w, l)) => (w, l),
            // headerless files carry bare coordinates
            None => (0, false),
        };
        let expected = 3 + width + has_labels as usize;
        if tokens.len() != expected {
            return Err(format_err(
                path,
                format!("line {}: expected {expected} fields, found {}", ln + 1, tokens.len()),
            ));
        }
        let parse = |s: &str| -> Result<f64, IoError> {
            s.parse()
                .map_err(|_| format_err(path, format!("line {}: bad number '{s}'", ln + 1)))
        };
        coords.push([parse(tokens[0])?, parse(tokens[1])?, parse(tokens[2])?]);
        for t in &tokens[3..3 + width] {
            features.push(parse(t)?);
        }
        if has_labels {
            labels.push(
                tokens[expected - 1]
                    .parse()
                    .map_err(|_| format_err(path, format!("line {}: bad label", ln + 1)))?,
            );
        }
    }
    if coords.is_empty() {
        return Err(format_err(path, "no points"));
    }
    if let Some((points, _, _)) = declared {
        if points != coords.len() {
            return Err(format_err(
                path,
                format!("header declares {points} points, file has {}", coords.len()),
            ));
        }
    }
    let mut cloud = PointCloud::new(coords);
    if let Some((_, width, _)) = declared {
        if width > 0 {
            let n = cloud.len();
            cloud = cloud.with_features(Tensor::new(vec![n, width], features).unwrap());
        }
    }
    if !labels.is_empty() {
        cloud = cloud.with_labels(labels);
    }
    Ok(cloud)
}

// ── binary format ───────────────────────────────────────────────────────

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f64> {
        self.take(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Binary cloud layout: magic `LCPC`, u32 version, u32 N, u32 feature
/// width, u32 label flag, f32 coords, f32 features, u32 labels.
pub fn write_bin(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let width = cloud.feature_width();
    let mut buf = Vec::new();
    buf.extend_from_slice(CLOUD_MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, cloud.len() as u32);
    push_u32(&mut buf, width as u32);
    push_u32(&mut buf, cloud.labels.is_some() as u32);
    for p in &cloud.coords {
        push_f32(&mut buf, p[0]);
        push_f32(&mut buf, p[1]);
        push_f32(&mut buf, p[2]);
    }
    if let Some(f) = &cloud.features {
        for &v in f.data() {
            push_f32(&mut buf, v);
        }
    }
    if let Some(labels) = &cloud.labels {
        for &l in labels {
            push_u32(&mut buf, l);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_bin(path: &Path) -> Result<PointCloud, IoError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let bad = |msg: &str| format_err(path, msg);
    if r.take(4) != Some(CLOUD_MAGIC.as_slice()) {
        return Err(bad("not a cloud file (bad magic)"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated"))?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = r.u32().ok_or_else(|| bad("truncated"))? as usize;
    let width = r.u32().ok_or_else(|| bad("truncated"))? as usize;
    let label_flag = r.u32().ok_or_else(|| bad("truncated"))?;
    if n == 0 {
        return Err(bad("empty cloud"));
    }
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let x = r.f32().ok_or_else(|| bad("truncated coords"))?;
        let y = r.f32().ok_or_else(|| bad("truncated coords"))?;
        let z = r.f32().ok_or_else(|| bad("truncated coords"))?;
        coords.push([x, y, z]);
    }
    let mut cloud = PointCloud::new(coords);
    if width > 0 {
        let mut data = Vec::with_capacity(n * width);
        for _ in 0..n * width {
            data.push(r.f32().ok_or_else(|| bad("truncated features"))?);
        }
        cloud = cloud.with_features(Tensor::new(vec![n, width], data).unwrap());
    }
    if label_flag == 1 {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32().ok_or_else(|| bad("truncated labels"))?);
        }
        cloud = cloud.with_labels(labels);
    }
    if !r.done() {
        return Err(bad("trailing bytes"));
    }
    Ok(cloud)
}

// ── named tensor tables and checkpoints ─────────────────────────────────

fn write_named_tensors(buf: &mut Vec<u8>, entries: &[(String, Tensor)]) {
    push_u32(buf, entries.len() as u32);
    for (name, t) in entries {
        push_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(buf, t.shape().len() as u32);
        for &e in t.shape() {
            push_u32(buf, e as u32);
        }
        for &v in t.data() {
            push_f32(buf, v);
        }
    }
}

fn read_named_tensors(path: &Path, r: &mut Reader) -> Result<Vec<(String, Tensor)>, IoError> {
    let bad = |msg: &str| format_err(path, msg);
    let count = r.u32().ok_or_else(|| bad("truncated"))? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated name"))?)
            .map_err(|_| bad("name is not utf-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32().ok_or_else(|| bad("truncated payload"))?);
        }
        out.push((name, Tensor::new(shape, data).unwrap()));
    }
    Ok(out)
}

/// Checkpoint layout: magic `LCPW`, u32 version, then a named-tensor table
/// holding the model weights and, when given, optimizer slots under the
/// `opt.` prefix.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    optimizer: Option<&OptimizerState>,
) -> Result<(), IoError> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    params.for_each(&mut |name, t| entries.push((name, t.clone())));
    if let Some(opt) = optimizer {
        entries.push(("opt.step".to_string(), Tensor::scalar(opt.step as f64)));
        for (i, t) in opt.first.iter().enumerate() {
            entries.push((format!("opt.first.{i}"), t.clone()));
        }
        for (i, t) in opt.second.iter().enumerate() {
            entries.push((format!("opt.second.{i}"), t.clone()));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    write_named_tensors(&mut buf, &entries);
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint into live parameters, rejecting name or shape
/// mismatches against the live configuration.
pub fn load_checkpoint(
    path: &Path,
    params: &mut ModelParams,
    optimizer: Option<&mut OptimizerState>,
) -> Result<(), IoError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let bad = |msg: String| format_err(path, msg);
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32().ok_or_else(|| bad("truncated".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let entries = read_named_tensors(path, &mut r)?;
    if !r.done() {
        return Err(bad("trailing bytes".into()));
    }

    let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let mut missing: Vec<String> = Vec::new();
    let mut mismatch: Vec<String> = Vec::new();
    params.for_each_mut(&mut |name, t| match find(&name) {
        Some(stored) if stored.shape() == t.shape() => {
            t.data_mut().copy_from_slice(stored.data());
        }
        Some(stored) => mismatch.push(format!(
            "{name}: stored {:?}, live {:?}",
            stored.shape(),
            t.shape()
        )),
        None => missing.push(name),
    });
    if !mismatch.is_empty() {
        return Err(bad(format!("shape mismatch: {}", mismatch.join("; "))));
    }
    if !missing.is_empty() {
        return Err(bad(format!("missing tensors: {}", missing.join(", "))));
    }
    // unknown non-optimizer names mean the file belongs to another config
    let mut live_names = Vec::new();
    params.for_each(&mut |name, _| live_names.push(name));
    for (name, _) in &entries {
        if !name.starts_with("opt.") && !live_names.contains(name) {
            return Err(bad(format!("unexpected tensor '{name}'")));
        }
    }

    if let Some(opt) = optimizer {
        let step = find("opt.step").ok_or_else(|| bad("missing optimizer state".into()))?;
        opt.step = step.item() as u64;
        for (i, slot) in opt.first.iter_mut().enumerate() {
            let stored = find(&format!("opt.first.{i}"))
                .ok_or_else(|| bad(format!("missing opt.first.{i}")))?;
            if stored.shape() != slot.shape() {
                return Err(bad(format!("opt.first.{i} shape mismatch")));
            }
            slot.data_mut().copy_from_slice(stored.data());
        }
        for (i, slot) in opt.second.iter_mut().enumerate() {
            let stored = find(&format!("opt.second.{i}"))
                .ok_or_else(|| bad(format!("missing opt.second.{i}")))?;
            if stored.shape() != slot.shape() {
                return Err(bad(format!("opt.second.{i} shape mismatch")));
            }
            slot.data_mut().copy_from_slice(stored.data());
        }
    }
    Ok(())
}

// ── dataset manifests ───────────────────────────────────────────────────

/// Writes `manifest.txt`: one `path label` line per cloud (label blank for
/// per-point labeled scenes).
pub fn write_manifest(dir: &Path, entries: &[(String, Option<u32>)]) -> Result<(), IoError> {
    let mut out = String::from("# file label\n");
    for (file, label) in entries {
        match label {
            Some(l) => out.push_str(&format!("{file} {l}\n")),
            None => out.push_str(&format!("{file}\n")),
        }
    }
    fs::write(dir.join("manifest.txt"), out)?;
    Ok(())
}

/// Reads a manifest back as (file, optional label) pairs.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, Option<u32>)>, IoError> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let file = parts
            .next()
            .ok_or_else(|| format_err(&path, "empty manifest row"))?
            .to_string();
        let label = match parts.next() {
            Some(tok) => Some(
                tok.parse()
                    .map_err(|_| format_err(&path, format!("bad label '{tok}'")))?,
            ),
            None => None,
        };
        out.push((file, label));
    }
    Ok(out)
}

/// Reads and writes a generic file as bytes, for bit-exactness checks.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    Ok(fs::read(path)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Reads all of stdin (used by commands accepting piped clouds).
pub fn read_stdin() -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::new();
    io::stdin().read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{param_init, preset};
    use crate::training::OptimizerKind;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sample_cloud(with_features: bool, with_labels: bool) -> PointCloud {
        let mut rng = StdRng::seed_from_u64(90);
        let n = 17;
        let mut cloud = PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        );
        if with_features {
            cloud = cloud.with_features(
                Tensor::new(vec![n, 2], (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            );
        }
        if with_labels {
            cloud = cloud.with_labels((0..n as u32).map(|i| i % 3).collect());
        }
        cloud
    }

    /// f32-narrowed copy, the value a cloud takes after one disk trip.
    fn narrowed(cloud: &PointCloud) -> PointCloud {
        let mut c = cloud.clone();
        for p in c.coords.iter_mut() {
            for v in p.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        if let Some(f) = &mut c.features {
            for v in f.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        c
    }

    #[test]
    fn xyz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (wf, wl) in [(false, false), (true, false), (true, true), (false, true)] {
            let cloud = sample_cloud(wf, wl);
            let path = dir.path().join("cloud.xyz");
            write_xyz(&path, &cloud).unwrap();
            let back = read_xyz(&path).unwrap();
            assert_eq!(back.len(), cloud.len());
            for (a, b) in back.coords.iter().zip(cloud.coords.iter()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
                }
            }
            assert_eq!(back.labels, cloud.labels);
            assert_eq!(back.features.is_some(), cloud.features.is_some());
        }
    }

    #[test]
    fn bin_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = sample_cloud(true, true);
        let path = dir.path().join("cloud.lcpc");
        write_bin(&path, &cloud).unwrap();
        let bytes1 = read_bytes(&path).unwrap();
        let back = read_bin(&path).unwrap();
        assert_eq!(back, narrowed(&cloud));
        // write-after-read reproduces the file byte for byte
        let path2 = dir.path().join("cloud2.lcpc");
        write_bin(&path2, &back).unwrap();
        assert_eq!(bytes1, read_bytes(&path2).unwrap());
    }

    #[test]
    fn bin_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lcpc");
        write_bytes(&path, b"NOPE").unwrap();
        assert!(read_bin(&path).is_err());
        let cloud = sample_cloud(false, false);
        write_bin(&path, &cloud).unwrap();
        let mut bytes = read_bytes(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        write_bytes(&path, &bytes).unwrap();
        assert!(read_bin(&path).is_err());
    }

    #[test]
    fn checkpoint_round_trip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = preset("miniature-cls", 3).unwrap();
        let params = param_init(&cfg, 1);
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, &params);
        opt.step = 42;
        for t in opt.first.iter_mut() {
            for v in t.data_mut() {
                *v = 0.5;
            }
        }
        let path = dir.path().join("ck.lcpw");
        save_checkpoint(&path, &params, Some(&opt)).unwrap();

        let mut restored = param_init(&cfg, 99);
        let mut opt2 = OptimizerState::new(OptimizerKind::AdamW, &restored);
        load_checkpoint(&path, &mut restored, Some(&mut opt2)).unwrap();
        assert_eq!(opt2.step, 42);
        assert!(opt2.first.iter().all(|t| t.data().iter().all(|&v| v == 0.5)));
        let a = crate::model::named_tensors(&params);
        let b = crate::model::named_tensors(&restored);
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!(*u as f32, *v as f32);
            }
        }

        // bit-exact file round trip
        let path2 = dir.path().join("ck2.lcpw");
        save_checkpoint(&path2, &restored, Some(&opt2)).unwrap();
        assert_eq!(read_bytes(&path).unwrap(), read_bytes(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = preset("miniature-cls", 3).unwrap();
        let params = param_init(&cfg, 1);
        let path = dir.path().join("ck.lcpw");
        save_checkpoint(&path, &params, None).unwrap();

        let other = preset("miniature-cls", 5).unwrap();
        let mut wrong = param_init(&other, 1);
        let err = load_checkpoint(&path, &mut wrong, None).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ("cloud_000.lcpc".to_string(), Some(0)),
            ("cloud_001.lcpc".to_string(), Some(3)),
            ("scene_000.lcpc".to_string(), None),
        ];
        write_manifest(dir.path(), &entries).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
    }
}
