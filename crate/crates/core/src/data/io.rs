//! Dataset directory: `manifest.json` plus one binary blob per sample.
//!
//! Blob layout, all little-endian: six `u32` dims `(T, 3, H, W, 68, 2)`,
//! then `T·3·H·W` `f32` pixels, then `T·68·2` `f32` landmark coordinates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{VideoSample, CHANNELS, NUM_LANDMARKS};
use crate::error::{io_err, MglError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_NAME: &str = "mgl-video-dataset";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_DIMS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub label: u8,
    pub num_frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_landmarks: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub endianness: String,
    pub samples: Vec<ManifestEntry>,
}

pub fn save_dataset(samples: &[VideoSample], dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let file = format!("sample_{i:05}.bin");
        let dims = [s.num_frames, CHANNELS, s.height, s.width, NUM_LANDMARKS, 2];
        let mut buf = Vec::with_capacity(4 * (HEADER_DIMS + s.frames.len() + s.landmarks.len()));
        for d in dims {
            let d = u32::try_from(d).map_err(|_| MglError::Sample {
                sample_id: s.sample_id.clone(),
                reason: format!("dimension {d} does not fit in u32"),
            })?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in s.frames.iter().chain(&s.landmarks) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, buf).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            label: s.label,
            num_frames: s.num_frames,
            channels: CHANNELS,
            height: s.height,
            width: s.width,
            num_landmarks: NUM_LANDMARKS,
            file,
        });
    }
    let manifest = DatasetManifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        dtype: "float32".into(),
        endianness: "little".into(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |reason: String| MglError::Dataset { path: path.clone(), reason };
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| bad(format!("corrupt manifest: {e}")))?;
    if m.format != FORMAT_NAME || m.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format {} v{}", m.format, m.version)));
    }
    if m.dtype != "float32" || m.endianness != "little" {
        return Err(bad(format!("unsupported payload {} / {}", m.dtype, m.endianness)));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<VideoSample>> {
    let manifest = load_manifest(dir)?;
    manifest.samples.iter().map(|e| load_entry(dir, e)).collect()
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<VideoSample> {
    let fail = |reason: String| MglError::Sample { sample_id: e.sample_id.clone(), reason };
    if e.num_frames == 0 {
        return Err(fail("manifest declares zero frames".into()));
    }
    if e.channels != CHANNELS || e.num_landmarks != NUM_LANDMARKS {
        return Err(fail(format!("expected {CHANNELS} channels and {NUM_LANDMARKS} landmarks")));
    }
    if e.file.contains('/') || e.file.contains('\\') || e.file.starts_with('.') {
        return Err(fail(format!("payload file name {:?} is not a plain file name", e.file)));
    }
    let path = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let n_frames = e.num_frames * CHANNELS * e.height * e.width;
    let n_lmk = e.num_frames * NUM_LANDMARKS * 2;
    let expected = 4 * (HEADER_DIMS + n_frames + n_lmk);
    if bytes.len() != expected {
        return Err(fail(format!("payload is {} bytes, manifest shape needs {expected}", bytes.len())));
    }
    let mut words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let dims: Vec<usize> = words.by_ref().take(HEADER_DIMS).map(|b| u32::from_le_bytes(b) as usize).collect();
    let want = [e.num_frames, CHANNELS, e.height, e.width, NUM_LANDMARKS, 2];
    if dims != want {
        return Err(fail(format!("payload header {dims:?} disagrees with manifest {want:?}")));
    }
    let values: Vec<f32> = words.map(f32::from_le_bytes).collect();
    let (frames, landmarks) = values.split_at(n_frames);
    let sample = VideoSample {
        sample_id: e.sample_id.clone(),
        label: e.label,
        num_frames: e.num_frames,
        height: e.height,
        width: e.width,
        frames: frames.to_vec(),
        landmarks: landmarks.to_vec(),
    };
    sample.validate()?;
    Ok(sample)
}
