//! On-disk GroupToy datasets.
//!
//! A dataset directory holds `manifest.tsv` plus one subdirectory per sample
//! with `frames.flmt`, `flow.flmt` and `tracks.flmt`. Each manifest line is
//! `id<TAB>label<TAB>frames<TAB>flow<TAB>tracks` with paths relative to the
//! dataset directory; a flow path of `-` marks a split without flow.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{generate_sample, ActivityClass, ActorTrack, GenConfig, VideoSample};
use crate::error::{Error, Result};
use crate::numerics::io;

pub const MANIFEST: &str = "manifest.tsv";

/// A sample and the id it is stored under.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub id: String,
    pub sample: VideoSample,
}

/// Writes samples and then the manifest. With `with_flow` false the flow
/// tensors are not written at all.
pub fn write_dataset(samples: &[StoredSample], dir: &Path, with_flow: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        let sub = dir.join(&s.id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let v = &s.sample;
        io::write_f32(&sub.join("frames.flmt"), &[v.t_raw, v.height, v.width, 3], &v.frames)?;
        let flow_rel = match (&v.gt_flow, with_flow) {
            (Some(flow), true) => {
                io::write_f32(&sub.join("flow.flmt"), &[v.t_raw, v.height, v.width], flow)?;
                format!("{}/flow.flmt", s.id)
            }
            _ => "-".to_string(),
        };
        let (shape, data) = encode_tracks(v);
        io::write_f32(&sub.join("tracks.flmt"), &shape, &data)?;
        manifest.push_str(&format!(
            "{id}\t{label}\t{id}/frames.flmt\t{flow_rel}\t{id}/tracks.flmt\n",
            id = s.id,
            label = v.label.name()
        ));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads every sample listed in `dir/manifest.tsv`.
pub fn read_dataset(dir: &Path) -> Result<Vec<StoredSample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| read_record(dir, &path, n + 1, line))
        .collect()
}

fn read_record(dir: &Path, manifest: &Path, line_no: usize, line: &str) -> Result<StoredSample> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(Error::format(
            manifest,
            format!("line {line_no}: expected 5 tab-separated fields, got {}", fields.len()),
        ));
    }
    let label: ActivityClass = fields[1].parse()?;
    let frames_path = dir.join(fields[2]);
    let (fshape, frames) = io::read_f32(&frames_path)?;
    if fshape.len() != 4 || fshape[3] != 3 {
        return Err(Error::format(&frames_path, format!("frames must be T×H×W×3, got {fshape:?}")));
    }
    let (t_raw, height, width) = (fshape[0], fshape[1], fshape[2]);
    let gt_flow = if fields[3] == "-" {
        None
    } else {
        let p = dir.join(fields[3]);
        let (shape, data) = io::read_f32(&p)?;
        if shape != [t_raw, height, width] {
            return Err(Error::format(&p, format!("flow shape {shape:?} does not match frames")));
        }
        Some(data)
    };
    let tracks_path = dir.join(fields[4]);
    let (tshape, tdata) = io::read_f32(&tracks_path)?;
    let (tracks, camera_jitter) = decode_tracks(&tshape, &tdata, t_raw, &tracks_path)?;
    Ok(StoredSample {
        id: fields[0].to_string(),
        sample: VideoSample {
            t_raw,
            height,
            width,
            frames,
            label,
            gt_flow,
            tracks,
            camera_jitter,
        },
    })
}

/// Track table: row 0 is the camera (`[0,0,0,0,-1, dx0,dy0, dx1,dy1, ...]`),
/// then one row per actor `[radius, r, g, b, is_key, x0,y0, x1,y1, ...]`.
fn encode_tracks(v: &VideoSample) -> (Vec<usize>, Vec<f32>) {
    let cols = 5 + 2 * v.t_raw;
    let mut data = Vec::with_capacity((v.tracks.len() + 1) * cols);
    data.extend_from_slice(&[0.0, 0.0, 0.0, 0.0, -1.0]);
    data.extend(v.camera_jitter.iter().flatten());
    for a in &v.tracks {
        data.push(a.radius);
        data.extend_from_slice(&a.color);
        data.push(if a.is_key { 1.0 } else { 0.0 });
        data.extend(a.positions.iter().flatten());
    }
    (vec![v.tracks.len() + 1, cols], data)
}

type DecodedTracks = (Vec<ActorTrack>, Vec<[f32; 2]>);

fn decode_tracks(shape: &[usize], data: &[f32], t_raw: usize, path: &Path) -> Result<DecodedTracks> {
    let cols = 5 + 2 * t_raw;
    if shape.len() != 2 || shape[1] != cols || shape[0] < 1 {
        return Err(Error::format(path, format!("track table must be N×{cols}, got {shape:?}")));
    }
    let pairs = |row: &[f32]| -> Vec<[f32; 2]> { row[5..].chunks(2).map(|c| [c[0], c[1]]).collect() };
    let rows: Vec<&[f32]> = data.chunks(cols).collect();
    if rows[0][4] != -1.0 {
        return Err(Error::format(path, "first row is not the camera row"));
    }
    let jitter = pairs(rows[0]);
    let tracks = rows[1..]
        .iter()
        .map(|r| ActorTrack {
            radius: r[0],
            color: [r[1], r[2], r[3]],
            is_key: r[4] == 1.0,
            positions: pairs(r),
        })
        .collect();
    Ok((tracks, jitter))
}

/// What to generate for one dataset entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub id: String,
    pub class: ActivityClass,
    pub seed: u64,
}

/// Renders specs in parallel (one worker per available core). The result is
/// independent of the worker count because each sample depends only on its spec.
pub fn generate_dataset(specs: &[SampleSpec], cfg: &GenConfig) -> Result<Vec<StoredSample>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(specs.len().max(1));
    let chunk = specs.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<StoredSample>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| {
                            Ok(StoredSample {
                                id: s.id.clone(),
                                sample: generate_sample(s.class, cfg, s.seed)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(specs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `count` specs cycling through the classes in order, each with its own
/// seed drawn from `seed`.
pub fn balanced_specs(count: usize, seed: u64) -> Vec<SampleSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| SampleSpec {
            id: format!("clip{i:05}"),
            class: ActivityClass::ALL[i % ActivityClass::COUNT],
            seed: rng.gen(),
        })
        .collect()
}

/// Seeded shuffle, then 70/15/15 into train, val and test.
pub fn split_specs(specs: Vec<SampleSpec>, seed: u64) -> [Vec<SampleSpec>; 3] {
    let n = specs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_train = (n * 70 + 50) / 100;
    let n_val = ((n * 15 + 50) / 100).min(n - n_train);
    let mut slots: Vec<Option<SampleSpec>> = specs.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<SampleSpec> {
        range.map(|k| slots[order[k]].take().expect("each index used once")).collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    [train, val, test]
}

/// Relative path helper used by callers that want to point at a sample dir.
pub fn sample_dir(dataset: &Path, id: &str) -> PathBuf {
    dataset.join(id)
}
