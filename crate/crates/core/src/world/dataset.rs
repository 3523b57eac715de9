//! Transition shards on disk.
//!
//! A shard directory holds three files:
//!
//! - `manifest.json`: counts, frame shape, seed, setting and a per-episode
//!   index (`frame_offset`, `steps`, `success`).
//! - `observations.f32`: every rendered frame, little-endian 32-bit floats,
//!   `[3, N, N]` row-major, episodes back to back. An episode of `T` steps
//!   stores `T + 1` frames.
//! - `actions.csv`: `episode,step,action_x,action_y`.
//!
//! Observations are rebuilt from frames with the same framestack rule as
//! the live environment.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{expert_action, rollout, EpisodeTrace, Observation, ViewSetting, WorldConfig, WorldError};
use crate::autodiff::Tensor;

pub const SHARD_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const OBSERVATIONS_FILE: &str = "observations.f32";
pub const ACTIONS_FILE: &str = "actions.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEntry {
    pub frame_offset: usize,
    pub steps: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardManifest {
    pub format_version: u32,
    pub seed: u64,
    pub setting: String,
    pub episodes: usize,
    pub transitions: usize,
    pub frames: usize,
    pub frame_shape: [usize; 3],
    pub framestack: usize,
    pub observations: String,
    pub actions: String,
    pub episode_index: Vec<EpisodeEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeData {
    /// `steps + 1` frames, flattened.
    pub frames: Vec<f32>,
    pub actions: Vec<[f64; 2]>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub setting: String,
    pub frame_shape: [usize; 3],
    pub framestack: usize,
    pub episodes: Vec<EpisodeData>,
}

#[derive(Serialize, Deserialize)]
struct ActionRow {
    episode: usize,
    step: usize,
    action_x: f64,
    action_y: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorldError + '_ {
    move |source| WorldError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> WorldError {
    WorldError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

impl Dataset {
    /// Scripted-expert episodes under the training camera.
    pub fn generate(cfg: &WorldConfig, episodes: usize, seed: u64) -> Self {
        let traces = rollout(|_, s| expert_action(s), ViewSetting::Train, episodes, seed, cfg);
        Self::from_traces(&traces, cfg, seed, ViewSetting::Train)
    }

    pub fn from_traces(traces: &[EpisodeTrace], cfg: &WorldConfig, seed: u64, setting: ViewSetting) -> Self {
        let n = cfg.image_size;
        Self {
            seed,
            setting: setting.to_string(),
            frame_shape: [3, n, n],
            framestack: cfg.framestack,
            episodes: traces
                .iter()
                .map(|t| EpisodeData {
                    frames: t.frames.iter().flat_map(|f| f.data().iter().map(|&v| v as f32)).collect(),
                    actions: t.actions.clone(),
                    success: t.success,
                })
                .collect(),
        }
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape.iter().product()
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.actions.len()).sum()
    }

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.actions.len() + 1).sum()
    }

    /// `(episode, step)` of every transition, in storage order.
    pub fn index(&self) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.actions.len()).map(move |t| (e, t)))
            .collect()
    }

    pub fn frame(&self, episode: usize, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.episodes[episode].frames[i * n..(i + 1) * n]
    }

    /// Stacked observation at step `t` of `episode`, as `[3k, N, N]`.
    pub fn observation(&self, episode: usize, t: usize) -> Observation {
        let k = self.framestack;
        let [c, h, w] = self.frame_shape;
        let mut data = Vec::with_capacity(k * self.frame_len());
        for i in 0..k {
            let f = (t + i + 1).saturating_sub(k);
            data.extend(self.frame(episode, f).iter().map(|&v| v as f64));
        }
        Observation {
            frames: Tensor::new([c * k, h, w], data).expect("observation shape"),
        }
    }

    pub fn manifest(&self) -> ShardManifest {
        let mut offset = 0;
        let episode_index = self
            .episodes
            .iter()
            .map(|e| {
                let entry = EpisodeEntry {
                    frame_offset: offset,
                    steps: e.actions.len(),
                    success: e.success,
                };
                offset += e.actions.len() + 1;
                entry
            })
            .collect();
        ShardManifest {
            format_version: SHARD_FORMAT_VERSION,
            seed: self.seed,
            setting: self.setting.clone(),
            episodes: self.episodes.len(),
            transitions: self.transitions(),
            frames: self.frame_count(),
            frame_shape: self.frame_shape,
            framestack: self.framestack,
            observations: OBSERVATIONS_FILE.into(),
            actions: ACTIONS_FILE.into(),
            episode_index,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<ShardManifest, WorldError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = self.manifest();

        let obs_path = dir.join(OBSERVATIONS_FILE);
        let file = fs::File::create(&obs_path).map_err(io_err(&obs_path))?;
        let mut w = BufWriter::new(file);
        for e in &self.episodes {
            for v in &e.frames {
                w.write_all(&v.to_le_bytes()).map_err(io_err(&obs_path))?;
            }
        }
        w.flush().map_err(io_err(&obs_path))?;

        let act_path = dir.join(ACTIONS_FILE);
        let mut csv_w = csv::Writer::from_path(&act_path)
            .map_err(|e| format_err(&act_path, e.to_string()))?;
        if self.episodes.iter().all(|e| e.actions.is_empty()) {
            csv_w
                .write_record(["episode", "step", "action_x", "action_y"])
                .map_err(|e| format_err(&act_path, e.to_string()))?;
        }
        for (i, e) in self.episodes.iter().enumerate() {
            for (t, a) in e.actions.iter().enumerate() {
                csv_w
                    .serialize(ActionRow {
                        episode: i,
                        step: t,
                        action_x: a[0],
                        action_y: a[1],
                    })
                    .map_err(|e| format_err(&act_path, e.to_string()))?;
            }
        }
        csv_w.flush().map_err(io_err(&act_path))?;

        let man_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&man_path, json + "\n").map_err(io_err(&man_path))?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<Self, WorldError> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&man_path).map_err(io_err(&man_path))?;
        let m: ShardManifest = serde_json::from_str(&text).map_err(|e| format_err(&man_path, e.to_string()))?;
        if m.format_version != SHARD_FORMAT_VERSION {
            return Err(format_err(&man_path, format!("unsupported format_version {}", m.format_version)));
        }
        if m.episode_index.len() != m.episodes {
            return Err(format_err(&man_path, "episode_index length differs from episodes"));
        }
        let frame_len: usize = m.frame_shape.iter().product();

        let obs_path = dir.join(&m.observations);
        let bytes = fs::read(&obs_path).map_err(io_err(&obs_path))?;
        if bytes.len() != m.frames * frame_len * 4 {
            return Err(format_err(
                &obs_path,
                format!("expected {} bytes for {} frames, found {}", m.frames * frame_len * 4, m.frames, bytes.len()),
            ));
        }
        let all: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();

        let act_path = dir.join(&m.actions);
        let mut actions: Vec<Vec<[f64; 2]>> = vec![vec![]; m.episodes];
        let mut reader = csv::Reader::from_path(&act_path).map_err(|e| format_err(&act_path, e.to_string()))?;
        for row in reader.deserialize::<ActionRow>() {
            let row = row.map_err(|e| format_err(&act_path, e.to_string()))?;
            let ep = actions
                .get_mut(row.episode)
                .ok_or_else(|| format_err(&act_path, format!("episode {} out of range", row.episode)))?;
            if row.step != ep.len() {
                return Err(format_err(&act_path, format!("episode {} steps out of order", row.episode)));
            }
            ep.push([row.action_x, row.action_y]);
        }

        let mut episodes = Vec::with_capacity(m.episodes);
        let mut expected_offset = 0;
        for (entry, acts) in m.episode_index.iter().zip(actions) {
            if entry.steps != acts.len() || entry.frame_offset != expected_offset {
                return Err(format_err(&man_path, "episode index disagrees with actions"));
            }
            let start = entry.frame_offset * frame_len;
            let end = (entry.frame_offset + entry.steps + 1) * frame_len;
            episodes.push(EpisodeData {
                frames: all[start..end].to_vec(),
                actions: acts,
                success: entry.success,
            });
            expected_offset += entry.steps + 1;
        }
        let ds = Self {
            seed: m.seed,
            setting: m.setting.clone(),
            frame_shape: m.frame_shape,
            framestack: m.framestack,
            episodes,
        };
        if ds.transitions() != m.transitions || ds.frame_count() != m.frames {
            return Err(format_err(&man_path, "transition or frame count mismatch"));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shard_round_trip_is_exact() {
        let cfg = WorldConfig::with_image_size(12);
        let ds = Dataset::generate(&cfg, 5, 3);
        let dir = tempfile::tempdir().unwrap();
        let m = ds.write(dir.path()).unwrap();
        assert_eq!(m.transitions, ds.transitions());
        let size = fs::metadata(dir.path().join(OBSERVATIONS_FILE)).unwrap().len();
        assert_eq!(size as usize, m.frames * 3 * 12 * 12 * 4);
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn observations_match_live_rollout() {
        let cfg = WorldConfig::with_image_size(10);
        let traces = rollout(|_, s| expert_action(s), ViewSetting::Train, 2, 4, &cfg);
        let ds = Dataset::from_traces(&traces, &cfg, 4, ViewSetting::Train);
        for (e, tr) in traces.iter().enumerate() {
            for t in 0..=tr.steps() {
                assert_eq!(ds.observation(e, t), tr.observation(t));
            }
        }
    }

    #[test]
    fn empty_shard_is_valid() {
        let cfg = WorldConfig::with_image_size(8);
        let ds = Dataset::generate(&cfg, 0, 0);
        let dir = tempfile::tempdir().unwrap();
        let m = ds.write(dir.path()).unwrap();
        assert_eq!((m.episodes, m.transitions, m.frames), (0, 0, 0));
        assert_eq!(Dataset::read(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let cfg = WorldConfig::with_image_size(8);
        let dir = tempfile::tempdir().unwrap();
        Dataset::generate(&cfg, 2, 1).write(dir.path()).unwrap();
        let p = dir.path().join(OBSERVATIONS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, bytes).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err().to_string();
        assert!(err.contains("bytes"), "{err}");
    }
}
