//! Retrieval datasets: a synthetic sub-segment generator and a JSONL format
//! for externally computed features.
//!
//! The generator draws `E` event prototypes. Each audio clip mixes
//! `⌈ρ·T⌉` frames of its own `k` events with distractor frames drawn from the
//! remaining events, and each caption describes a non-empty subset of the
//! clip's own events. A caption therefore matches only a sub-segment of its
//! clip.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub id: String,
    /// `L × D_in` token features.
    pub tokens: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioItem {
    pub id: String,
    /// `T × D_in` frame features.
    pub frames: Tensor,
    pub captions: Vec<Caption>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalDataset {
    pub items: Vec<AudioItem>,
}

impl RetrievalDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.items.first().map(|it| it.frames.cols())
    }

    pub fn num_captions(&self) -> usize {
        self.items.iter().map(|it| it.captions.len()).sum()
    }

    /// Captions in dataset order, each paired with its audio index.
    pub fn captions(&self) -> impl Iterator<Item = (usize, &Caption)> {
        self.items
            .iter()
            .enumerate()
            .flat_map(|(a, it)| it.captions.iter().map(move |c| (a, c)))
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let caption_to_audio = self.captions().map(|(a, _)| a).collect();
        GroundTruth::new(caption_to_audio, self.items.len())
    }

    /// Checks id uniqueness, caption presence and a single feature width.
    pub fn validate(&self) -> Result<()> {
        let width = self.feature_dim().ok_or(Error::EmptyDataset)?;
        let mut ids = HashSet::new();
        let mut caption_ids = HashSet::new();
        for (line, it) in self.items.iter().enumerate() {
            let line = line + 1;
            if !ids.insert(it.id.as_str()) {
                return Err(Error::Schema {
                    line,
                    message: format!("duplicate audio id '{}'", it.id),
                });
            }
            if it.captions.is_empty() {
                return Err(Error::Schema {
                    line,
                    message: format!("audio '{}' has no captions", it.id),
                });
            }
            check_width(line, "frames", &it.frames, width)?;
            for c in &it.captions {
                if !caption_ids.insert(c.id.as_str()) {
                    return Err(Error::Schema {
                        line,
                        message: format!("duplicate caption id '{}'", c.id),
                    });
                }
                check_width(line, "tokens", &c.tokens, width)?;
            }
        }
        Ok(())
    }
}

fn check_width(line: usize, what: &str, t: &Tensor, width: usize) -> Result<()> {
    if t.rows() == 0 {
        return Err(Error::Schema {
            line,
            message: format!("{what} is empty"),
        });
    }
    if t.cols() != width {
        return Err(Error::Schema {
            line,
            message: format!("{what} width {} differs from dataset width {width}", t.cols()),
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    caption_id: String,
    tokens: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AudioRecord {
    audio_id: String,
    frames: Vec<Vec<f64>>,
    captions: Vec<CaptionRecord>,
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

fn from_rows(line: usize, what: &str, rows: &[Vec<f64>]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Schema {
            line,
            message: format!("{what} is empty"),
        });
    }
    Tensor::from_rows(rows).map_err(|e| Error::Schema {
        line,
        message: format!("{what}: {e}"),
    })
}

pub fn save_jsonl(dataset: &RetrievalDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for it in &dataset.items {
        if !it.frames.is_finite() || it.captions.iter().any(|c| !c.tokens.is_finite()) {
            return Err(Error::Input(format!("audio '{}' holds non-finite values", it.id)));
        }
        let rec = AudioRecord {
            audio_id: it.id.clone(),
            frames: to_rows(&it.frames),
            captions: it
                .captions
                .iter()
                .map(|c| CaptionRecord {
                    caption_id: c.id.clone(),
                    tokens: to_rows(&c.tokens),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Input(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<RetrievalDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AudioRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let frames = from_rows(line_no, "frames", &rec.frames)?;
        let w = *width.get_or_insert(frames.cols());
        check_width(line_no, "frames", &frames, w)?;
        let mut captions = Vec::with_capacity(rec.captions.len());
        for c in rec.captions {
            let tokens = from_rows(line_no, "tokens", &c.tokens)?;
            check_width(line_no, "tokens", &tokens, w)?;
            captions.push(Caption {
                id: c.caption_id,
                tokens,
            });
        }
        items.push(AudioItem {
            id: rec.audio_id,
            frames,
            captions,
        });
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ds = RetrievalDataset { items };
    ds.validate()?;
    Ok(ds)
}

/// Parameters of the synthetic sub-segment dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Number of event prototypes `E`.
    pub num_events: usize,
    /// Feature width `D_in` of frames and tokens.
    pub feature_dim: usize,
    /// Frames per clip `T`.
    pub frames_per_clip: usize,
    /// Fraction `ρ` of frames that belong to the clip's own events.
    pub relevant_fraction: f64,
    /// Events per clip `k`.
    pub events_per_sample: usize,
    /// Distinct distractor events per clip, sharing the distractor frames
    /// round-robin. 0 draws every distractor frame independently.
    pub distractor_events: usize,
    pub noise_sigma: f64,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub train_captions_per_audio: usize,
    /// Captions per clip in the validation and test splits.
    pub eval_captions_per_audio: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_events: 32,
            feature_dim: 32,
            frames_per_clip: 20,
            relevant_fraction: 0.3,
            events_per_sample: 2,
            distractor_events: 2,
            noise_sigma: 0.05,
            num_train: 2000,
            num_val: 200,
            num_test: 200,
            train_captions_per_audio: 1,
            eval_captions_per_audio: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn relevant_frames(&self) -> usize {
        ((self.relevant_fraction * self.frames_per_clip as f64).ceil() as usize).min(self.frames_per_clip)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_events == 0 || self.feature_dim == 0 || self.frames_per_clip == 0 {
            return fail("num_events, feature_dim and frames_per_clip must be >= 1".into());
        }
        if !(self.relevant_fraction > 0.0 && self.relevant_fraction <= 1.0) {
            return fail(format!(
                "relevant_fraction must be in (0, 1], got {}",
                self.relevant_fraction
            ));
        }
        if self.events_per_sample == 0 || self.events_per_sample > self.num_events {
            return fail(format!(
                "events_per_sample must be in 1..={}, got {}",
                self.num_events, self.events_per_sample
            ));
        }
        if self.relevant_frames() < self.frames_per_clip && self.events_per_sample == self.num_events {
            return fail("distractor frames need at least one event outside the clip".into());
        }
        if self.distractor_events > self.num_events - self.events_per_sample {
            return fail(format!(
                "distractor_events must be <= {} (events outside a clip), got {}",
                self.num_events - self.events_per_sample,
                self.distractor_events
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.train_captions_per_audio == 0 || self.eval_captions_per_audio == 0 {
            return fail("captions per audio must be >= 1".into());
        }
        Ok(())
    }
}

/// Generator-side labels for one clip; not part of the serialized dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipLabels {
    /// The clip's own events.
    pub events: Vec<usize>,
    /// Event index behind every frame, in frame order.
    pub frame_events: Vec<usize>,
    /// Events mentioned by each caption.
    pub caption_events: Vec<Vec<usize>>,
}

impl ClipLabels {
    pub fn is_relevant(&self, frame: usize) -> bool {
        self.events.contains(&self.frame_events[frame])
    }
}

#[derive(Clone, Debug)]
pub struct SynthSplit {
    pub dataset: RetrievalDataset,
    pub labels: Vec<ClipLabels>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    /// `E × D_in`
    pub prototypes: Tensor,
    pub train: SynthSplit,
    pub val: SynthSplit,
    pub test: SynthSplit,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    prototypes: Tensor,
}

impl Generator<'_> {
    fn noisy(&mut self, event: usize) -> Vec<f64> {
        let sigma = self.cfg.noise_sigma;
        let proto = self.prototypes.row_slice(event).to_vec();
        proto
            .into_iter()
            .map(|p| {
                let n: f64 = StandardNormal.sample(&mut self.rng);
                p + sigma * n
            })
            .collect()
    }

    fn clip(&mut self, id: String, captions: usize) -> (AudioItem, ClipLabels) {
        let cfg = self.cfg;
        let events: Vec<usize> = index::sample(&mut self.rng, cfg.num_events, cfg.events_per_sample).into_vec();
        let mut outside: Vec<usize> = (0..cfg.num_events).filter(|e| !events.contains(e)).collect();
        if cfg.distractor_events > 0 {
            outside = index::sample(&mut self.rng, outside.len(), cfg.distractor_events)
                .into_iter()
                .map(|i| outside[i])
                .collect();
        }
        let relevant = cfg.relevant_frames();
        let mut frame_events: Vec<usize> = (0..cfg.frames_per_clip)
            .map(|f| {
                if f < relevant {
                    events[f % events.len()]
                } else if cfg.distractor_events > 0 {
                    outside[(f - relevant) % outside.len()]
                } else {
                    outside[self.rng.random_range(0..outside.len())]
                }
            })
            .collect();
        frame_events.shuffle(&mut self.rng);
        let rows: Vec<Vec<f64>> = frame_events.clone().into_iter().map(|e| self.noisy(e)).collect();
        let frames = Tensor::from_rows(&rows).expect("uniform width");

        let mut caps = Vec::with_capacity(captions);
        let mut caption_events = Vec::with_capacity(captions);
        for c in 0..captions {
            let size = self.rng.random_range(1..=events.len());
            let chosen: Vec<usize> = index::sample(&mut self.rng, events.len(), size)
                .into_iter()
                .map(|i| events[i])
                .collect();
            let rows: Vec<Vec<f64>> = chosen.iter().map(|&e| self.noisy(e)).collect();
            caps.push(Caption {
                id: format!("{id}-c{c}"),
                tokens: Tensor::from_rows(&rows).expect("uniform width"),
            });
            caption_events.push(chosen);
        }
        let item = AudioItem {
            id,
            frames,
            captions: caps,
        };
        let labels = ClipLabels {
            events,
            frame_events,
            caption_events,
        };
        (item, labels)
    }

    fn split(&mut self, name: &str, n: usize, captions: usize) -> SynthSplit {
        let (items, labels) = (0..n).map(|i| self.clip(format!("{name}-{i:05}"), captions)).unzip();
        SynthSplit {
            dataset: RetrievalDataset { items },
            labels,
        }
    }
}

/// Generates train/val/test splits; identical configs give identical data.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proto: Vec<f64> = (0..cfg.num_events * cfg.feature_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut gen = Generator {
        cfg,
        rng,
        prototypes: Tensor::matrix(cfg.num_events, cfg.feature_dim, proto),
    };
    let train = gen.split("train", cfg.num_train, cfg.train_captions_per_audio);
    let val = gen.split("val", cfg.num_val, cfg.eval_captions_per_audio);
    let test = gen.split("test", cfg.num_test, cfg.eval_captions_per_audio);
    Ok(SynthData {
        prototypes: gen.prototypes,
        train,
        val,
        test,
    })
}
