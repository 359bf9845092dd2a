//! Reproducible weakly labelled corpus.
//!
//! Each clip holds one to three events of distinct classes over Gaussian background
//! noise. Training code sees a [`TrainingClip`]: audio and clip-level tags only. Event
//! placements are stored separately and can only be read with an [`EvalAccess`].

mod annotations;
mod classes;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

pub use annotations::{annotation_access_count, EvalAccess, EventAnnotation, TrainingScope};
pub use classes::{generate_event, standard_classes, GeneratorKind, ParamRange, SoundClassSpec, EVENT_RMS};

use crate::dsp::{read_wav, write_wav, Waveform};
use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv1a64, par_map};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
/// Minimum fraction of training clips each class must appear in.
pub const MIN_CLASS_COVERAGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub clip_secs: f64,
    pub sample_rate: u32,
    pub event_secs: f64,
    pub min_events: usize,
    pub max_events: usize,
    /// Background noise level relative to the event RMS.
    pub noise_db: f64,
    /// Overrides the standard class table when set.
    pub classes: Option<Vec<SoundClassSpec>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_clips: 2000,
            eval_clips: 400,
            clip_secs: 4.0,
            sample_rate: 8000,
            event_secs: 1.0,
            min_events: 1,
            max_events: 3,
            noise_db: -30.0,
            classes: None,
        }
    }
}

impl DataConfig {
    pub fn class_specs(&self) -> Result<Vec<SoundClassSpec>> {
        let specs = match &self.classes {
            Some(c) => c.clone(),
            None => standard_classes(self.num_classes)?,
        };
        if specs.len() != self.num_classes {
            return Err(Error::Config(format!(
                "num_classes is {} but {} class specs are given",
                self.num_classes,
                specs.len()
            )));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.class_id != i {
                return Err(Error::Config(format!(
                    "class specs must have ids 0..{} in order, found {} at position {i}",
                    specs.len(),
                    s.class_id
                )));
            }
            s.validate()?;
        }
        Ok(specs)
    }

    pub fn validate(&self) -> Result<()> {
        self.class_specs()?;
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.train_clips == 0 || self.eval_clips == 0 {
            return Err(Error::Config("both splits need at least one clip".into()));
        }
        if !(self.event_secs > 0.0) {
            return Err(Error::Config("event_secs must be positive".into()));
        }
        if !(self.clip_secs >= self.event_secs) {
            return Err(Error::Config(format!(
                "clip_secs {} is shorter than an event ({} s)",
                self.clip_secs, self.event_secs
            )));
        }
        if self.min_events == 0 || self.min_events > self.max_events || self.max_events > self.num_classes {
            return Err(Error::Config(format!(
                "event count range {}..={} invalid for {} classes",
                self.min_events, self.max_events, self.num_classes
            )));
        }
        if !self.noise_db.is_finite() {
            return Err(Error::Config("noise_db must be finite".into()));
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_secs * self.sample_rate as f64).round() as usize
    }

    pub fn event_samples(&self) -> usize {
        (self.event_secs * self.sample_rate as f64).round() as usize
    }

    pub fn noise_std(&self) -> f64 {
        EVENT_RMS * 10f64.powf(self.noise_db / 20.0)
    }
}

/// What training code may see of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingClip {
    pub clip_id: String,
    pub split: Split,
    pub seed: u64,
    pub waveform: Waveform,
    /// Multi-hot clip-level tags, one 0/1 entry per class.
    pub tags: Vec<u8>,
}

impl TrainingClip {
    pub fn has_tag(&self, k: usize) -> bool {
        self.tags.get(k) == Some(&1)
    }

    pub fn tagged_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.tags.iter().enumerate().filter(|(_, &t)| t == 1).map(|(k, _)| k)
    }
}

/// A clip together with its hidden event annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakClip {
    clip: TrainingClip,
    hidden_events: Vec<EventAnnotation>,
}

impl WeakClip {
    pub fn view(&self) -> &TrainingClip {
        &self.clip
    }

    pub fn into_view(self) -> TrainingClip {
        self.clip
    }

    pub fn hidden_events(&self, _access: &EvalAccess) -> &[EventAnnotation] {
        &self.hidden_events
    }
}

/// Multi-hot tags implied by a set of events.
pub fn tags_from_events(events: &[EventAnnotation], num_classes: usize) -> Vec<u8> {
    let mut t = vec![0u8; num_classes];
    for e in events {
        t[e.class_id] = 1;
    }
    t
}

/// Generates one clip (before WAV quantization) from its derived seed.
pub fn generate_clip(config: &DataConfig, clip_id: &str, split: Split, seed: u64) -> Result<WeakClip> {
    let specs = config.class_specs()?;
    let sr = config.sample_rate;
    let n = config.clip_samples();
    let ev_n = config.event_samples();
    if ev_n > n {
        return Err(Error::invalid(format!(
            "clip of {n} samples cannot hold a {ev_n}-sample event"
        )));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let count = rng.random_range(config.min_events..=config.max_events);
    // partial Fisher-Yates gives `count` distinct classes
    let mut order: Vec<usize> = (0..specs.len()).collect();
    for i in 0..count {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut x = vec![0.0; n];
    let mut events = Vec::with_capacity(count);
    for &k in &order[..count] {
        let onset = rng.random_range(0..=n - ev_n);
        let ev_seed = rng.next_u64();
        let ev = generate_event(&specs[k], config.event_secs, sr, ev_seed)?;
        for (d, s) in x[onset..].iter_mut().zip(ev.samples()) {
            *d += s;
        }
        events.push(EventAnnotation {
            class_id: k,
            onset_s: onset as f64 / sr as f64,
            offset_s: (onset + ev.len()) as f64 / sr as f64,
        });
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.class_id.cmp(&b.class_id)));
    let noise = Normal::new(0.0, config.noise_std()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut nrng = Pcg64::seed_from_u64(rng.next_u64());
    for v in &mut x {
        *v += noise.sample(&mut nrng);
    }
    let tags = tags_from_events(&events, specs.len());
    Ok(WeakClip {
        clip: TrainingClip {
            clip_id: clip_id.to_owned(),
            split,
            seed,
            waveform: Waveform::new(x, sr)?,
            tags,
        },
        hidden_events: events,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub split: Split,
    /// Relative to the manifest directory.
    pub path: String,
    pub tags: Vec<u8>,
    pub seed: u64,
    /// FNV-1a of the WAV file bytes, hex.
    pub fnv64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub clips: Vec<ClipRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Dataset {
                clip_id: String::new(),
                detail: format!("unsupported manifest version {}", m.version),
            });
        }
        m.config.validate()?;
        let mut seen = std::collections::HashSet::new();
        for c in &m.clips {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Dataset {
                    clip_id: c.id.clone(),
                    detail: "duplicate clip id".into(),
                });
            }
        }
        Ok(m)
    }

    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    /// Fraction of clips of `split` tagged with each class.
    pub fn class_coverage(&self, split: Split) -> Vec<f64> {
        let k = self.config.num_classes;
        let mut counts = vec![0usize; k];
        let mut total = 0usize;
        for c in self.clips_in(split) {
            total += 1;
            for (i, &t) in c.tags.iter().enumerate() {
                counts[i] += t as usize;
            }
        }
        counts.iter().map(|&n| n as f64 / total.max(1) as f64).collect()
    }
}

/// Annotation file contents: clip id → events.
type AnnotationMap = BTreeMap<String, Vec<EventAnnotation>>;

fn clip_id(split: Split, index: usize) -> String {
    format!("{}_{index:05}", split.name())
}

/// Writes `manifest.json`, `annotations.json` and `audio/<id>.wav` under `out`.
pub fn generate_dataset(config: &DataConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let audio = out.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;

    let ids: Vec<(String, Split)> = (0..config.train_clips)
        .map(|i| (clip_id(Split::Train, i), Split::Train))
        .chain((0..config.eval_clips).map(|i| (clip_id(Split::Eval, i), Split::Eval)))
        .collect();
    let results = par_map(&ids, |(id, split)| -> Result<(ClipRecord, Vec<EventAnnotation>)> {
        let clip_seed = derive_seed(seed, id);
        let clip = generate_clip(config, id, *split, clip_seed)?;
        let rel = format!("audio/{id}.wav");
        let path = out.join(&rel);
        write_wav(&path, &clip.clip.waveform)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok((
            ClipRecord {
                id: id.clone(),
                split: *split,
                path: rel,
                tags: clip.clip.tags.clone(),
                seed: clip_seed,
                fnv64: format!("{:016x}", fnv1a64(&bytes)),
            },
            clip.hidden_events,
        ))
    });
    let mut clips = Vec::with_capacity(ids.len());
    let mut ann = AnnotationMap::new();
    for r in results {
        let (rec, events) = r?;
        ann.insert(rec.id.clone(), events);
        clips.push(rec);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        config: config.clone(),
        clips,
    };
    for (k, &c) in manifest.class_coverage(Split::Train).iter().enumerate() {
        if c < MIN_CLASS_COVERAGE {
            return Err(Error::Dataset {
                clip_id: String::new(),
                detail: format!(
                    "class {k} appears in only {:.1}% of training clips (minimum {:.0}%)",
                    100.0 * c,
                    100.0 * MIN_CLASS_COVERAGE
                ),
            });
        }
    }
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    write_json(&out.join(ANNOTATIONS_FILE), &ann)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A loaded corpus split. Holds no annotations.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// `path` may name the manifest file or its directory.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            manifest: DatasetManifest::load(&manifest_path)?,
            root,
        })
    }

    pub fn config(&self) -> &DataConfig {
        &self.manifest.config
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.config.num_classes
    }

    fn load_record(&self, rec: &ClipRecord) -> Result<TrainingClip> {
        let cfg = &self.manifest.config;
        let bad = |detail: String| Error::Dataset {
            clip_id: rec.id.clone(),
            detail,
        };
        let path = self.root.join(&rec.path);
        let bytes = fs::read(&path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let h = format!("{:016x}", fnv1a64(&bytes));
        if h != rec.fnv64 {
            return Err(bad(format!("audio hash {h} does not match manifest {}", rec.fnv64)));
        }
        let w = read_wav(&path).map_err(|e| bad(e.to_string()))?;
        if w.sample_rate() != cfg.sample_rate || w.len() != cfg.clip_samples() {
            return Err(bad(format!(
                "audio is {} samples at {} Hz, manifest expects {} at {} Hz",
                w.len(),
                w.sample_rate(),
                cfg.clip_samples(),
                cfg.sample_rate
            )));
        }
        if rec.tags.len() != cfg.num_classes || rec.tags.iter().any(|&t| t > 1) {
            return Err(bad("tags are not a multi-hot vector over the class set".into()));
        }
        Ok(TrainingClip {
            clip_id: rec.id.clone(),
            split: rec.split,
            seed: rec.seed,
            waveform: w,
            tags: rec.tags.clone(),
        })
    }

    /// Training view of every clip in `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<TrainingClip>> {
        let recs: Vec<&ClipRecord> = self.manifest.clips_in(split).collect();
        par_map(&recs, |r| self.load_record(r)).into_iter().collect()
    }

    /// Clips with their hidden annotations. Evaluation only.
    pub fn load_annotated(&self, split: Split, access: &EvalAccess) -> Result<Vec<WeakClip>> {
        let ann = self.annotations(access)?;
        self.load_split(split)?
            .into_iter()
            .map(|clip| {
                let events = ann.get(&clip.clip_id).cloned().ok_or_else(|| Error::Dataset {
                    clip_id: clip.clip_id.clone(),
                    detail: "no annotation entry".into(),
                })?;
                if tags_from_events(&events, self.num_classes()) != clip.tags {
                    return Err(Error::Dataset {
                        clip_id: clip.clip_id.clone(),
                        detail: "tags disagree with annotated events".into(),
                    });
                }
                Ok(WeakClip {
                    clip,
                    hidden_events: events,
                })
            })
            .collect()
    }

    fn annotations(&self, _access: &EvalAccess) -> Result<AnnotationMap> {
        let p = self.root.join(ANNOTATIONS_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
