//! Dataset plumbing: class lists, DCASE-style label files, split
//! manifests, and a deterministic synthetic-corpus generator.
//!
//! Label files key rows by audio filename; the basename without its
//! extension is the clip id used everywhere else.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::postproc::{Event, EventList};
use crate::train::WeakLabelVector;

/// The ten DCASE 2018 task 4 domestic classes.
pub const DEFAULT_CLASSES: [&str; 10] = [
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
];

/// Ordered class names; the position is the class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassList {
    names: Vec<String>,
}

impl ClassList {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("class list is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if name.is_empty() || name.contains('\t') || name.contains(',') {
                return Err(Error::Config(format!("invalid class name {name:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate class name {name}")));
            }
        }
        Ok(ClassList { names })
    }

    pub fn default_dcase() -> Self {
        ClassList {
            names: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// One class name per line; blank lines ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_names(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

fn clip_id_of(filename: &str) -> String {
    Path::new(filename)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| filename.to_string())
}

/// TSV with header, columns filename and comma-separated event_labels.
/// An empty label field yields the all-zero vector.
pub fn load_weak_labels(path: &Path, classes: &ClassList) -> Result<BTreeMap<String, WeakLabelVector>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (lineno == 0 && line.starts_with("filename")) {
            continue;
        }
        let (filename, labels) = match line.split_once('\t') {
            Some(pair) => pair,
            None => (line, ""),
        };
        let mut l = vec![0u8; classes.len()];
        for label in labels.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match classes.id(label) {
                Some(c) => l[c] = 1,
                None => {
                    return Err(Error::data_at(
                        path,
                        lineno + 1,
                        format!(
                            "unknown class {label:?}; valid classes: {}",
                            classes.names().join(", ")
                        ),
                    ))
                }
            }
        }
        let clip_id = clip_id_of(filename);
        if map.insert(clip_id.clone(), WeakLabelVector { l }).is_some() {
            return Err(Error::data_at(
                path,
                lineno + 1,
                format!("duplicate filename {filename}"),
            ));
        }
    }
    Ok(map)
}

pub fn save_weak_labels(
    path: &Path,
    labels: &BTreeMap<String, WeakLabelVector>,
    classes: &ClassList,
) -> Result<()> {
    let mut out = String::from("filename\tevent_labels\n");
    for (clip_id, vector) in labels {
        if vector.l.len() != classes.len() {
            return Err(Error::Config(format!(
                "clip {clip_id}: label has {} classes, list has {}",
                vector.l.len(),
                classes.len()
            )));
        }
        let names: Vec<&str> = vector
            .l
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(c, _)| classes.name(c))
            .collect();
        out.push_str(&format!("{clip_id}.wav\t{}\n", names.join(",")));
    }
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

/// TSV columns filename, onset, offset, event_label; an optional header
/// is skipped. Times are validated against [0, max_seconds].
pub fn load_strong_labels(
    path: &Path,
    classes: &ClassList,
    max_seconds: f64,
) -> Result<BTreeMap<String, EventList>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut events: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (lineno == 0 && line.starts_with("filename")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::data_at(
                path,
                lineno + 1,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let onset: f64 = fields[1]
            .parse()
            .map_err(|_| Error::data_at(path, lineno + 1, format!("bad onset {:?}", fields[1])))?;
        let offset: f64 = fields[2]
            .parse()
            .map_err(|_| Error::data_at(path, lineno + 1, format!("bad offset {:?}", fields[2])))?;
        if !(onset >= 0.0 && onset < offset && offset <= max_seconds) {
            return Err(Error::data_at(
                path,
                lineno + 1,
                format!("need 0 <= onset < offset <= {max_seconds}, got {onset}..{offset}"),
            ));
        }
        let class_id = classes.id(fields[3]).ok_or_else(|| {
            Error::data_at(
                path,
                lineno + 1,
                format!(
                    "unknown class {:?}; valid classes: {}",
                    fields[3],
                    classes.names().join(", ")
                ),
            )
        })?;
        events.entry(clip_id_of(fields[0])).or_default().push(Event {
            class_id,
            onset,
            offset,
        });
    }
    Ok(events
        .into_iter()
        .map(|(clip_id, evs)| {
            let list = EventList::new(clip_id.clone(), evs);
            (clip_id, list)
        })
        .collect())
}

pub fn save_strong_labels(
    path: &Path,
    labels: &BTreeMap<String, EventList>,
    classes: &ClassList,
) -> Result<()> {
    let mut out = String::from("filename\tonset\toffset\tevent_label\n");
    for (clip_id, list) in labels {
        for e in &list.events {
            if e.class_id >= classes.len() {
                return Err(Error::Config(format!(
                    "clip {clip_id}: class id {} outside list of {}",
                    e.class_id,
                    classes.len()
                )));
            }
            out.push_str(&format!(
                "{clip_id}.wav\t{:.3}\t{:.3}\t{}\n",
                e.onset,
                e.offset,
                classes.name(e.class_id)
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Weak,
    UnlabelledInDomain,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Weak => "weak",
            Split::UnlabelledInDomain => "unlabelled_in_domain",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "weak" => Some(Split::Weak),
            "unlabelled_in_domain" => Some(Split::UnlabelledInDomain),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Path as written in the file, relative to the manifest directory.
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// TSV columns clip_id, path, split. Referenced files must exist.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || (lineno == 0 && line.starts_with("clip_id")) {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::data_at(
                    path,
                    lineno + 1,
                    format!("expected 3 fields, got {}", fields.len()),
                ));
            }
            let split = Split::parse(fields[2]).ok_or_else(|| {
                Error::data_at(path, lineno + 1, format!("unknown split {:?}", fields[2]))
            })?;
            if !seen.insert(fields[0].to_string()) {
                return Err(Error::data_at(
                    path,
                    lineno + 1,
                    format!("duplicate clip_id {}", fields[0]),
                ));
            }
            let rel = PathBuf::from(fields[1]);
            if !root.join(&rel).is_file() {
                return Err(Error::data_at(
                    path,
                    lineno + 1,
                    format!("referenced file {} does not exist", rel.display()),
                ));
            }
            entries.push(ManifestEntry {
                clip_id: fields[0].to_string(),
                path: rel,
                split,
            });
        }
        Ok(Manifest { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("clip_id\tpath\tsplit\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.clip_id,
                e.path.display(),
                e.split
            ));
        }
        fs::write(path, out).map_err(|e| Error::file(path, e))
    }

    pub fn abs_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// How one synthetic class sounds and how long its events last.
#[derive(Clone, Debug)]
pub struct ClassSpec {
    pub name: String,
    pub archetype: Archetype,
    pub dur_min: f64,
    pub dur_max: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum Archetype {
    Tone { freq: f64 },
    NoiseBurst,
    AmTone { freq: f64, rate: f64 },
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    pub n_weak: usize,
    pub n_unlabelled: usize,
    pub n_test: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub overlap_allowed: bool,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Pink-noise background level; 0 silences the background and fixes
    /// event RMS at 0.2 instead of tracking an SNR.
    pub noise_rms: f64,
    pub seed: u64,
    pub clip_seconds: f64,
    pub sample_rate: u32,
}

impl SynthSpec {
    /// Three classes spanning the short/mid/long duration spread.
    pub fn default_desk(seed: u64) -> Self {
        SynthSpec {
            classes: vec![
                ClassSpec {
                    name: "beep_short".into(),
                    archetype: Archetype::Tone { freq: 880.0 },
                    dur_min: 0.1,
                    dur_max: 0.5,
                },
                ClassSpec {
                    name: "hiss_long".into(),
                    archetype: Archetype::NoiseBurst,
                    dur_min: 2.0,
                    dur_max: 8.0,
                },
                ClassSpec {
                    name: "warble_mid".into(),
                    archetype: Archetype::AmTone {
                        freq: 440.0,
                        rate: 4.0,
                    },
                    dur_min: 0.8,
                    dur_max: 2.0,
                },
            ],
            n_weak: 200,
            n_unlabelled: 200,
            n_test: 60,
            events_min: 1,
            events_max: 3,
            overlap_allowed: false,
            snr_db_min: 6.0,
            snr_db_max: 20.0,
            noise_rms: 0.05,
            seed,
            clip_seconds: 10.0,
            sample_rate: 16000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("synth spec has no classes".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.classes {
            if !(c.dur_min > 0.0 && c.dur_min <= c.dur_max && c.dur_max <= self.clip_seconds) {
                return Err(Error::Config(format!(
                    "class {}: need 0 < dur_min <= dur_max <= {}",
                    c.name, self.clip_seconds
                )));
            }
            if !names.insert(c.name.clone()) {
                return Err(Error::Config(format!("duplicate synth class {}", c.name)));
            }
        }
        if self.events_min > self.events_max || self.events_max == 0 {
            return Err(Error::Config("bad events per clip range".into()));
        }
        if self.snr_db_min > self.snr_db_max {
            return Err(Error::Config("bad SNR range".into()));
        }
        if self.clip_seconds <= 0.0 || self.sample_rate == 0 {
            return Err(Error::Config("bad clip geometry".into()));
        }
        Ok(())
    }

    pub fn class_list(&self) -> Result<ClassList> {
        ClassList::from_names(self.classes.iter().map(|c| c.name.clone()).collect())
    }
}

fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64).sqrt()
}

fn scale_to_rms(x: &mut [f32], target: f64) {
    let current = rms(x);
    if current > 0.0 {
        let k = (target / current) as f32;
        for v in x.iter_mut() {
            *v *= k;
        }
    }
}

/// Paul Kellet's economy pink-noise filter over uniform white noise.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut b = [0f64; 7];
    (0..n)
        .map(|_| {
            let white: f64 = rng.gen_range(-1.0..1.0);
            b[0] = 0.99886 * b[0] + white * 0.0555179;
            b[1] = 0.99332 * b[1] + white * 0.0750759;
            b[2] = 0.96900 * b[2] + white * 0.1538520;
            b[3] = 0.86650 * b[3] + white * 0.3104856;
            b[4] = 0.55000 * b[4] + white * 0.5329522;
            b[5] = -0.7616 * b[5] - white * 0.0168980;
            let pink = b.iter().sum::<f64>() + white * 0.5362;
            b[6] = white * 0.115926;
            (pink * 0.11) as f32
        })
        .collect()
}

fn archetype_waveform(
    archetype: Archetype,
    n: usize,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let sr = sample_rate as f64;
    match archetype {
        Archetype::Tone { freq } => (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin() as f32)
            .collect(),
        Archetype::NoiseBurst => (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        Archetype::AmTone { freq, rate } => (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let carrier = (2.0 * std::f64::consts::PI * freq * t).sin();
                let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * rate * t).sin();
                (carrier * env) as f32
            })
            .collect(),
    }
}

fn apply_fades(x: &mut [f32], fade: usize) {
    let fade = fade.min(x.len() / 2);
    for i in 0..fade {
        let g = (i + 1) as f32 / (fade + 1) as f32;
        x[i] *= g;
        let j = x.len() - 1 - i;
        x[j] *= g;
    }
}

fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav(e.to_string()))?;
    for &v in samples {
        let s = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(s).map_err(|e| Error::Wav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Wav(e.to_string()))
}

/// One generated clip before it hits disk.
struct SynthClip {
    samples: Vec<f32>,
    events: Vec<Event>,
}

/// Event times land on whole milliseconds so label files round-trip
/// exactly.
fn synth_clip(spec: &SynthSpec, clip_index: u64) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(clip_index);
    let n_samples = (spec.clip_seconds * spec.sample_rate as f64).round() as usize;
    let mut samples = if spec.noise_rms > 0.0 {
        let mut bg = pink_noise(n_samples, &mut rng);
        scale_to_rms(&mut bg, spec.noise_rms);
        bg
    } else {
        vec![0f32; n_samples]
    };

    let n_events = rng.gen_range(spec.events_min..=spec.events_max);
    let clip_ms = (spec.clip_seconds * 1000.0).round() as u64;
    let ms_per_sample = 1000.0 / spec.sample_rate as f64;
    let fade = (0.010 * spec.sample_rate as f64).round() as usize;
    let mut placed: Vec<(u64, u64, usize)> = Vec::new();
    for _ in 0..n_events {
        let class_id = rng.gen_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        let dur_lo = (class.dur_min * 1000.0).round().max(1.0) as u64;
        let dur_hi = (class.dur_max * 1000.0).round() as u64;
        let dur_ms = rng.gen_range(dur_lo..=dur_hi);
        let mut chosen = None;
        for _ in 0..1000 {
            let onset_ms = rng.gen_range(0..=clip_ms - dur_ms);
            let offset_ms = onset_ms + dur_ms;
            let collides = !spec.overlap_allowed
                && placed
                    .iter()
                    .any(|&(on, off, _)| onset_ms < off && on < offset_ms);
            if !collides {
                chosen = Some((onset_ms, offset_ms));
                break;
            }
        }
        let (onset_ms, offset_ms) = match chosen {
            Some(c) => c,
            None => continue,
        };
        placed.push((onset_ms, offset_ms, class_id));

        let start = (onset_ms as f64 / ms_per_sample).round() as usize;
        let len = (dur_ms as f64 / ms_per_sample).round() as usize;
        let mut wave = archetype_waveform(class.archetype, len, spec.sample_rate, &mut rng);
        let target_rms = if spec.noise_rms > 0.0 {
            let snr_db = rng.gen_range(spec.snr_db_min..=spec.snr_db_max);
            spec.noise_rms * 10f64.powf(snr_db / 20.0)
        } else {
            0.2
        };
        scale_to_rms(&mut wave, target_rms);
        apply_fades(&mut wave, fade);
        for (i, &v) in wave.iter().enumerate() {
            if start + i < samples.len() {
                samples[start + i] += v;
            }
        }
    }
    let events = placed
        .into_iter()
        .map(|(on, off, class_id)| Event {
            class_id,
            onset: on as f64 / 1000.0,
            offset: off as f64 / 1000.0,
        })
        .collect();
    SynthClip { samples, events }
}

pub struct SynthOutput {
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub weak_labels: PathBuf,
    pub strong_weak: PathBuf,
    pub strong_test: PathBuf,
    pub classes: PathBuf,
    pub n_clips: usize,
}

/// Generates the corpus under out_dir: audio/*.wav, weak.tsv for the
/// weak split, strong labels for the weak and test splits (none for the
/// unlabelled split), classes.txt, and manifest.tsv.
pub fn synthesize(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let classes = spec.class_list()?;
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::file(&audio_dir, e))?;

    let plan: Vec<(Split, &str, usize)> = vec![
        (Split::Weak, "weak", spec.n_weak),
        (Split::UnlabelledInDomain, "unl", spec.n_unlabelled),
        (Split::Test, "test", spec.n_test),
    ];
    let mut entries = Vec::new();
    let mut weak_map: BTreeMap<String, WeakLabelVector> = BTreeMap::new();
    let mut strong_weak: BTreeMap<String, EventList> = BTreeMap::new();
    let mut strong_test: BTreeMap<String, EventList> = BTreeMap::new();
    let mut clip_index = 0u64;
    for (split, prefix, count) in plan {
        for i in 0..count {
            let clip_id = format!("{prefix}_{i:04}");
            let clip = synth_clip(spec, clip_index);
            clip_index += 1;
            let rel = PathBuf::from("audio").join(format!("{clip_id}.wav"));
            write_wav(&out_dir.join(&rel), &clip.samples, spec.sample_rate)?;
            entries.push(ManifestEntry {
                clip_id: clip_id.clone(),
                path: rel,
                split,
            });
            match split {
                Split::Weak => {
                    let mut l = vec![0u8; classes.len()];
                    for e in &clip.events {
                        l[e.class_id] = 1;
                    }
                    weak_map.insert(clip_id.clone(), WeakLabelVector { l });
                    strong_weak.insert(clip_id.clone(), EventList::new(clip_id, clip.events));
                }
                Split::Test => {
                    strong_test.insert(clip_id.clone(), EventList::new(clip_id, clip.events));
                }
                Split::UnlabelledInDomain => {}
            }
        }
    }

    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let manifest_path = out_dir.join("manifest.tsv");
    manifest.save(&manifest_path)?;
    let weak_path = out_dir.join("weak.tsv");
    save_weak_labels(&weak_path, &weak_map, &classes)?;
    let strong_weak_path = out_dir.join("strong_weak.tsv");
    save_strong_labels(&strong_weak_path, &strong_weak, &classes)?;
    let strong_test_path = out_dir.join("strong_test.tsv");
    save_strong_labels(&strong_test_path, &strong_test, &classes)?;
    let classes_path = out_dir.join("classes.txt");
    classes.save(&classes_path)?;
    Ok(SynthOutput {
        out_dir: out_dir.to_path_buf(),
        manifest: manifest_path,
        weak_labels: weak_path,
        strong_weak: strong_weak_path,
        strong_test: strong_test_path,
        classes: classes_path,
        n_clips: clip_index as usize,
    })
}

/// SHA-256 over every file under dir, visited in sorted relative-path
/// order; path and length are mixed in so renames and truncations move
/// the digest.
pub fn dir_digest(dir: &Path) -> Result<String> {
    fn collect(root: &Path, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::file(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                collect(root, &path, files)?;
            } else {
                files.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        let bytes = fs::read(dir.join(rel)).map_err(|e| Error::file(&dir.join(rel), e))?;
        let name = rel.to_string_lossy();
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

/// Writes a small key=value run manifest next to other outputs.
pub fn write_run_manifest(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    for (k, v) in pairs {
        writeln!(f, "{k}={v}").map_err(|e| Error::file(path, e))?;
    }
    Ok(())
}
