//! Episode simulation, sliding-window samples, episode-level splitting and
//! the binary dataset file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "BWDS" | u16 version | u32 header length | header JSON | u32 header CRC
//! | n x u64 record offsets | u32 index CRC | n records
//! ```
//!
//! Each record is the sample metadata, `window` pairs of (pixels, u16 beam),
//! a u8 label and a CRC32 over the preceding record bytes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind as IoErrorKind, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene::{init_scene, los_status, paths_for_user, render, step, Frame, LinkStatus, ScenarioConfig, SceneState, CHANNELS};
use crate::wireless::{beam_select, build_codebook, channel, Codebook, OfdmConfig};

pub const MAGIC: &[u8; 4] = b"BWDS";
pub const VERSION: u16 = 1;
/// Encoded size of [`SampleMeta`].
pub const META_BYTES: usize = 8 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes: usize,
    /// Triples simulated per episode.
    pub episode_length: usize,
    /// Observed (frame, beam) pairs per sample.
    pub window: usize,
    /// Fraction of episodes assigned to the training split.
    pub split_ratio: f64,
    pub seed: u64,
    /// Codebook size.
    pub beams: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { episodes: 4000, episode_length: 13, window: 8, split_ratio: 0.7, seed: 42, beams: 64 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::config("dataset.episodes", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::config("dataset.window", "must be at least 1"));
        }
        if self.episode_length < self.window + 1 {
            return Err(Error::config(
                "dataset.episode_length",
                format!("must be at least window + 1 = {}", self.window + 1),
            ));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config("dataset.split_ratio", "must lie strictly between 0 and 1"));
        }
        if self.beams < 2 || self.beams > usize::from(u16::MAX) + 1 {
            return Err(Error::config("dataset.beams", "must lie in 2..=65536"));
        }
        Ok(())
    }
}

/// One simulation step as seen by one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub frame: Arc<Frame>,
    pub beam: u16,
    pub status: LinkStatus,
    pub step: usize,
    pub time: f64,
}

/// Scene states before each step, the shared frames, and one triple track per user.
#[derive(Debug, Clone)]
pub struct Episode {
    pub states: Vec<SceneState>,
    pub tracks: Vec<Vec<Triple>>,
}

/// Renders, labels and beam-selects `length` consecutive scene states.
pub fn simulate_episode<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    ofdm: &OfdmConfig,
    codebook: &Codebook,
    length: usize,
    rng: &mut R,
) -> Result<Episode> {
    let mut scene = init_scene(cfg, rng)?;
    let mut states = Vec::with_capacity(length);
    let mut tracks = vec![Vec::with_capacity(length); scene.users.len()];
    for t in 0..length {
        let frame = Arc::new(render(&scene, cfg.raster_width, cfg.raster_height));
        for (u, track) in tracks.iter_mut().enumerate() {
            let h = channel(&paths_for_user(&scene, u, cfg, ofdm)?, ofdm)?;
            let beam = beam_select(&h, codebook)?;
            track.push(Triple {
                frame: Arc::clone(&frame),
                beam: u16::try_from(beam).map_err(|_| Error::config("dataset.beams", "must fit in 16 bits"))?,
                status: los_status(&scene, u)?,
                step: t,
                time: scene.time,
            });
        }
        let next = step(&scene, cfg.dt);
        states.push(scene);
        scene = next;
    }
    Ok(Episode { states, tracks })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub episode: u64,
    pub user: u32,
    pub scenario: u32,
    /// Episode step of the first observed pair.
    pub start_step: u32,
    pub start_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: Vec<Arc<Frame>>,
    pub beams: Vec<u16>,
    pub label: LinkStatus,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn window(&self) -> usize {
        self.beams.len()
    }
}

/// Sliding windows over one user's track: `window` observed pairs, labelled
/// with the status of the triple right after the last one.
pub fn make_samples(track: &[Triple], window: usize, episode: u64, user: u32, scenario: u32) -> Result<Vec<Sample>> {
    if window == 0 || track.len() < window + 1 {
        return Err(Error::Validation(format!(
            "a track of {} triples cannot hold a window of {window} plus a label",
            track.len()
        )));
    }
    Ok(track
        .windows(window + 1)
        .map(|w| {
            let (observed, next) = w.split_at(window);
            Sample {
                frames: observed.iter().map(|t| Arc::clone(&t.frame)).collect(),
                beams: observed.iter().map(|t| t.beam).collect(),
                label: next[0].status,
                meta: SampleMeta {
                    episode,
                    user,
                    scenario,
                    start_step: observed[0].step as u32,
                    start_time: observed[0].time,
                },
            }
        })
        .collect())
}

/// Moves `round(ratio * episodes)` randomly chosen whole episodes into the
/// training split, keeping at least one episode on each side.
pub fn split_dataset<R: Rng + ?Sized>(samples: Vec<Sample>, ratio: f64, rng: &mut R) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!("split ratio {ratio} must lie strictly between 0 and 1")));
    }
    let mut episodes: Vec<u64> = samples.iter().map(|s| s.meta.episode).collect();
    episodes.sort_unstable();
    episodes.dedup();
    if episodes.len() < 2 {
        return Err(Error::Validation(format!("splitting needs at least 2 episodes, got {}", episodes.len())));
    }
    episodes.shuffle(rng);
    let n_train = ((ratio * episodes.len() as f64).round() as usize).clamp(1, episodes.len() - 1);
    let train_ids: std::collections::HashSet<u64> = episodes[..n_train].iter().copied().collect();
    Ok(samples.into_iter().partition(|s| train_ids.contains(&s.meta.episode)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub split: Split,
    pub config_hash: String,
    pub codebook_fingerprint: String,
    pub window: usize,
    pub width: usize,
    pub height: usize,
    pub beams: usize,
    pub episodes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Scenario names indexed by `SampleMeta::scenario`.
    pub scenarios: Vec<String>,
}

impl DatasetHeader {
    /// Bytes per encoded record including its checksum.
    pub fn record_size(&self) -> usize {
        META_BYTES + self.window * (CHANNELS * self.width * self.height + 2) + 1 + 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Checks every sample against the header's shape and refreshes the counts.
    pub fn new(mut header: DatasetHeader, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.beams.len() != header.window || s.frames.len() != header.window {
                return Err(Error::Validation(format!(
                    "sample {i} holds {} frames and {} beams, window is {}",
                    s.frames.len(),
                    s.beams.len(),
                    header.window
                )));
            }
            if let Some(f) = s.frames.iter().find(|f| f.width() != header.width || f.height() != header.height) {
                return Err(Error::Validation(format!(
                    "sample {i} has a {}x{} frame, expected {}x{}",
                    f.width(),
                    f.height(),
                    header.width,
                    header.height
                )));
            }
            if let Some(&b) = s.beams.iter().find(|&&b| usize::from(b) >= header.beams) {
                return Err(Error::Validation(format!("sample {i} has beam {b} outside 0..{}", header.beams)));
            }
        }
        let mut ids: Vec<u64> = samples.iter().map(|s| s.meta.episode).collect();
        ids.sort_unstable();
        ids.dedup();
        header.episodes = ids.len();
        header.samples = samples.len();
        Ok(Self { header, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn episode_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.meta.episode).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub p_los: f64,
    pub p_nlos: f64,
}

pub fn class_balance(ds: &Dataset) -> Result<ClassBalance> {
    if ds.is_empty() {
        return Err(Error::Validation("class balance of an empty dataset".into()));
    }
    let nlos = ds.samples.iter().filter(|s| s.label == LinkStatus::Nlos).count();
    let p_nlos = nlos as f64 / ds.len() as f64;
    Ok(ClassBalance { p_los: 1.0 - p_nlos, p_nlos })
}

/// SHA-256 over the canonical JSON of everything that determines the data.
pub fn config_hash(scenarios: &[ScenarioConfig], ofdm: &OfdmConfig, data: &DatasetConfig) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        scenarios: &'a [ScenarioConfig],
        wireless: &'a OfdmConfig,
        dataset: &'a DatasetConfig,
    }
    let json = serde_json::to_vec(&Canonical { scenarios, wireless: ofdm, dataset: data }).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

/// Per-episode generator whose stream depends only on (seed, episode id).
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Scenario assigned to an episode (round-robin over the configured list).
pub fn scenario_of(episode: u64, scenarios: usize) -> usize {
    (episode % scenarios as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub config_hash: String,
    pub codebook_fingerprint: String,
    pub episodes_train: usize,
    pub episodes_validation: usize,
    pub samples_train: usize,
    pub samples_validation: usize,
    pub balance_train: ClassBalance,
    pub balance_validation: ClassBalance,
}

/// Simulates every episode (in parallel when `workers != 1`), cuts windows
/// and splits by episode. Output never depends on the worker count.
pub fn generate(
    scenarios: &[ScenarioConfig],
    ofdm: &OfdmConfig,
    data: &DatasetConfig,
    workers: usize,
) -> Result<(Dataset, Dataset, GenerationReport)> {
    data.validate()?;
    ofdm.validate()?;
    let first = scenarios.first().ok_or_else(|| Error::config("scenarios", "at least one scenario is required"))?;
    for s in scenarios {
        s.validate()?;
        if (s.raster_width, s.raster_height) != (first.raster_width, first.raster_height) {
            return Err(Error::config("scenario.raster_width", "all scenarios must share one raster size"));
        }
    }
    let codebook = build_codebook(ofdm.antennas, data.beams)?;
    let one = |e: u64| -> Result<Vec<Sample>> {
        let sc = scenario_of(e, scenarios.len());
        let ep = simulate_episode(&scenarios[sc], ofdm, &codebook, data.episode_length, &mut episode_rng(data.seed, e))?;
        let mut out = Vec::new();
        for (u, track) in ep.tracks.iter().enumerate() {
            out.extend(make_samples(track, data.window, e, u as u32, sc as u32)?);
        }
        Ok(out)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let per_episode: Vec<Vec<Sample>> =
        pool.install(|| (0..data.episodes as u64).into_par_iter().map(one).collect::<Result<_>>())?;
    let samples: Vec<Sample> = per_episode.into_iter().flatten().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
    rng.set_stream(u64::MAX);
    let (train, val) = split_dataset(samples, data.split_ratio, &mut rng)?;
    let header = |split| DatasetHeader {
        split,
        config_hash: config_hash(scenarios, ofdm, data),
        codebook_fingerprint: codebook.fingerprint(),
        window: data.window,
        width: first.raster_width,
        height: first.raster_height,
        beams: data.beams,
        episodes: 0,
        samples: 0,
        seed: data.seed,
        scenarios: scenarios.iter().map(|s| s.name.clone()).collect(),
    };
    let train = Dataset::new(header(Split::Train), train)?;
    let val = Dataset::new(header(Split::Validation), val)?;
    let report = GenerationReport {
        config_hash: train.header.config_hash.clone(),
        codebook_fingerprint: train.header.codebook_fingerprint.clone(),
        episodes_train: train.header.episodes,
        episodes_validation: val.header.episodes,
        samples_train: train.len(),
        samples_validation: val.len(),
        balance_train: class_balance(&train)?,
        balance_validation: class_balance(&val)?,
    };
    Ok((train, val, report))
}

fn encode_record(s: &Sample, buf: &mut Vec<u8>) {
    buf.clear();
    buf.extend_from_slice(&s.meta.episode.to_le_bytes());
    buf.extend_from_slice(&s.meta.user.to_le_bytes());
    buf.extend_from_slice(&s.meta.scenario.to_le_bytes());
    buf.extend_from_slice(&s.meta.start_step.to_le_bytes());
    buf.extend_from_slice(&s.meta.start_time.to_le_bytes());
    for (f, b) in s.frames.iter().zip(&s.beams) {
        buf.extend_from_slice(f.levels());
        buf.extend_from_slice(&b.to_le_bytes());
    }
    buf.push(s.label as u8);
    let crc = crc32fast::hash(buf);
    buf.extend_from_slice(&crc.to_le_bytes());
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let header = serde_json::to_vec(&ds.header).expect("header serializes");
    let mut w = BufWriter::with_capacity(1 << 20, File::create(path).map_err(io)?);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io);
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(header.len() as u32).to_le_bytes())?;
    put(&header)?;
    put(&crc32fast::hash(&header).to_le_bytes())?;

    let rec = ds.header.record_size() as u64;
    let start = (4 + 2 + 4 + header.len() + 4 + 8 * ds.len() + 4) as u64;
    let mut index = Vec::with_capacity(8 * ds.len());
    for i in 0..ds.len() as u64 {
        index.extend_from_slice(&(start + i * rec).to_le_bytes());
    }
    put(&index)?;
    put(&crc32fast::hash(&index).to_le_bytes())?;

    let mut buf = Vec::with_capacity(rec as usize);
    for s in &ds.samples {
        encode_record(s, &mut buf);
        put(&buf)?;
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    path: &'a Path,
    inner: BufReader<File>,
    pos: u64,
}

impl Cursor<'_> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            IoErrorKind::UnexpectedEof => {
                Error::Truncated { path: self.path.to_path_buf(), detail: format!("file ends inside {what}") }
            }
            _ => Error::io(self.path, e),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { path, inner: BufReader::with_capacity(1 << 20, file), pos: 0 };
    let malformed = |detail: String| Error::Malformed { path: path.to_path_buf(), detail };
    let checksum = |section: &str| Error::Checksum { path: path.to_path_buf(), section: section.to_string() };

    if &c.take::<4>("magic")? != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "BWDS" });
    }
    let version = u16::from_le_bytes(c.take("version")?);
    if version != VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: VERSION });
    }
    let hlen = u32::from_le_bytes(c.take("header length")?) as usize;
    let mut header_bytes = vec![0u8; hlen];
    c.fill(&mut header_bytes, "header")?;
    if u32::from_le_bytes(c.take("header checksum")?) != crc32fast::hash(&header_bytes) {
        return Err(checksum("header"));
    }
    let header: DatasetHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| malformed(format!("header JSON: {e}")))?;

    let n = header.samples;
    let mut index = vec![0u8; 8 * n];
    c.fill(&mut index, "record index")?;
    if u32::from_le_bytes(c.take("index checksum")?) != crc32fast::hash(&index) {
        return Err(checksum("record index"));
    }

    let rec = header.record_size();
    let pixels = CHANNELS * header.width * header.height;
    let mut frames: HashMap<(u64, u32), Arc<Frame>> = HashMap::new();
    let mut buf = vec![0u8; rec];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let offset = u64::from_le_bytes(index[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        if offset != c.pos {
            return Err(malformed(format!("record {i} indexed at byte {offset}, found at {}", c.pos)));
        }
        c.fill(&mut buf, &format!("record {i}"))?;
        let (body, crc) = buf.split_at(rec - 4);
        if u32::from_le_bytes(crc.try_into().expect("4 bytes")) != crc32fast::hash(body) {
            return Err(checksum(&format!("record {i}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
        let meta = SampleMeta {
            episode: u64::from_le_bytes(body[0..8].try_into().expect("8 bytes")),
            user: u32_at(8),
            scenario: u32_at(12),
            start_step: u32_at(16),
            start_time: f64::from_le_bytes(body[20..28].try_into().expect("8 bytes")),
        };
        let mut sample_frames = Vec::with_capacity(header.window);
        let mut beams = Vec::with_capacity(header.window);
        for (k, pair) in body[META_BYTES..rec - 5].chunks_exact(pixels + 2).enumerate() {
            let levels = &pair[..pixels];
            // Windows of one episode overlap, so identical frames are shared.
            let key = (meta.episode, meta.start_step + k as u32);
            let frame = match frames.get(&key) {
                Some(f) if f.levels() == levels => Arc::clone(f),
                _ => {
                    let f = Arc::new(Frame::from_levels(header.width, header.height, levels.to_vec())?);
                    frames.insert(key, Arc::clone(&f));
                    f
                }
            };
            sample_frames.push(frame);
            beams.push(u16::from_le_bytes([pair[pixels], pair[pixels + 1]]));
        }
        let label = LinkStatus::from_index(usize::from(body[rec - 5]))
            .ok_or_else(|| malformed(format!("record {i} has label byte {}", body[rec - 5])))?;
        samples.push(Sample { frames: sample_frames, beams, label, meta });
    }
    let mut rest = [0u8; 1];
    if c.inner.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(malformed(format!("trailing bytes after {n} records")));
    }
    let ds = Dataset::new(header.clone(), samples).map_err(|e| malformed(e.to_string()))?;
    if ds.header != header {
        return Err(malformed("header episode count disagrees with the records".into()));
    }
    Ok(ds)
}
