//! Synthetic audio–visual clips with planted hidden co-occurring events, and
//! the CSV feature format shared with precomputed real features.

use std::collections::HashSet;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::default_class_names;
use crate::linalg::{format_real, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub label: usize,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    /// Generator ground truth; empty for loaded data and never used in training.
    pub hidden_events: Vec<usize>,
}

/// A set of clips with uniform feature widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clips: Vec<ClipRecord>,
    pub audio_dim: usize,
    pub visual_dim: usize,
}

impl Dataset {
    pub fn new(clips: Vec<ClipRecord>) -> Result<Self> {
        let (audio_dim, visual_dim) = clips
            .first()
            .map_or((0, 0), |c| (c.audio.len(), c.visual.len()));
        for c in &clips {
            if c.audio.len() != audio_dim || c.visual.len() != visual_dim {
                return Err(Error::Dimension(format!(
                    "clip {} has feature widths {}/{}, expected {audio_dim}/{visual_dim}",
                    c.clip_id,
                    c.audio.len(),
                    c.visual.len()
                )));
            }
        }
        Ok(Self {
            clips,
            audio_dim,
            visual_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }

    pub fn audio_matrix(&self) -> DenseMatrix {
        self.rows_matrix(|c| &c.audio, self.audio_dim, None)
    }

    pub fn visual_matrix(&self) -> DenseMatrix {
        self.rows_matrix(|c| &c.visual, self.visual_dim, None)
    }

    /// Audio and visual feature matrices for a subset of clips.
    pub fn batch_matrices(&self, idx: &[usize]) -> (DenseMatrix, DenseMatrix) {
        (
            self.rows_matrix(|c| &c.audio, self.audio_dim, Some(idx)),
            self.rows_matrix(|c| &c.visual, self.visual_dim, Some(idx)),
        )
    }

    fn rows_matrix(&self, f: impl Fn(&ClipRecord) -> &Vec<f64>, width: usize, idx: Option<&[usize]>) -> DenseMatrix {
        let mut data = Vec::new();
        match idx {
            Some(idx) => idx.iter().for_each(|&i| data.extend_from_slice(f(&self.clips[i]))),
            None => self.clips.iter().for_each(|c| data.extend_from_slice(f(c))),
        }
        let rows = idx.map_or(self.clips.len(), <[usize]>::len);
        DenseMatrix::new(rows, width, data).expect("uniform widths")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        let mut header = vec!["clip_id".to_string(), "label".to_string()];
        header.extend((0..self.audio_dim).map(|i| format!("a_{i}")));
        header.extend((0..self.visual_dim).map(|i| format!("v_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for c in &self.clips {
            write!(w, "{},{}", c.clip_id, c.label)?;
            for v in c.audio.iter().chain(&c.visual) {
                write!(w, ",{}", format_real(*v))?;
            }
            writeln!(w)?;
        }
        w.flush()
    }

    /// Parses the `clip_id,label,a_0..,v_0..` schema. Widths come from the
    /// header; errors name the 1-based line.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(r);
        let mut records = reader.records();
        let header = records
            .next()
            .ok_or(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })?
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?;
        let (audio_dim, visual_dim) = parse_header(&header)?;
        let width = 2 + audio_dim + visual_dim;
        let mut seen = HashSet::new();
        let mut clips = Vec::new();
        for (idx, rec) in records.enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != width {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {width} fields, found {}", rec.len()),
                });
            }
            let clip_id = rec[0].trim().to_string();
            if clip_id.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty clip_id".into(),
                });
            }
            if !seen.insert(clip_id.clone()) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate clip_id {clip_id:?}"),
                });
            }
            let label = rec[1].trim().parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("bad label {:?}: {e}", &rec[1]),
            })?;
            let mut values = Vec::with_capacity(audio_dim + visual_dim);
            for (k, cell) in rec.iter().skip(2).enumerate() {
                let v = cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("non-numeric cell {:?} in column {}", cell, k + 3),
                })?;
                values.push(v);
            }
            let visual = values.split_off(audio_dim);
            clips.push(ClipRecord {
                clip_id,
                label,
                audio: values,
                visual,
                hidden_events: Vec::new(),
            });
        }
        Ok(Dataset {
            clips,
            audio_dim,
            visual_dim,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f).map_err(|e| Error::io(path, e))
    }
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let bad = |message: String| Error::Parse { line: 1, message };
    if header.len() < 2 || header[0].trim() != "clip_id" || header[1].trim() != "label" {
        return Err(bad("header must start with clip_id,label".into()));
    }
    let mut audio_dim = 0;
    let mut visual_dim = 0;
    for name in header.iter().skip(2).map(str::trim) {
        if let Some(i) = name.strip_prefix("a_") {
            if visual_dim > 0 || i.parse::<usize>().ok() != Some(audio_dim) {
                return Err(bad(format!("unexpected column {name:?}")));
            }
            audio_dim += 1;
        } else if let Some(i) = name.strip_prefix("v_") {
            if i.parse::<usize>().ok() != Some(visual_dim) {
                return Err(bad(format!("unexpected column {name:?}")));
            }
            visual_dim += 1;
        } else {
            return Err(bad(format!("unexpected column {name:?}")));
        }
    }
    if audio_dim == 0 || visual_dim == 0 {
        return Err(bad("need at least one audio and one visual column".into()));
    }
    Ok((audio_dim, visual_dim))
}

/// Reads a feature CSV file.
pub fn load_features(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::read_csv(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Parse { line, message } => Error::format(path, format!("line {line}: {message}")),
        other => other,
    })
}

/// Train and test clips plus class metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub class_names: Vec<String>,
}

impl SplitDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn audio_dim(&self) -> usize {
        self.train.audio_dim
    }

    pub fn visual_dim(&self) -> usize {
        self.train.visual_dim
    }

    /// Loads `train.csv`, `test.csv` and, when present, `meta.json`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let train = load_features(&dir.join("train.csv"))?;
        let test_path = dir.join("test.csv");
        let test = if test_path.exists() {
            load_features(&test_path)?
        } else {
            Dataset::new(Vec::new())?
        };
        if !test.is_empty() && (test.audio_dim != train.audio_dim || test.visual_dim != train.visual_dim) {
            return Err(Error::format(&test_path, "feature widths differ from train.csv"));
        }
        let meta_path = dir.join("meta.json");
        let max_label = train.clips.iter().chain(&test.clips).map(|c| c.label).max().unwrap_or(0);
        let class_names = if meta_path.exists() {
            let meta = DatasetMeta::load(&meta_path)?;
            meta.class_names
        } else {
            default_class_names(max_label + 1)
        };
        if class_names.len() <= max_label {
            return Err(Error::format(dir, format!("label {max_label} exceeds the {} known classes", class_names.len())));
        }
        Ok(Self {
            train,
            test,
            class_names,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub clips: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// `cooccurrence[c][c']`: probability that a clip of class c also
    /// contains hidden event c'. Empty means all zeros.
    pub cooccurrence: Vec<Vec<f64>>,
    pub mix_strength: f64,
    pub noise: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let classes = 6;
        let mut q = vec![vec![0.0; classes]; classes];
        q[0][1] = 0.6;
        q[2][3] = 0.6;
        Self {
            classes,
            clips: 1200,
            audio_dim: 16,
            visual_dim: 32,
            cooccurrence: q,
            mix_strength: 0.8,
            noise: 0.3,
            train_fraction: 0.8,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Co-occurrence matrix, with an empty field read as all zeros.
    pub fn cooccurrence_matrix(&self) -> Vec<Vec<f64>> {
        if self.cooccurrence.is_empty() {
            vec![vec![0.0; self.classes]; self.classes]
        } else {
            self.cooccurrence.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.clips < self.classes {
            return Err(Error::Config(format!(
                "{} clips cannot cover {} classes",
                self.clips, self.classes
            )));
        }
        if self.audio_dim == 0 || self.visual_dim == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        let q = self.cooccurrence_matrix();
        if q.len() != self.classes || q.iter().any(|r| r.len() != self.classes) {
            return Err(Error::Config("co-occurrence matrix must be classes x classes".into()));
        }
        for (c, row) in q.iter().enumerate() {
            if row[c] != 0.0 {
                return Err(Error::Config(format!("co-occurrence diagonal entry {c} must be 0")));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("co-occurrence probabilities must lie in [0,1]".into()));
            }
        }
        if !(self.mix_strength.is_finite() && self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("mix strength and noise must be finite, noise >= 0".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Planted dependency edges `(from_node, to_node)` over the 2C nodes:
    /// every modality combination of c → c' for each positive Q[c][c'].
    pub fn ground_truth_edges(&self) -> Vec<(usize, usize)> {
        let c = self.classes;
        let mut edges = Vec::new();
        for (a, row) in self.cooccurrence_matrix().iter().enumerate() {
            for (b, &q) in row.iter().enumerate() {
                if q > 0.0 {
                    for (fo, to) in [(0, 0), (0, c), (c, 0), (c, c)] {
                        edges.push((a + fo, b + to));
                    }
                }
            }
        }
        edges.sort_unstable();
        edges
    }
}

/// JSON sidecar written next to generated CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_config: Option<SynthConfig>,
    #[serde(default)]
    pub ground_truth_edges: Vec<(usize, usize)>,
}

impl DatasetMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub struct Generated {
    pub data: SplitDataset,
    pub ground_truth_edges: Vec<(usize, usize)>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Balanced classes (clip `i` has class `i mod C`), class prototypes on the
/// unit sphere, hidden events mixed into both modalities, isotropic noise,
/// and a per-class stratified split.
pub fn generate(config: &SynthConfig) -> Result<Generated> {
    config.validate()?;
    let c = config.classes;
    let q = config.cooccurrence_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let audio_protos: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(config.audio_dim, &mut rng)).collect();
    let visual_protos: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(config.visual_dim, &mut rng)).collect();
    let mut clips = Vec::with_capacity(config.clips);
    for i in 0..config.clips {
        let label = i % c;
        let hidden: Vec<usize> = (0..c)
            .filter(|&other| other != label && rng.random::<f64>() < q[label][other])
            .collect();
        let mut make = |protos: &[Vec<f64>], dim: usize| -> Vec<f64> {
            (0..dim)
                .map(|k| {
                    let mixed: f64 = hidden.iter().map(|&h| protos[h][k]).sum();
                    let noise: f64 = rng.sample(StandardNormal);
                    protos[label][k] + config.mix_strength * mixed + config.noise * noise
                })
                .collect()
        };
        let audio = make(&audio_protos, config.audio_dim);
        let visual = make(&visual_protos, config.visual_dim);
        clips.push(ClipRecord {
            clip_id: format!("clip{i:06}"),
            label,
            audio,
            visual,
            hidden_events: hidden,
        });
    }
    let mut test_ids = HashSet::new();
    for class in 0..c {
        let mut members: Vec<usize> = (0..clips.len()).filter(|&i| clips[i].label == class).collect();
        members.shuffle(&mut rng);
        let n_test = ((1.0 - config.train_fraction) * members.len() as f64).round() as usize;
        test_ids.extend(members.into_iter().take(n_test));
    }
    let (test, train): (Vec<_>, Vec<_>) = clips
        .into_iter()
        .enumerate()
        .partition(|(i, _)| test_ids.contains(i));
    let strip = |v: Vec<(usize, ClipRecord)>| v.into_iter().map(|(_, c)| c).collect::<Vec<_>>();
    Ok(Generated {
        data: SplitDataset {
            train: Dataset::new(strip(train))?,
            test: Dataset::new(strip(test))?,
            class_names: default_class_names(c),
        },
        ground_truth_edges: config.ground_truth_edges(),
    })
}

/// Writes `train.csv`, `test.csv` and `meta.json` into `dir`.
pub fn save_generated(dir: &Path, config: &SynthConfig, generated: &Generated) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    generated.data.train.save_csv(&dir.join("train.csv"))?;
    generated.data.test.save_csv(&dir.join("test.csv"))?;
    let meta = DatasetMeta {
        class_names: generated.data.class_names.clone(),
        synth_config: Some(config.clone()),
        ground_truth_edges: generated.ground_truth_edges.clone(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
