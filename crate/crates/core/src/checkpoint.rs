//! Exact on-disk training state.
//!
//! A `model` file is the magic `ILICKPT1`, a little-endian `u64` header
//! length, a JSON header, and then every floating-point array as
//! little-endian `f64` in a fixed order: parameters, Adam first and second
//! moments, per-epoch log rows, inferred graphs, the regularizer graph and
//! the frozen teacher soft labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::IliGraph;
use crate::linalg::DenseMatrix;
use crate::net::{ModelParams, NetShape, OptimizerState};
use crate::trainer::{CheckpointGraph, EpochRecord, TrainConfig, TrainLog};

const MAGIC: &[u8; 8] = b"ILICKPT1";
const ROW_WIDTH: usize = 6;

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub log: TrainLog,
    /// Teacher soft labels over the training set, frozen at the transition epoch.
    pub teacher_soft: Option<(DenseMatrix, DenseMatrix)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    class_names: Vec<String>,
    shape: NetShape,
    adam_step: u64,
    epochs: usize,
    graph_epochs: Vec<usize>,
    has_lir_graph: bool,
    soft_rows: Option<usize>,
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            shape: self.params.shape(),
            adam_step: self.optimizer.step,
            epochs: self.log.epochs.len(),
            graph_epochs: self.log.graphs.iter().map(|g| g.epoch).collect(),
            has_lir_graph: self.log.lir_graph.is_some(),
            soft_rows: self.teacher_soft.as_ref().map(|(a, _)| a.rows()),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for model in [&self.params, &self.optimizer.first_moment, &self.optimizer.second_moment] {
            model.tensors().into_iter().for_each(&mut put);
        }
        for r in &self.log.epochs {
            let (a, v) = r.map.unwrap_or((f64::NAN, f64::NAN));
            put(&[r.total, r.av_sal, r.metric, r.lir, a, v]);
        }
        for g in &self.log.graphs {
            put(g.graph.adjacency().as_slice());
        }
        if let Some(g) = &self.log.lir_graph {
            put(g.adjacency().as_slice());
        }
        if let Some((a, v)) = &self.teacher_soft {
            put(a.as_slice());
            put(v.as_slice());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Argument(format!("malformed checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let payload = &bytes[16 + len..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of floats"));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = floats.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(bad("truncated payload"))
            }
        };
        let mut read_model = || -> Result<ModelParams> {
            let mut m = ModelParams::init(&header.shape, 0);
            for t in m.tensors_mut() {
                t.copy_from_slice(&take(t.len())?);
            }
            Ok(m)
        };
        let params = read_model()?;
        let first_moment = read_model()?;
        let second_moment = read_model()?;
        let mut epochs = Vec::with_capacity(header.epochs);
        for e in 0..header.epochs {
            let r = take(ROW_WIDTH)?;
            epochs.push(EpochRecord {
                epoch: e + 1,
                total: r[0],
                av_sal: r[1],
                metric: r[2],
                lir: r[3],
                map: (!r[4].is_nan()).then_some((r[4], r[5])),
            });
        }
        let p = 2 * header.class_names.len();
        let mut read_graph = || -> Result<IliGraph> {
            let adj = DenseMatrix::new(p, p, take(p * p)?)?;
            IliGraph::from_normalized(adj, header.class_names.clone())
        };
        let mut graphs = Vec::new();
        for &epoch in &header.graph_epochs {
            graphs.push(CheckpointGraph {
                epoch,
                graph: read_graph()?,
            });
        }
        let lir_graph = if header.has_lir_graph { Some(read_graph()?) } else { None };
        let c = header.shape.classes;
        let teacher_soft = match header.soft_rows {
            Some(n) => Some((DenseMatrix::new(n, c, take(n * c)?)?, DenseMatrix::new(n, c, take(n * c)?)?)),
            None => None,
        };
        if floats.next().is_some() {
            return Err(bad("trailing data"));
        }
        Ok(Self {
            config: header.config,
            class_names: header.class_names,
            params,
            optimizer: OptimizerState {
                first_moment,
                second_moment,
                step: header.adam_step,
            },
            log: TrainLog {
                epochs,
                graphs,
                lir_graph,
            },
            teacher_soft,
        })
    }

    /// Writes `model`, `log.csv` and, when given, `graph.csv` into `dir`.
    pub fn save_dir(&self, dir: &Path, graph: Option<&IliGraph>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let model = dir.join("model");
        std::fs::write(&model, self.to_bytes()).map_err(|e| Error::io(&model, e))?;
        self.log.save_csv(&dir.join("log.csv"))?;
        if let Some(g) = graph {
            g.save_csv(&dir.join("graph.csv"))?;
        }
        Ok(())
    }

    /// Reads `dir/model`, or `dir` itself when it is a file.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = if dir.is_dir() { dir.join("model") } else { dir.to_path_buf() };
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(&path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::default_class_names;

    fn state() -> TrainState {
        let shape = NetShape {
            audio_dim: 3,
            visual_dim: 4,
            hidden: 5,
            classes: 2,
        };
        let params = ModelParams::init(&shape, 7);
        let mut optimizer = OptimizerState::new(&params);
        optimizer.step = 9;
        optimizer.first_moment = ModelParams::init(&shape, 8);
        let mut w = DenseMatrix::zeros(4, 4);
        w.set(0, 3, 0.3);
        w.set(2, 1, 0.7);
        let g = IliGraph::from_weights(w, default_class_names(2)).unwrap();
        TrainState {
            config: TrainConfig::default(),
            class_names: default_class_names(2),
            params,
            optimizer,
            log: TrainLog {
                epochs: vec![
                    EpochRecord {
                        epoch: 1,
                        total: 1.0 / 3.0,
                        av_sal: 0.1,
                        metric: 0.2,
                        lir: 0.0,
                        map: None,
                    },
                    EpochRecord {
                        epoch: 2,
                        total: 0.3,
                        av_sal: 0.1,
                        metric: 0.2,
                        lir: 0.5,
                        map: Some((0.25, 0.75)),
                    },
                ],
                graphs: vec![CheckpointGraph { epoch: 2, graph: g.clone() }],
                lir_graph: Some(g),
            },
            teacher_soft: Some((DenseMatrix::from_fn(3, 2, |r, c| (r + c) as f64 / 7.0), DenseMatrix::zeros(3, 2))),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let s = state();
        assert_eq!(TrainState::from_bytes(&s.to_bytes()).unwrap(), s);
        let fresh = TrainState {
            teacher_soft: None,
            log: TrainLog::default(),
            ..state()
        };
        assert_eq!(TrainState::from_bytes(&fresh.to_bytes()).unwrap(), fresh);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = state().to_bytes();
        assert!(TrainState::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(TrainState::from_bytes(b"not a checkpoint").is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(TrainState::from_bytes(&extra).is_err());
    }

    #[test]
    fn directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        let g = s.log.lir_graph.clone();
        s.save_dir(dir.path(), g.as_ref()).unwrap();
        for f in ["model", "log.csv", "graph.csv"] {
            assert!(dir.path().join(f).exists());
        }
        assert_eq!(TrainState::load_dir(dir.path()).unwrap(), s);
    }
}
