//! Latent-interaction graph over the 2C audio/visual class nodes: inference
//! from teacher logits, cross-checkpoint edge frequencies and stability
//! filtering, plus CSV/SVG export.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grasp::{grasp_search_from, initial_orderings, Ordering, DEFAULT_RESTARTS};
use crate::linalg::{format_real, lasso_fit, standardize_columns, DenseMatrix};

pub const DEFAULT_LAMBDA_REG: f64 = 0.01;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_MIN_FREQ: f64 = 5.0 / 7.0;

const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn suffix(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// Modality and class of node `node` in a graph over `classes` classes.
pub fn node_class(node: usize, classes: usize) -> (Modality, usize) {
    if node < classes {
        (Modality::Audio, node)
    } else {
        (Modality::Visual, node - classes)
    }
}

/// `<class>_audio` for the first C nodes, `<class>_visual` for the rest.
pub fn node_labels(class_names: &[String]) -> Vec<String> {
    [Modality::Audio, Modality::Visual]
        .iter()
        .flat_map(|m| class_names.iter().map(move |c| format!("{c}_{}", m.suffix())))
        .collect()
}

/// Default class names `class0`, `class1`, ...
pub fn default_class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class{c}")).collect()
}

fn class_names_from_labels(labels: &[String]) -> Result<Vec<String>> {
    if labels.len() % 2 != 0 {
        return Err(Error::Dimension(format!("{} node labels is not an even count", labels.len())));
    }
    let c = labels.len() / 2;
    let mut names = Vec::with_capacity(c);
    for (i, l) in labels[..c].iter().enumerate() {
        let base = l.strip_suffix("_audio").ok_or_else(|| {
            Error::Argument(format!("label {l:?} should end in _audio"))
        })?;
        let expected = format!("{base}_visual");
        if labels[c + i] != expected {
            return Err(Error::Argument(format!(
                "label {:?} should be {expected:?}",
                labels[c + i]
            )));
        }
        names.push(base.to_string());
    }
    Ok(names)
}

/// Teacher logits for N clips: columns are the C audio classes followed by
/// the C visual classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    data: DenseMatrix,
    class_names: Vec<String>,
}

impl LogitsMatrix {
    pub fn new(data: DenseMatrix, class_names: Vec<String>) -> Result<Self> {
        if data.cols() != 2 * class_names.len() {
            return Err(Error::Dimension(format!(
                "logits have {} columns but {} classes need {}",
                data.cols(),
                class_names.len(),
                2 * class_names.len()
            )));
        }
        Ok(Self { data, class_names })
    }

    /// Concatenates audio and visual logits (both N×C).
    pub fn from_parts(audio: &DenseMatrix, visual: &DenseMatrix, class_names: Vec<String>) -> Result<Self> {
        if audio.shape() != visual.shape() {
            return Err(Error::Dimension("audio and visual logits differ in shape".into()));
        }
        let c = audio.cols();
        let data = DenseMatrix::from_fn(audio.rows(), 2 * c, |r, k| {
            if k < c {
                audio.get(r, k)
            } else {
                visual.get(r, k - c)
            }
        });
        Self::new(data, class_names)
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.data
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.data.save_csv(path, Some(&node_labels(&self.class_names)))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let (header, data) = DenseMatrix::load_csv(path)?;
        let names = match header {
            Some(h) => class_names_from_labels(&h)?,
            None => {
                if data.cols() % 2 != 0 {
                    return Err(Error::format(path, "odd number of logit columns"));
                }
                default_class_names(data.cols() / 2)
            }
        };
        Self::new(data, names)
    }
}

/// Nonnegative directed adjacency over 2C nodes with zero diagonal and unit
/// L1 mass (or identically zero).
#[derive(Debug, Clone, PartialEq)]
pub struct IliGraph {
    adjacency: DenseMatrix,
    class_names: Vec<String>,
}

impl IliGraph {
    pub fn zero(class_names: Vec<String>) -> Self {
        let p = 2 * class_names.len();
        Self {
            adjacency: DenseMatrix::zeros(p, p),
            class_names,
        }
    }

    /// Zeroes the diagonal and rescales to unit L1 mass.
    pub fn from_weights(mut weights: DenseMatrix, class_names: Vec<String>) -> Result<Self> {
        let p = 2 * class_names.len();
        if weights.shape() != (p, p) {
            return Err(Error::Dimension(format!(
                "adjacency must be {p}x{p}, got {}x{}",
                weights.rows(),
                weights.cols()
            )));
        }
        if weights.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Argument("adjacency weights must be finite and nonnegative".into()));
        }
        for i in 0..p {
            weights.set(i, i, 0.0);
        }
        let mass = weights.abs_sum();
        if mass > 0.0 {
            weights.scale(1.0 / mass);
        }
        Ok(Self {
            adjacency: weights,
            class_names,
        })
    }

    /// Wraps an already normalized adjacency without rescaling it.
    pub(crate) fn from_normalized(adjacency: DenseMatrix, class_names: Vec<String>) -> Result<Self> {
        let p = 2 * class_names.len();
        if adjacency.shape() != (p, p) {
            return Err(Error::Dimension(format!("adjacency must be {p}x{p}")));
        }
        let g = IliGraph {
            adjacency,
            class_names,
        };
        g.check_invariants()?;
        Ok(g)
    }

    pub fn adjacency(&self) -> &DenseMatrix {
        &self.adjacency
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_nodes(&self) -> usize {
        2 * self.class_names.len()
    }

    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.adjacency.get(from, to)
    }

    pub fn is_zero(&self) -> bool {
        self.adjacency.as_slice().iter().all(|&v| v == 0.0)
    }

    /// Nonzero entries `(from, to, weight)` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let p = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..p {
            for j in 0..p {
                let w = self.adjacency.get(i, j);
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn edge_set(&self) -> Vec<(usize, usize)> {
        self.edges().into_iter().map(|(i, j, _)| (i, j)).collect()
    }

    /// Checks nonnegativity, zero diagonal and unit mass.
    pub fn check_invariants(&self) -> Result<()> {
        let p = self.num_nodes();
        for i in 0..p {
            if self.adjacency.get(i, i) != 0.0 {
                return Err(Error::Argument(format!("diagonal entry {i} is nonzero")));
            }
        }
        if self.adjacency.as_slice().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Argument("negative or non-finite adjacency entry".into()));
        }
        if !self.is_zero() && (self.adjacency.sum() - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Argument(format!(
                "adjacency mass {} is not 1",
                self.adjacency.sum()
            )));
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        labeled_matrix_csv(&self.adjacency, &node_labels(&self.class_names))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (labels, m) = parse_labeled_matrix(&text).map_err(|e| match e {
            Error::Parse { line, message } => {
                Error::format(path, format!("line {line}: {message}"))
            }
            other => other,
        })?;
        let names = class_names_from_labels(&labels)?;
        let g = IliGraph {
            adjacency: m,
            class_names: names,
        };
        g.check_invariants()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(g)
    }
}

fn labeled_matrix_csv(m: &DenseMatrix, labels: &[String]) -> String {
    let mut s = String::from("node");
    for l in labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (r, l) in labels.iter().enumerate() {
        s.push_str(l);
        for v in m.row(r) {
            s.push(',');
            s.push_str(&format_real(*v));
        }
        s.push('\n');
    }
    s
}

fn parse_labeled_matrix(text: &str) -> Result<(Vec<String>, DenseMatrix)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
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
    let labels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let p = labels.len();
    let mut rows = Vec::with_capacity(p);
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != p + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", p + 1, rec.len()),
            });
        }
        if rec[0].trim() != labels.get(idx).map(String::as_str).unwrap_or("") {
            return Err(Error::Parse {
                line,
                message: format!("row label {:?} does not match the header", &rec[0]),
            });
        }
        let vals: std::result::Result<Vec<f64>, _> =
            rec.iter().skip(1).map(|s| s.trim().parse::<f64>()).collect();
        rows.push(vals.map_err(|e| Error::Parse {
            line,
            message: format!("non-numeric cell: {e}"),
        })?);
    }
    if rows.len() != p {
        return Err(Error::Parse {
            line: rows.len() + 2,
            message: format!("expected {p} rows, found {}", rows.len()),
        });
    }
    Ok((labels, DenseMatrix::from_rows(&rows)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IliOptions {
    pub lambda_reg: f64,
    pub restarts: usize,
    pub seed: u64,
    pub penalty: f64,
}

impl Default for IliOptions {
    fn default() -> Self {
        Self {
            lambda_reg: DEFAULT_LAMBDA_REG,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            penalty: 1.0,
        }
    }
}

/// Standardize → structure search → nodewise lasso weights on the selected
/// parents → zero diagonal → unit L1 mass.
pub fn infer_ili(logits: &LogitsMatrix, lambda_reg: f64, restarts: usize, seed: u64) -> Result<IliGraph> {
    infer_ili_with(
        logits,
        &IliOptions {
            lambda_reg,
            restarts,
            seed,
            ..IliOptions::default()
        },
    )
}

pub fn infer_ili_with(logits: &LogitsMatrix, opts: &IliOptions) -> Result<IliGraph> {
    let starts = initial_orderings(logits.data.cols(), opts.restarts, opts.seed);
    infer_ili_from(logits, starts, opts.lambda_reg, opts.penalty)
}

/// As [`infer_ili`], searching from explicit initial orderings.
pub fn infer_ili_from(
    logits: &LogitsMatrix,
    starts: Vec<Ordering>,
    lambda_reg: f64,
    penalty: f64,
) -> Result<IliGraph> {
    let (n, p) = logits.data.shape();
    if n <= p + 2 {
        return Err(Error::InsufficientData(format!(
            "graph inference over {p} logit columns needs more than {} clips, got {n}",
            p + 2
        )));
    }
    if !(lambda_reg >= 0.0) {
        return Err(Error::Argument(format!("lambda_reg must be >= 0, got {lambda_reg}")));
    }
    let standardized = standardize_columns(&logits.data)?;
    let search = grasp_search_from(&standardized, starts, penalty)?;
    let mut weights = DenseMatrix::zeros(p, p);
    for child in 0..p {
        let parents = search.parent_sets.of(child);
        if parents.is_empty() {
            continue;
        }
        let x = standardized.select_columns(parents);
        let fit = lasso_fit(&x, &standardized.column(child), lambda_reg)?;
        for (&parent, beta) in parents.iter().zip(&fit.coefficients) {
            weights.set(parent, child, beta.abs());
        }
    }
    let graph = IliGraph::from_weights(weights, logits.class_names.clone())?;
    if graph.is_zero() {
        log::warn!("inferred interaction graph is empty; the regularizer will be inactive");
    }
    Ok(graph)
}

/// Fraction of checkpoints in which each directed edge exceeds `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMatrix {
    pub freq: DenseMatrix,
    pub checkpoints: usize,
    pub epsilon: f64,
    pub class_names: Vec<String>,
}

impl FrequencyMatrix {
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.freq.get(from, to)
    }

    pub fn to_csv_string(&self) -> String {
        labeled_matrix_csv(&self.freq, &node_labels(&self.class_names))
    }

    /// Heatmap as an SVG grid, one `rect` per cell.
    pub fn to_svg(&self) -> String {
        heatmap_svg(&self.freq, &node_labels(&self.class_names))
    }
}

pub fn edge_frequency(graphs: &[IliGraph], epsilon: f64) -> Result<FrequencyMatrix> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::Argument("edge frequency needs at least one graph".into()))?;
    if !(epsilon >= 0.0) {
        return Err(Error::Argument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let p = first.num_nodes();
    for g in graphs {
        if g.class_names != first.class_names {
            return Err(Error::Dimension(
                "graphs disagree on dimensions or class ordering".into(),
            ));
        }
    }
    let t = graphs.len();
    let freq = DenseMatrix::from_fn(p, p, |i, j| {
        let count = graphs.iter().filter(|g| g.weight(i, j) > epsilon).count();
        count as f64 / t as f64
    });
    Ok(FrequencyMatrix {
        freq,
        checkpoints: t,
        epsilon,
        class_names: first.class_names.clone(),
    })
}

/// Drops edges of `base` whose frequency is below `min_freq` and
/// renormalizes the survivors.
pub fn stable_edges(freq: &FrequencyMatrix, base: &IliGraph, min_freq: f64) -> Result<IliGraph> {
    if freq.freq.shape() != base.adjacency.shape() {
        return Err(Error::Dimension(
            "frequency matrix and graph differ in shape".into(),
        ));
    }
    let mut w = base.adjacency.clone();
    let p = base.num_nodes();
    for i in 0..p {
        for j in 0..p {
            if freq.get(i, j) < min_freq {
                w.set(i, j, 0.0);
            }
        }
    }
    IliGraph::from_weights(w, base.class_names.clone())
}

/// Renders a [0,1]-valued matrix as a labeled SVG heatmap.
pub fn heatmap_svg(m: &DenseMatrix, labels: &[String]) -> String {
    let p = m.rows();
    let cell = 24usize;
    let margin = 140usize;
    let size = margin + p * cell + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="10">"#
    );
    for (i, l) in labels.iter().enumerate() {
        let y = margin + i * cell + cell / 2 + 3;
        let _ = writeln!(
            s,
            r#"<text class="label" x="{}" y="{y}" text-anchor="end">{}</text>"#,
            margin - 4,
            escape(l)
        );
        let x = margin + i * cell + cell / 2;
        let _ = writeln!(
            s,
            r#"<text class="label" x="{x}" y="{}" text-anchor="start" transform="rotate(-60 {x} {})">{}</text>"#,
            margin - 4,
            margin - 4,
            escape(l)
        );
    }
    for i in 0..p {
        for j in 0..m.cols() {
            let v = m.get(i, j).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb(255,{shade},{shade})" stroke="#ccc"><title>{} -> {}: {:.3}</title></rect>"##,
                margin + j * cell,
                margin + i * cell,
                escape(&labels[i]),
                escape(&labels[j]),
                v
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn names(c: usize) -> Vec<String> {
        default_class_names(c)
    }

    fn noise_logits(n: usize, c: usize, seed: u64) -> LogitsMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DenseMatrix::from_fn(n, 2 * c, |_, _| rng.sample(StandardNormal));
        LogitsMatrix::new(m, names(c)).unwrap()
    }

    fn single_edge(w: f64, c: usize, from: usize, to: usize) -> IliGraph {
        let mut m = DenseMatrix::zeros(2 * c, 2 * c);
        m.set(from, to, w);
        IliGraph::from_weights(m, names(c)).unwrap()
    }

    #[test]
    fn labels_are_audio_then_visual() {
        assert_eq!(
            node_labels(&["dog".to_string(), "car".to_string()]),
            vec!["dog_audio", "car_audio", "dog_visual", "car_visual"]
        );
        assert_eq!(node_class(3, 2), (Modality::Visual, 1));
    }

    #[test]
    fn independent_logits_give_zero_graph() {
        let g = infer_ili(&noise_logits(2000, 2, 5), DEFAULT_LAMBDA_REG, 4, 0).unwrap();
        assert!(g.is_zero());
        g.check_invariants().unwrap();
    }

    #[test]
    fn planted_dependency_gives_single_edge() {
        let base = noise_logits(2000, 2, 6);
        let mut m = base.data().clone();
        for r in 0..2000 {
            let v = 0.9 * m.get(r, 0) + 0.3 * m.get(r, 3);
            m.set(r, 3, v);
        }
        let logits = LogitsMatrix::new(m, names(2)).unwrap();
        let g = infer_ili(&logits, DEFAULT_LAMBDA_REG, 4, 1).unwrap();
        let edges = g.edges();
        assert_eq!(edges.len(), 1, "{edges:?}");
        let (i, j, w) = edges[0];
        assert!((i, j) == (0, 3) || (i, j) == (3, 0));
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inference_needs_enough_clips() {
        let err = infer_ili(&noise_logits(6, 2, 1), 0.01, 1, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn from_weights_zeroes_diagonal_and_normalizes() {
        let m = DenseMatrix::from_rows(&[[5.0, 1.0], [3.0, 7.0]]).unwrap();
        let g = IliGraph::from_weights(m, names(1)).unwrap();
        assert_eq!(g.weight(0, 0), 0.0);
        assert_eq!(g.weight(1, 1), 0.0);
        assert!((g.weight(0, 1) - 0.25).abs() < 1e-15);
        g.check_invariants().unwrap();
    }

    #[test]
    fn frequency_counts() {
        let on = single_edge(1.0, 1, 0, 1);
        let off = IliGraph::zero(names(1));
        let f = edge_frequency(&vec![on.clone(); 4], DEFAULT_EPSILON).unwrap();
        assert_eq!(f.get(0, 1), 1.0);
        assert_eq!(f.get(1, 0), 0.0);
        let mixed = vec![on.clone(), on.clone(), off.clone(), on.clone(), on.clone(), off, on];
        let f = edge_frequency(&mixed, DEFAULT_EPSILON).unwrap();
        assert_eq!(f.get(0, 1), 5.0 / 7.0);
        assert!((f.get(0, 1) - 0.714).abs() < 1e-3);
        assert_eq!(f.checkpoints, 7);
    }

    #[test]
    fn frequency_rejects_mismatch() {
        let a = IliGraph::zero(names(1));
        let b = IliGraph::zero(names(2));
        assert!(edge_frequency(&[a, b], 0.0).is_err());
        assert!(edge_frequency(&[], 0.0).is_err());
    }

    #[test]
    fn stable_edges_filters_and_renormalizes() {
        let mut m = DenseMatrix::zeros(4, 4);
        m.set(0, 2, 3.0);
        m.set(1, 3, 1.0);
        let base = IliGraph::from_weights(m, names(2)).unwrap();
        let f = edge_frequency(&[base.clone(), single_edge(1.0, 2, 0, 2)], 0.0).unwrap();
        let unchanged = stable_edges(&f, &base, 0.0).unwrap();
        assert_eq!(unchanged, base);
        let kept = stable_edges(&f, &base, 1.0).unwrap();
        assert_eq!(kept.edges(), vec![(0, 2, 1.0)]);
        let again = stable_edges(&f, &kept, 1.0).unwrap();
        assert_eq!(again, kept);
    }

    #[test]
    fn csv_round_trip() {
        let mut m = DenseMatrix::zeros(4, 4);
        m.set(0, 3, 0.3);
        m.set(2, 1, 0.7);
        let g = IliGraph::from_weights(m, vec!["dog".into(), "car".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.csv");
        g.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("node,dog_audio,car_audio,dog_visual,car_visual\n"));
        assert_eq!(IliGraph::load_csv(&path).unwrap(), g);
    }

    #[test]
    fn malformed_graph_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "node,a_audio,a_visual\na_audio,0,x\na_visual,0,0\n").unwrap();
        assert!(IliGraph::load_csv(&path).is_err());
    }

    #[test]
    fn svg_has_one_rect_per_cell() {
        let f = edge_frequency(&[single_edge(1.0, 3, 0, 4)], 0.0).unwrap();
        let svg = f.to_svg();
        assert_eq!(svg.matches("<rect class=\"cell\"").count(), 36);
    }
}
