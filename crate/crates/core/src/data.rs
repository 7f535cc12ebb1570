//! Datasets: the four synthetic regression tasks, CSV I/O, metadata sidecars.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, GENERATOR_VERSION};

/// Inputs and targets stored row by row. Class labels are stored as a single
/// target column holding the class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, seed: u64, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("dataset must have at least one row".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch { what: "target rows", expected: inputs.len(), found: targets.len() });
        }
        let d = inputs[0].len();
        let o = targets[0].len();
        if d == 0 || o == 0 {
            return Err(Error::InvalidArgument("inputs and targets need at least one column".into()));
        }
        for (x, y) in inputs.iter().zip(&targets) {
            if x.len() != d {
                return Err(Error::DimensionMismatch { what: "input row", expected: d, found: x.len() });
            }
            if y.len() != o {
                return Err(Error::DimensionMismatch { what: "target row", expected: o, found: y.len() });
            }
            if x.iter().chain(y).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("dataset contains a non-finite value".into()));
            }
        }
        Ok(Self { name: name.into(), seed, inputs, targets })
    }

    /// Convenience constructor for one-dimensional inputs and targets.
    pub fn from_scalars(name: impl Into<String>, seed: u64, xs: &[f64], ys: &[f64]) -> Result<Self> {
        Self::new(name, seed, xs.iter().map(|&x| vec![x]).collect(), ys.iter().map(|&y| vec![y]).collect())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn target_dim(&self) -> usize {
        self.targets[0].len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i]
    }

    /// Same inputs with every target replaced through `f(row_index, target_row)`.
    pub fn map_targets(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Result<Self> {
        let targets = self.targets.iter().enumerate().map(|(i, y)| f(i, y)).collect();
        Self::new(self.name.clone(), self.seed, self.inputs.clone(), targets)
    }

    /// Rows in the given order; used for permutation checks.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.seed,
            order.iter().map(|&i| self.inputs[i].clone()).collect(),
            order.iter().map(|&i| self.targets[i].clone()).collect(),
        )
    }

    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            name: self.name.clone(),
            seed: self.seed,
            n: self.len(),
            d: self.input_dim(),
            o: self.target_dim(),
            generator_version: GENERATOR_VERSION.to_string(),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.input_dim())
            .map(|i| format!("x_{i}"))
            .chain((0..self.target_dim()).map(|j| format!("y_{j}")))
            .collect();
        wr.write_record(&header).map_err(csv_to_io)?;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = x.iter().chain(y).map(|v| v.to_string()).collect();
            wr.write_record(&row).map_err(csv_to_io)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses `x_0,...,x_{d-1},y_0,...,y_{o-1}` CSV. Line numbers in errors are 1-based.
    pub fn read_csv<R: std::io::Read>(name: &str, seed: u64, r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut records = rd.records();
        let header = match records.next() {
            None => return Err(Error::Parse { line: 1, message: "empty file".into() }),
            Some(rec) => rec.map_err(|e| Error::Parse { line: 1, message: e.to_string() })?,
        };
        let (d, o) = parse_header(&header)?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (idx, rec) in records.enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            if rec.len() != d + o {
                return Err(Error::Parse { line, message: format!("expected {} fields, found {}", d + o, rec.len()) });
            }
            let mut vals = Vec::with_capacity(d + o);
            for field in rec.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse { line, message: format!("invalid number `{field}`") })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, message: format!("non-finite value `{field}`") });
                }
                vals.push(v);
            }
            targets.push(vals.split_off(d));
            inputs.push(vals);
        }
        if inputs.is_empty() {
            return Err(Error::Parse { line: 2, message: "no data rows".into() });
        }
        Self::new(name, seed, inputs, targets)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        Self::read_csv(name, 0, file)
    }
}

fn csv_to_io(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e))
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let mut d = 0;
    let mut o = 0;
    for field in header.iter() {
        let field = field.trim();
        if let Some(idx) = field.strip_prefix("x_") {
            if o > 0 || idx != d.to_string() {
                return Err(Error::Schema(format!("unexpected header field `{field}`")));
            }
            d += 1;
        } else if let Some(idx) = field.strip_prefix("y_") {
            if d == 0 || idx != o.to_string() {
                return Err(Error::Schema(format!("unexpected header field `{field}`")));
            }
            o += 1;
        } else {
            return Err(Error::Schema(format!("unexpected header field `{field}`")));
        }
    }
    if d == 0 || o == 0 {
        return Err(Error::Schema("header needs x_ and y_ columns".into()));
    }
    Ok((d, o))
}

/// JSON sidecar written next to exported CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub name: String,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub o: usize,
    pub generator_version: String,
}

/// The synthetic one-dimensional regression tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    QuadraticUniform,
    QuadraticInbetween,
    SinUniform,
    SinInbetween,
}

impl SyntheticTask {
    pub const ALL: [SyntheticTask; 4] = [
        SyntheticTask::QuadraticUniform,
        SyntheticTask::QuadraticInbetween,
        SyntheticTask::SinUniform,
        SyntheticTask::SinInbetween,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticTask::QuadraticUniform => "quadratic-uniform",
            SyntheticTask::QuadraticInbetween => "quadratic-inbetween",
            SyntheticTask::SinUniform => "sin-uniform",
            SyntheticTask::SinInbetween => "sin-inbetween",
        }
    }

    pub fn train_size(self) -> usize {
        match self {
            SyntheticTask::QuadraticUniform | SyntheticTask::QuadraticInbetween => 32,
            SyntheticTask::SinUniform | SyntheticTask::SinInbetween => 160,
        }
    }

    /// Noise-free response.
    pub fn mean_response(self, x: f64) -> f64 {
        match self {
            SyntheticTask::QuadraticUniform | SyntheticTask::QuadraticInbetween => x * x / 10.0 - x / 2.0 + 5.0,
            SyntheticTask::SinUniform | SyntheticTask::SinInbetween => -(3.0 * x - 0.3).sin(),
        }
    }

    /// Response with noise draw `eps ~ N(0, 1)` scaled by 1/10.
    pub fn response(self, x: f64, eps: f64) -> f64 {
        self.mean_response(x) + eps / 10.0
    }

    /// Draws `n` inputs from the task's input law.
    pub fn sample_inputs(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            SyntheticTask::QuadraticUniform => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            SyntheticTask::QuadraticInbetween => {
                let left = n / 2;
                let mut xs: Vec<f64> = (0..left).map(|_| rng.random_range(-2.0..-0.5)).collect();
                xs.extend((left..n).map(|_| rng.random_range(0.8..2.5)));
                xs
            }
            SyntheticTask::SinUniform => (0..n).map(|_| rng.random_range(-1.5..1.15)).collect(),
            SyntheticTask::SinInbetween => (0..n)
                .map(|_| if rng.random_bool(0.5) { rng.random_range(-1.5..-0.7) } else { rng.random_range(0.35..1.15) })
                .collect(),
        }
    }

    /// Training inputs: random draws, except Sin-Inbetween whose inputs are a fixed grid.
    pub fn train_inputs(self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            SyntheticTask::SinInbetween => {
                let per = 80;
                let left = (0..per).map(|i| -1.5 + 0.8 * i as f64 / per as f64);
                let right = (0..per).map(|i| 0.35 + 0.8 * i as f64 / per as f64);
                left.chain(right).collect()
            }
            _ => self.sample_inputs(self.train_size(), rng),
        }
    }

    pub fn noisy_targets(self, xs: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        xs.iter().map(|&x| self.response(x, rng.sample(StandardNormal))).collect()
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let task = match norm.as_str() {
            "quadratic-uniform" | "quadratic" => SyntheticTask::QuadraticUniform,
            "quadratic-inbetween" => SyntheticTask::QuadraticInbetween,
            "sin-uniform" | "sin" => SyntheticTask::SinUniform,
            "sin-inbetween" => SyntheticTask::SinInbetween,
            _ => return Err(Error::UnknownDataset(s.to_string())),
        };
        Ok(task)
    }
}

/// Train, validation, in-distribution test and out-of-distribution test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test_id: Dataset,
    pub test_ood: Dataset,
}

/// Points in the evenly spaced out-of-distribution grid.
pub const OOD_GRID_SIZE: usize = 200;

/// Generates all four splits for a task. Each split draws from its own stream.
pub fn gen_synthetic(task: SyntheticTask, seed: u64) -> Result<Splits> {
    let name = task.as_str();
    let mut rng = stream_rng(seed, 0);
    let train_x = task.train_inputs(&mut rng);
    let train_y = task.noisy_targets(&train_x, &mut rng);

    let n = train_x.len();
    let mut rng = stream_rng(seed, 1);
    let val_x = task.sample_inputs(n, &mut rng);
    let val_y = task.noisy_targets(&val_x, &mut rng);

    let mut rng = stream_rng(seed, 2);
    let id_x = task.sample_inputs(n, &mut rng);
    let id_y = task.noisy_targets(&id_x, &mut rng);

    let lo = train_x.iter().copied().fold(f64::INFINITY, f64::min) - 0.5;
    let hi = train_x.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.5;
    let ood_x: Vec<f64> = (0..OOD_GRID_SIZE).map(|i| lo + (hi - lo) * i as f64 / (OOD_GRID_SIZE - 1) as f64).collect();
    let mut rng = stream_rng(seed, 3);
    let ood_y = task.noisy_targets(&ood_x, &mut rng);

    Ok(Splits {
        train: Dataset::from_scalars(format!("{name}/train"), seed, &train_x, &train_y)?,
        val: Dataset::from_scalars(format!("{name}/val"), seed, &val_x, &val_y)?,
        test_id: Dataset::from_scalars(format!("{name}/test-id"), seed, &id_x, &id_y)?,
        test_ood: Dataset::from_scalars(format!("{name}/test-ood"), seed, &ood_x, &ood_y)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn responses_at_reference_points() {
        assert!((SyntheticTask::QuadraticUniform.response(2.0, 0.0) - 4.4).abs() < 1e-12);
        assert!(SyntheticTask::SinUniform.response(0.1, 0.0).abs() < 1e-15);
    }

    #[test]
    fn split_sizes() {
        for task in SyntheticTask::ALL {
            let s = gen_synthetic(task, 3).unwrap();
            assert_eq!(s.train.len(), task.train_size());
            assert_eq!(s.val.len(), task.train_size());
            assert_eq!(s.test_id.len(), task.train_size());
            assert_eq!(s.test_ood.len(), OOD_GRID_SIZE);
        }
    }

    #[test]
    fn inbetween_input_ranges() {
        let s = gen_synthetic(SyntheticTask::QuadraticInbetween, 1).unwrap();
        let xs: Vec<f64> = s.train.inputs().iter().map(|x| x[0]).collect();
        assert_eq!(xs.iter().filter(|&&x| (-2.0..-0.5).contains(&x)).count(), 16);
        assert_eq!(xs.iter().filter(|&&x| (0.8..2.5).contains(&x)).count(), 16);

        let s = gen_synthetic(SyntheticTask::SinInbetween, 1).unwrap();
        let xs: Vec<f64> = s.train.inputs().iter().map(|x| x[0]).collect();
        assert_eq!(xs.iter().filter(|&&x| (-1.5..-0.7).contains(&x)).count(), 80);
        assert_eq!(xs.iter().filter(|&&x| (0.35..1.15).contains(&x)).count(), 80);
        assert_eq!(xs[0], -1.5);
        assert!((xs[1] - xs[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        for task in SyntheticTask::ALL {
            assert_eq!(gen_synthetic(task, 42).unwrap(), gen_synthetic(task, 42).unwrap());
        }
        assert_ne!(
            gen_synthetic(SyntheticTask::SinUniform, 1).unwrap().train,
            gen_synthetic(SyntheticTask::SinUniform, 2).unwrap().train
        );
    }

    #[test]
    fn unknown_dataset_name() {
        assert!(matches!("mnist".parse::<SyntheticTask>(), Err(Error::UnknownDataset(_))));
        assert_eq!("Sin_Inbetween".parse::<SyntheticTask>().unwrap(), SyntheticTask::SinInbetween);
    }

    #[test]
    fn csv_fixture_and_errors() {
        let text = "x_0,x_1,y_0\n1.5,-2,0.25\n0,3e-2,1\n-7.125,4,2.5\n";
        let d = Dataset::read_csv("fixture", 0, text.as_bytes()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.input(0), &[1.5, -2.0]);
        assert_eq!(d.input(1), &[0.0, 0.03]);
        assert_eq!(d.target(2), &[2.5]);

        assert!(matches!(Dataset::read_csv("e", 0, "".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(Dataset::read_csv("e", 0, "x_0,y_0\n1,abc\n".as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(Dataset::read_csv("e", 0, "a,b\n1,2\n".as_bytes()), Err(Error::Schema(_))));
        assert!(matches!(Dataset::read_csv("e", 0, "y_0,x_0\n1,2\n".as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_round_trip() {
        let s = gen_synthetic(SyntheticTask::SinUniform, 8).unwrap();
        let mut buf = Vec::new();
        s.train.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(&s.train.name, s.train.seed, buf.as_slice()).unwrap();
        for (a, b) in s.train.inputs().iter().zip(back.inputs()) {
            assert!((a[0] - b[0]).abs() <= 1e-12);
        }
        for (a, b) in s.train.targets().iter().zip(back.targets()) {
            assert!((a[0] - b[0]).abs() <= 1e-12);
        }
    }
}
