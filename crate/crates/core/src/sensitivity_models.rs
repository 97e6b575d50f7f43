//! Per-asset models on the common drivers and their input sensitivities.
//!
//! A sensitivity is the partial derivative of an asset's predicted return with
//! respect to each driver. Linear models give constant betas; feed-forward
//! networks give one gradient per row, computed by reverse-mode
//! backpropagation and then aggregated.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{least_squares, median, with_intercept};
use crate::market_data::{lagged_window, ReturnPanel, WindowSpec};
use crate::par;
use crate::rng::{derive_seed, NormalStream};

/// Minimum number of rows accepted by [`fit_network`].
pub const MIN_NETWORK_ROWS: usize = 10;

/// Pair `y[t]` with `drivers[t - lag]`.
fn lag_align(asset: &[f64], drivers: &DMatrix<f64>, lag: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let t = asset.len();
    if drivers.nrows() != t {
        return Err(Error::ShapeMismatch(format!("asset has {t} rows, drivers {}", drivers.nrows())));
    }
    if lag >= t {
        return Err(Error::InsufficientHistory { needed: lag + 1, available: t });
    }
    let y = asset[lag..].to_vec();
    let x = drivers.rows(0, t - lag).into_owned();
    Ok((y, x))
}

fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    (pred.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

/// Anything that maps a driver row to a predicted return and its input gradient.
pub trait SensitivityModel {
    fn n_inputs(&self) -> usize;
    fn predict(&self, x: &[f64]) -> f64;
    fn input_gradient(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSensitivityModel {
    pub intercept: f64,
    pub betas: Vec<f64>,
    /// Residual variance with `T - m - 1` degrees of freedom.
    pub residual_variance: f64,
    pub standard_errors: Vec<f64>,
    pub rmse: f64,
    pub n_obs: usize,
}

impl SensitivityModel for LinearSensitivityModel {
    fn n_inputs(&self) -> usize {
        self.betas.len()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.betas.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    fn input_gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.betas.clone()
    }
}

/// OLS with intercept of `asset[t]` on `drivers[t - lag]`.
pub fn fit_linear(asset: &[f64], drivers: &DMatrix<f64>, lag: usize) -> Result<LinearSensitivityModel> {
    let (y, x) = lag_align(asset, drivers, lag)?;
    let m = x.ncols();
    let t = y.len();
    if t < m + 2 {
        return Err(Error::InsufficientHistory { needed: m + 2 + lag, available: asset.len() });
    }
    let design = with_intercept(&x);
    let target = DVector::from_vec(y.clone());
    let beta = least_squares(&design, &target, 0.0, 1e-10)?;
    let fitted = &design * &beta;
    let pred: Vec<f64> = fitted.iter().copied().collect();
    let ssr: f64 = pred.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum();
    let dof = (t - m - 1).max(1) as f64;
    let residual_variance = ssr / dof;
    let gram = design.transpose() * &design;
    let standard_errors = match gram.try_inverse() {
        Some(inv) => (1..=m).map(|j| (residual_variance * inv[(j, j)]).max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; m],
    };
    Ok(LinearSensitivityModel {
        intercept: beta[0],
        betas: beta.iter().skip(1).copied().collect(),
        residual_variance,
        standard_errors,
        rmse: rmse(&pred, &y),
        n_obs: t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Hidden layer widths; input width is the driver count and the output is scalar.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { hidden: vec![16], activation: Activation::Tanh, seed: 0, epochs: 500, learning_rate: 1e-2, batch_size: 32 }
    }
}

impl NetworkSpec {
    /// Hidden layers in {1, 2} by widths in {8, 16, 32}, sharing the other settings.
    pub fn default_grid(&self) -> Vec<NetworkSpec> {
        let mut out = Vec::new();
        for layers in [1usize, 2] {
            for width in [8usize, 16, 32] {
                out.push(NetworkSpec { hidden: vec![width; layers], ..self.clone() });
            }
        }
        out
    }

    pub fn label(&self) -> String {
        let widths: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        format!("{:?}[{}]", self.activation, widths.join("x")).to_lowercase()
    }

    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidInput("network needs at least one non-empty hidden layer".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("epochs, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Trained feed-forward network with input and target standardization baked in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    /// `weights[l]` is `out × in`; the last layer has one output row.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

impl Network {
    /// Network from explicit parameters and no standardization.
    pub fn from_parts(spec: NetworkSpec, weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.len() != biases.len() || weights.is_empty() {
            return Err(Error::ShapeMismatch("one bias per weight matrix required".into()));
        }
        for l in 0..weights.len() {
            if weights[l].nrows() != biases[l].len() || (l > 0 && weights[l].ncols() != weights[l - 1].nrows()) {
                return Err(Error::ShapeMismatch(format!("layer {l} dimensions do not chain")));
            }
        }
        if weights.last().map(|w| w.nrows()) != Some(1) {
            return Err(Error::ShapeMismatch("output layer must be scalar".into()));
        }
        let m = weights[0].ncols();
        Ok(Self { spec, weights, biases, x_mean: vec![0.0; m], x_scale: vec![1.0; m], y_mean: 0.0, y_scale: 1.0 })
    }

    fn init(spec: &NetworkSpec, m: usize) -> Self {
        let mut widths = vec![m];
        widths.extend(&spec.hidden);
        widths.push(1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = NormalStream::new(derive_seed(spec.seed, "init"), l as u64);
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| (2.0 * rng.uniform() - 1.0) * limit));
            biases.push(DVector::zeros(fan_out));
        }
        Self {
            spec: spec.clone(),
            weights,
            biases,
            x_mean: vec![0.0; m],
            x_scale: vec![1.0; m],
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            Activation::Identity
        } else {
            self.spec.activation
        }
    }

    /// Pre-activations of every layer for a batch of standardized rows (batch × width).
    fn forward_batch(&self, xs: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut zs = Vec::with_capacity(self.n_layers());
        let mut a = xs.clone();
        for l in 0..self.n_layers() {
            let mut z = &a * self.weights[l].transpose();
            for mut row in z.row_iter_mut() {
                row += self.biases[l].transpose();
            }
            let act = self.activation_of(l);
            a = z.map(|v| act.apply(v));
            zs.push(z);
        }
        zs
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.x_mean.iter().zip(&self.x_scale)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    /// Predictions for every row of `x` (original units).
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let xs = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.x_mean[c]) / self.x_scale[c]);
        let zs = self.forward_batch(&xs);
        zs.last().map(|z| z.iter().map(|v| self.y_mean + self.y_scale * v).collect()).unwrap_or_default()
    }

    /// Mean squared error on standardized data and its parameter gradients.
    fn loss_and_grads(&self, xs: &DMatrix<f64>, ys: &[f64]) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let b = xs.nrows() as f64;
        let zs = self.forward_batch(xs);
        let out = zs.last().expect("network has layers");
        let err = DMatrix::from_fn(out.nrows(), 1, |r, _| out[(r, 0)] - ys[r]);
        let loss = err.norm_squared() / b;
        let mut delta = err * (2.0 / b);
        let mut gw = vec![DMatrix::zeros(0, 0); self.n_layers()];
        let mut gb = vec![DVector::zeros(0); self.n_layers()];
        for l in (0..self.n_layers()).rev() {
            let act = self.activation_of(l);
            let dz = delta.zip_map(&zs[l], |d, z| d * act.derivative(z));
            let input = if l == 0 {
                xs.clone()
            } else {
                let prev = self.activation_of(l - 1);
                zs[l - 1].map(|v| prev.apply(v))
            };
            gw[l] = dz.transpose() * input;
            gb[l] = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
            delta = dz * &self.weights[l];
        }
        (loss, gw, gb)
    }

    /// Reverse-mode gradient of the scalar output with respect to the standardized inputs.
    fn standardized_gradient(&self, xs: &[f64]) -> Vec<f64> {
        let row = DMatrix::from_row_slice(1, xs.len(), xs);
        let zs = self.forward_batch(&row);
        let mut delta = DMatrix::from_element(1, 1, 1.0);
        for l in (0..self.n_layers()).rev() {
            let act = self.activation_of(l);
            let dz = delta.zip_map(&zs[l], |d, z| d * act.derivative(z));
            delta = dz * &self.weights[l];
        }
        delta.iter().copied().collect()
    }
}

impl SensitivityModel for Network {
    fn n_inputs(&self) -> usize {
        self.x_mean.len()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        let xs = self.standardize(x);
        let zs = self.forward_batch(&DMatrix::from_row_slice(1, xs.len(), &xs));
        self.y_mean + self.y_scale * zs.last().map_or(0.0, |z| z[(0, 0)])
    }

    /// Gradient in original units: `∂y/∂x_j = (σ_y / σ_xj) ∂ŷ/∂x̃_j`.
    fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        let g = self.standardized_gradient(&self.standardize(x));
        g.iter().zip(&self.x_scale).map(|(gi, s)| gi * self.y_scale / s).collect()
    }
}

fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let scales = x
        .column_iter()
        .zip(&means)
        .map(|(c, m)| {
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (means, scales)
}

/// Train on already lag-aligned rows by mini-batch gradient descent.
pub fn train_network(y: &[f64], x: &DMatrix<f64>, spec: &NetworkSpec) -> Result<Network> {
    spec.validate()?;
    if y.len() != x.nrows() {
        return Err(Error::ShapeMismatch(format!("{} targets vs {} driver rows", y.len(), x.nrows())));
    }
    if y.len() < MIN_NETWORK_ROWS {
        return Err(Error::InsufficientHistory { needed: MIN_NETWORK_ROWS, available: y.len() });
    }
    let mut net = Network::init(spec, x.ncols());
    let (x_mean, x_scale) = column_moments(x);
    let ycol = DMatrix::from_column_slice(y.len(), 1, y);
    let (y_mean, y_scale) = column_moments(&ycol);
    net.x_mean = x_mean;
    net.x_scale = x_scale;
    net.y_mean = y_mean[0];
    net.y_scale = y_scale[0];
    let xs = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - net.x_mean[c]) / net.x_scale[c]);
    let ys: Vec<f64> = y.iter().map(|v| (v - net.y_mean) / net.y_scale).collect();

    let mut order: Vec<usize> = (0..ys.len()).collect();
    let mut shuffler = NormalStream::new(derive_seed(spec.seed, "batches"), 0);
    for _ in 0..spec.epochs {
        shuffler.shuffle(&mut order);
        for chunk in order.chunks(spec.batch_size) {
            let bx = DMatrix::from_fn(chunk.len(), xs.ncols(), |r, c| xs[(chunk[r], c)]);
            let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let (loss, gw, gb) = net.loss_and_grads(&bx, &by);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { spec: spec.label() });
            }
            for l in 0..net.n_layers() {
                net.weights[l] -= &gw[l] * spec.learning_rate;
                net.biases[l] -= &gb[l] * spec.learning_rate;
            }
        }
    }
    let pred = net.predict_rows(x);
    if pred.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss { spec: spec.label() });
    }
    Ok(net)
}

/// Train a network for `asset[t]` on `drivers[t - lag]`.
pub fn fit_network(asset: &[f64], drivers: &DMatrix<f64>, lag: usize, spec: &NetworkSpec) -> Result<Network> {
    let (y, x) = lag_align(asset, drivers, lag)?;
    train_network(&y, &x, spec)
}

/// Winner of the architecture search and where its validation rows start.
#[derive(Debug, Clone)]
pub struct GridFit {
    pub network: Network,
    pub validation_rmse: f64,
    pub train_rmse: f64,
    /// Row index (after lag alignment) of the first validation row.
    pub split: usize,
    /// Validation RMSE of every grid entry, in grid order.
    pub scores: Vec<(String, f64)>,
}

/// Fit every spec on the first 80% of rows and keep the lowest validation RMSE.
/// Ties keep the earlier grid entry.
pub fn fit_network_grid(asset: &[f64], drivers: &DMatrix<f64>, lag: usize, grid: &[NetworkSpec]) -> Result<GridFit> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty architecture grid".into()));
    }
    let (y, x) = lag_align(asset, drivers, lag)?;
    let split = (y.len() * 4) / 5;
    if split < MIN_NETWORK_ROWS || split == y.len() {
        return Err(Error::InsufficientHistory { needed: MIN_NETWORK_ROWS * 5 / 4 + 1, available: y.len() });
    }
    let (ytr, yva) = y.split_at(split);
    let xtr = x.rows(0, split).into_owned();
    let xva = x.rows(split, y.len() - split).into_owned();
    let mut best: Option<GridFit> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for spec in grid {
        let net = train_network(ytr, &xtr, spec)?;
        let v = rmse(&net.predict_rows(&xva), yva);
        scores.push((spec.label(), v));
        if best.as_ref().is_none_or(|b| v < b.validation_rmse) {
            let train_rmse = rmse(&net.predict_rows(&xtr), ytr);
            best = Some(GridFit { network: net, validation_rmse: v, train_rmse, split, scores: vec![] });
        }
    }
    let mut out = best.expect("grid is non-empty");
    out.scores = scores;
    Ok(out)
}

/// Per-row input gradients (rows × m).
pub fn input_gradients<M: SensitivityModel + ?Sized>(model: &M, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if inputs.ncols() != model.n_inputs() {
        return Err(Error::ShapeMismatch(format!("{} inputs, model expects {}", inputs.ncols(), model.n_inputs())));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite driver value".into()));
    }
    let mut out = DMatrix::zeros(inputs.nrows(), inputs.ncols());
    for r in 0..inputs.nrows() {
        let row: Vec<f64> = inputs.row(r).iter().copied().collect();
        for (j, g) in model.input_gradient(&row).into_iter().enumerate() {
            out[(r, j)] = g;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

pub fn aggregate_sensitivities(gradients: &DMatrix<f64>, aggregation: Aggregation) -> Result<Vec<f64>> {
    if gradients.nrows() == 0 {
        return Err(Error::InvalidInput("no gradient rows to aggregate".into()));
    }
    Ok(gradients
        .column_iter()
        .map(|c| match aggregation {
            Aggregation::Mean => c.mean(),
            Aggregation::Median => median(c.as_slice()),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Linear,
    Network,
}

/// Which rows the network gradients are evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub model: ModelKind,
    pub lag: usize,
    pub aggregation: Aggregation,
    pub scope: Scope,
    pub network: NetworkSpec,
    /// Architectures searched for network models; empty means the default grid.
    pub grid: Vec<NetworkSpec>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Linear,
            lag: 0,
            aggregation: Aggregation::Mean,
            scope: Scope::In,
            network: NetworkSpec::default(),
            grid: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    pub assets: Vec<String>,
    pub drivers: Vec<String>,
    pub values: DMatrix<f64>,
    pub aggregation: Aggregation,
    pub source: ModelKind,
    pub window: Option<WindowSpec>,
}

impl SensitivityMatrix {
    pub fn new(assets: Vec<String>, drivers: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != (assets.len(), drivers.len()) {
            return Err(Error::ShapeMismatch(format!(
                "values are {:?}, expected {}x{}",
                values.shape(),
                assets.len(),
                drivers.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("sensitivities must be finite".into()));
        }
        Ok(Self { assets, drivers, values, aggregation: Aggregation::Mean, source: ModelKind::Linear, window: None })
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// CSV with an `asset` column followed by one column per driver.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| Error::Csv { path: "<sensitivities>".into(), reason: e.to_string() };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["asset".to_string()];
        header.extend(self.drivers.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (i, a) in self.assets.iter().enumerate() {
            let mut rec = vec![a.clone()];
            rec.extend(self.values.row(i).iter().map(|v| format!("{v:.17e}")));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Io { path: "<sensitivities>".into(), source: e })
    }

    pub fn read_csv<R: Read>(input: R, label: &str) -> Result<Self> {
        let err = |reason: String| Error::Csv { path: label.to_string(), reason };
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| err(e.to_string()))?.clone();
        let drivers: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut assets = Vec::new();
        let mut vals = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            assets.push(rec.get(0).unwrap_or_default().to_string());
            for cell in rec.iter().skip(1) {
                vals.push(cell.trim().parse::<f64>().map_err(|e| err(format!("`{cell}`: {e}")))?);
            }
        }
        if vals.len() != assets.len() * drivers.len() {
            return Err(err("ragged rows".into()));
        }
        Self::new(assets.clone(), drivers.clone(), DMatrix::from_row_slice(assets.len(), drivers.len(), &vals))
    }
}

/// Fit summary for one asset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetReport {
    pub asset: String,
    pub model: String,
    /// Validation RMSE for networks, in-sample RMSE for linear fits.
    pub rmse: f64,
    pub train_rmse: f64,
    pub sensitivities: Vec<f64>,
}

fn asset_sensitivity(
    name: &str,
    asset: &[f64],
    drivers: &DMatrix<f64>,
    cfg: &SensitivityConfig,
    grid: &[NetworkSpec],
) -> Result<AssetReport> {
    match cfg.model {
        ModelKind::Linear => {
            let fit = fit_linear(asset, drivers, 0)?;
            Ok(AssetReport {
                asset: name.to_string(),
                model: "linear".into(),
                rmse: fit.rmse,
                train_rmse: fit.rmse,
                sensitivities: fit.betas,
            })
        }
        ModelKind::Network => {
            let fit = fit_network_grid(asset, drivers, 0, grid)?;
            let x = drivers;
            let rows = match cfg.scope {
                Scope::In => x.rows(0, fit.split).into_owned(),
                Scope::Out => x.rows(fit.split, x.nrows() - fit.split).into_owned(),
            };
            let grads = input_gradients(&fit.network, &rows)?;
            Ok(AssetReport {
                asset: name.to_string(),
                model: fit.network.spec.label(),
                rmse: fit.validation_rmse,
                train_rmse: fit.train_rmse,
                sensitivities: aggregate_sensitivities(&grads, cfg.aggregation)?,
            })
        }
    }
}

/// Sensitivities of every asset to every driver over `window` (or the full panels).
///
/// The lag comes from `cfg.lag`; any lag stored in `window` is ignored. Drivers
/// are taken `lag` rows earlier than the target rows.
pub fn estimate_sensitivities(
    assets: &ReturnPanel,
    drivers: &ReturnPanel,
    window: Option<&WindowSpec>,
    cfg: &SensitivityConfig,
) -> Result<(SensitivityMatrix, Vec<AssetReport>)> {
    if assets.dates() != drivers.dates() {
        return Err(Error::ShapeMismatch("asset and driver panels must share a date index".into()));
    }
    // Rows already paired so that driver row r precedes target row r by `lag`.
    let (targets, driver_rows) = match window {
        Some(w) => {
            let lw = lagged_window(drivers, assets, &WindowSpec { lag: cfg.lag, ..*w })?;
            (lw.targets.values().clone(), lw.drivers.values().clone())
        }
        None => {
            assets.ensure_complete()?;
            drivers.ensure_complete()?;
            let t = assets.n_rows();
            if cfg.lag >= t {
                return Err(Error::InsufficientHistory { needed: cfg.lag + 1, available: t });
            }
            (assets.values().rows(cfg.lag, t - cfg.lag).into_owned(), drivers.values().rows(0, t - cfg.lag).into_owned())
        }
    };
    let grid = if cfg.grid.is_empty() { cfg.network.default_grid() } else { cfg.grid.clone() };
    let reports = par::try_map_range(assets.n_cols(), |i| {
        let col: Vec<f64> = targets.column(i).iter().copied().collect();
        asset_sensitivity(&assets.names()[i], &col, &driver_rows, cfg, &grid)
    })?;
    let values = DMatrix::from_fn(assets.n_cols(), drivers.n_cols(), |i, j| reports[i].sensitivities[j]);
    let mut sm = SensitivityMatrix::new(assets.names().to_vec(), drivers.names().to_vec(), values)?;
    sm.aggregation = cfg.aggregation;
    sm.source = cfg.model;
    sm.window = window.map(|w| WindowSpec { lag: cfg.lag, ..*w });
    Ok((sm, reports))
}
