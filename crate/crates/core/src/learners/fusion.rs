//! Middle-fusion network for the two nuisance functions.
//!
//! Each modality passes through its own dense encoder. The encoder outputs are
//! concatenated and mapped by the fusion layers to the embedding `H_E`, which
//! feeds two scalar linear heads `l_hat` and `m_hat`. Both heads share every
//! layer below them and are trained together on the product of their root mean
//! squared errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::model::SemiSynthDataset;
use crate::rng::{stream, tag};
use crate::scalar::Scalar;
use crate::stats::{mean, var_pop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn slope<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionArch {
    /// Hidden widths of each modality encoder; empty means the raw features
    /// go straight to the fusion layers.
    pub encoder_widths: Vec<usize>,
    /// Per-modality replacements for `encoder_widths`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_modality: BTreeMap<String, Vec<usize>>,
    /// Optional hidden layer between the concatenation and the embedding.
    #[serde(default)]
    pub fusion_width: Option<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl FusionArch {
    pub fn check(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("fusion: embedding_dim must be at least 1".into()));
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain(self.per_modality.values().flatten())
            .chain(self.fusion_width.iter());
        for &w in widths {
            if w == 0 {
                return Err(Error::Config("fusion: layer widths must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn encoder_for(&self, modality: &str) -> &[usize] {
        self.per_modality
            .get(modality)
            .map(Vec::as_slice)
            .unwrap_or(&self.encoder_widths)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochSelection {
    /// Keep the weights of the epoch with the smallest holdout combined loss.
    #[default]
    MinHoldoutLoss,
    Last,
}

fn default_one() -> f64 {
    1.0
}
fn default_validation() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub arch: FusionArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    #[serde(default = "default_one")]
    pub weight_init_scale: f64,
    #[serde(default)]
    pub selection: EpochSelection,
    /// Share of the training rows held back for epoch selection when
    /// `selection` is `min_holdout_loss`.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default = "default_true")]
    pub standardize_inputs: bool,
}

impl FusionParams {
    pub fn check(&self) -> Result<()> {
        self.arch.check()?;
        if self.epochs == 0 {
            return Err(Error::Config("fusion: epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("fusion: batch_size must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("fusion: step_size must be positive".into()));
        }
        if !(self.weight_init_scale >= 0.0) {
            return Err(Error::Config("fusion: weight_init_scale must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("fusion: validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Product of root mean squared errors of the two heads.
pub fn combined_loss<T: Scalar>(
    l_hat: ArrayView1<'_, T>,
    m_hat: ArrayView1<'_, T>,
    y: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
) -> T {
    head_rmse(l_hat, y) * head_rmse(m_hat, d)
}

fn head_rmse<T: Scalar>(pred: ArrayView1<'_, T>, target: ArrayView1<'_, T>) -> T {
    let n = T::from_usize_lossy(pred.len().max(1));
    let ss = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| (t - p) * (t - p))
        .sum::<T>();
    (ss / n).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar = f64> {
    /// `out x in`.
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    fn init(fan_in: usize, fan_out: usize, activation: Activation, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = scale / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| T::lit(rng.random_range(-1.0..=1.0) * bound));
        Self {
            w,
            b: Array1::zeros(fan_out),
            activation,
        }
    }

    fn forward(&self, input: ArrayView2<'_, T>) -> Array2<T> {
        let mut z = input.dot(&self.w.t());
        z += &self.b;
        let act = self.activation;
        z.mapv_inplace(|v| act.apply(v));
        z
    }

    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T: Scalar = f64> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

/// Holdout statistics recorded after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutRecord<T: Scalar = f64> {
    pub loss: T,
    pub rmse_l: T,
    pub rmse_m: T,
    pub l_hat: Array1<T>,
    pub m_hat: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<T: Scalar = f64> {
    /// 0 is the untrained initialization.
    pub epoch: usize,
    pub train_loss: T,
    pub holdout: Option<HoldoutRecord<T>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog<T: Scalar = f64> {
    pub epochs: Vec<EpochRecord<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet<T: Scalar = f64> {
    pub arch: FusionArch,
    pub modalities: Vec<String>,
    pub input_dims: Vec<usize>,
    /// Per-modality column centering and scaling applied before the encoders.
    pub input_shift: Vec<Array1<T>>,
    pub input_scale: Vec<Array1<T>>,
    pub encoders: Vec<Vec<Dense<T>>>,
    /// Fusion layers; the last one outputs `H_E`.
    pub fusion: Vec<Dense<T>>,
    /// `2 x E`; row 0 predicts `l`, row 1 predicts `m`.
    pub head: Dense<T>,
    pub selected_epoch: usize,
    pub log: TrainingLog<T>,
}

/// Layer inputs and outputs kept for back-propagation.
struct Trace<T: Scalar> {
    encoders: Vec<Vec<(Array2<T>, Array2<T>)>>,
    fusion: Vec<(Array2<T>, Array2<T>)>,
    out: Array2<T>,
}

impl<T: Scalar> FusionNet<T> {
    /// Freshly initialized network with identity input scaling.
    pub fn new(
        arch: &FusionArch,
        modalities: &[String],
        input_dims: &[usize],
        weight_init_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        arch.check()?;
        if modalities.is_empty() || modalities.len() != input_dims.len() {
            return Err(Error::Config("fusion: one input width per modality is required".into()));
        }
        if input_dims.contains(&0) {
            return Err(Error::Config("fusion: input blocks must have at least one column".into()));
        }
        let mut layer_index = 0u32;
        let mut next_rng = || {
            layer_index += 1;
            stream(seed, tag::INIT, layer_index, 0)
        };
        let act = arch.activation;
        let mut encoders = Vec::new();
        let mut concat_width = 0;
        for (m, &dim) in modalities.iter().zip(input_dims) {
            let mut layers = Vec::new();
            let mut fan_in = dim;
            for &w in arch.encoder_for(m) {
                layers.push(Dense::init(fan_in, w, act, weight_init_scale, &mut next_rng()));
                fan_in = w;
            }
            concat_width += fan_in;
            encoders.push(layers);
        }
        let mut fusion = Vec::new();
        let mut fan_in = concat_width;
        if let Some(w) = arch.fusion_width {
            fusion.push(Dense::init(fan_in, w, act, weight_init_scale, &mut next_rng()));
            fan_in = w;
        }
        fusion.push(Dense::init(fan_in, arch.embedding_dim, act, weight_init_scale, &mut next_rng()));
        let head = Dense::init(arch.embedding_dim, 2, Activation::Identity, weight_init_scale, &mut next_rng());
        Ok(Self {
            arch: arch.clone(),
            modalities: modalities.to_vec(),
            input_dims: input_dims.to_vec(),
            input_shift: input_dims.iter().map(|&p| Array1::zeros(p)).collect(),
            input_scale: input_dims.iter().map(|&p| Array1::ones(p)).collect(),
            encoders,
            fusion,
            head,
            selected_epoch: 0,
            log: TrainingLog::default(),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    /// All layers in canonical order: encoders (modality-major), fusion, head.
    pub fn layers(&self) -> Vec<&Dense<T>> {
        self.encoders
            .iter()
            .flatten()
            .chain(self.fusion.iter())
            .chain(std::iter::once(&self.head))
            .collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense<T>> {
        self.encoders
            .iter_mut()
            .flatten()
            .chain(self.fusion.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|l| l.n_params()).sum()
    }

    /// Parameter `k` in canonical order; within a layer, weights row-major then biases.
    pub fn param(&self, mut k: usize) -> T {
        for l in self.layers() {
            if k < l.w.len() {
                return l.w.as_slice().expect("standard layout")[k];
            }
            k -= l.w.len();
            if k < l.b.len() {
                return l.b[k];
            }
            k -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_param(&mut self, mut k: usize, value: T) {
        for l in self.layers_mut() {
            if k < l.w.len() {
                l.w.as_slice_mut().expect("standard layout")[k] = value;
                return;
            }
            k -= l.w.len();
            if k < l.b.len() {
                l.b[k] = value;
                return;
            }
            k -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    /// Checks the block schema and applies the stored input scaling.
    pub fn prepare_inputs(&self, data: &SemiSynthDataset<T>) -> Result<Vec<Array2<T>>> {
        if data.n() == 0 {
            return Err(Error::Schema("fusion: empty dataset".into()));
        }
        self.modalities
            .iter()
            .zip(&self.input_dims)
            .enumerate()
            .map(|(j, (m, &dim))| {
                let block = data
                    .block(m)
                    .ok_or_else(|| Error::Schema(format!("fusion: dataset has no modality `{m}`")))?;
                if block.values.ncols() != dim {
                    return Err(Error::Schema(format!(
                        "fusion: modality `{m}` has {} columns, network expects {dim}",
                        block.values.ncols()
                    )));
                }
                Ok((&block.values - &self.input_shift[j]) / &self.input_scale[j])
            })
            .collect()
    }

    fn forward_traced(&self, inputs: &[ArrayView2<'_, T>]) -> Trace<T> {
        let mut enc_trace = Vec::with_capacity(inputs.len());
        let mut enc_out = Vec::with_capacity(inputs.len());
        for (x, layers) in inputs.iter().zip(&self.encoders) {
            let mut a = x.to_owned();
            let mut t = Vec::with_capacity(layers.len());
            for layer in layers {
                let next = layer.forward(a.view());
                t.push((a, next.clone()));
                a = next;
            }
            enc_trace.push(t);
            enc_out.push(a);
        }
        let views: Vec<_> = enc_out.iter().map(|a| a.view()).collect();
        let mut a = concatenate(Axis(1), &views).expect("encoder outputs share rows");
        let mut fus_trace = Vec::with_capacity(self.fusion.len());
        for layer in &self.fusion {
            let next = layer.forward(a.view());
            fus_trace.push((a, next.clone()));
            a = next;
        }
        let out = self.head.forward(a.view());
        Trace {
            encoders: enc_trace,
            fusion: fus_trace,
            out,
        }
    }

    fn embedding_of(&self, inputs: &[ArrayView2<'_, T>]) -> Array2<T> {
        let enc_out: Vec<Array2<T>> = inputs
            .iter()
            .zip(&self.encoders)
            .map(|(x, layers)| layers.iter().fold(x.to_owned(), |a, l| l.forward(a.view())))
            .collect();
        let views: Vec<_> = enc_out.iter().map(|a| a.view()).collect();
        let a = concatenate(Axis(1), &views).expect("encoder outputs share rows");
        self.fusion.iter().fold(a, |a, l| l.forward(a.view()))
    }

    /// `(l_hat, m_hat)` for already prepared inputs.
    pub fn predict_prepared(&self, inputs: &[ArrayView2<'_, T>]) -> (Array1<T>, Array1<T>) {
        let out = self.head.forward(self.embedding_of(inputs).view());
        (out.column(0).to_owned(), out.column(1).to_owned())
    }

    pub fn predict(&self, data: &SemiSynthDataset<T>) -> Result<(Array1<T>, Array1<T>)> {
        let inputs = self.prepare_inputs(data)?;
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        Ok(self.predict_prepared(&views))
    }

    /// Combined loss and its gradient with respect to every layer, in
    /// canonical layer order.
    pub fn loss_and_gradient(
        &self,
        inputs: &[ArrayView2<'_, T>],
        y: ArrayView1<'_, T>,
        d: ArrayView1<'_, T>,
    ) -> (T, Vec<LayerGrad<T>>) {
        let trace = self.forward_traced(inputs);
        let rows = y.len();
        let nf = T::from_usize_lossy(rows);
        let l_hat = trace.out.column(0);
        let m_hat = trace.out.column(1);
        let norm_l = head_rmse(l_hat, y);
        let norm_m = head_rmse(m_hat, d);
        let loss = norm_l * norm_m;

        // dL/dl_i = norm_m * d(norm_l)/dl_i = -norm_m (y_i - l_i) / (n norm_l), and symmetrically.
        let coef_l = if norm_l > T::zero() { norm_m / (nf * norm_l) } else { T::zero() };
        let coef_m = if norm_m > T::zero() { norm_l / (nf * norm_m) } else { T::zero() };
        let mut d_out = Array2::<T>::zeros((rows, 2));
        for i in 0..rows {
            d_out[[i, 0]] = -coef_l * (y[i] - l_hat[i]);
            d_out[[i, 1]] = -coef_m * (d[i] - m_hat[i]);
        }

        let embedding = trace
            .fusion
            .last()
            .map(|(_, out)| out.view())
            .expect("at least the embedding layer");
        let head_grad = LayerGrad {
            w: d_out.t().dot(&embedding),
            b: d_out.sum_axis(Axis(0)),
        };
        let mut d_a = d_out.dot(&self.head.w);

        let mut fusion_grads = Vec::with_capacity(self.fusion.len());
        for (layer, (input, output)) in self.fusion.iter().zip(&trace.fusion).rev() {
            let (g, d_in) = back_layer(layer, input.view(), output.view(), d_a);
            fusion_grads.push(g);
            d_a = d_in;
        }
        fusion_grads.reverse();

        let mut encoder_grads: Vec<Vec<LayerGrad<T>>> = Vec::with_capacity(self.encoders.len());
        let mut offset = 0;
        for ((layers, t), x) in self.encoders.iter().zip(&trace.encoders).zip(inputs) {
            // Without encoder layers the raw input feeds the concatenation.
            let width = layers.last().map_or(x.ncols(), |l| l.w.nrows());
            let mut d_local = d_a.slice(s![.., offset..offset + width]).to_owned();
            offset += width;
            let mut grads = Vec::with_capacity(layers.len());
            for (layer, (input, output)) in layers.iter().zip(t).rev() {
                let (g, d_in) = back_layer(layer, input.view(), output.view(), d_local);
                grads.push(g);
                d_local = d_in;
            }
            grads.reverse();
            encoder_grads.push(grads);
        }

        let grads = encoder_grads
            .into_iter()
            .flatten()
            .chain(fusion_grads)
            .chain(std::iter::once(head_grad))
            .collect();
        (loss, grads)
    }

    fn apply_step(&mut self, grads: &[LayerGrad<T>], step: T) {
        for (layer, g) in self.layers_mut().into_iter().zip(grads) {
            layer.w.scaled_add(-step, &g.w);
            layer.b.scaled_add(-step, &g.b);
        }
    }

    /// Weights as JSON: layer-major, row-major, 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n  \"format\": \"mmdml-fusion/1\",\n");
        let arch = serde_json::to_string(&self.arch).expect("arch serializes");
        let _ = writeln!(out, "  \"arch\": {arch},");
        let mods = serde_json::to_string(&self.modalities).expect("names serialize");
        let _ = writeln!(out, "  \"modalities\": {mods},");
        let _ = writeln!(out, "  \"input_dims\": {:?},", self.input_dims);
        let _ = writeln!(out, "  \"selected_epoch\": {},", self.selected_epoch);
        let nums = |v: &mut dyn Iterator<Item = T>| v.map(|x| fmt17(x.as_f64())).collect::<Vec<_>>().join(", ");
        let _ = writeln!(
            out,
            "  \"input_shift\": [{}],",
            self.input_shift
                .iter()
                .map(|a| format!("[{}]", nums(&mut a.iter().copied())))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let _ = writeln!(
            out,
            "  \"input_scale\": [{}],",
            self.input_scale
                .iter()
                .map(|a| format!("[{}]", nums(&mut a.iter().copied())))
                .collect::<Vec<_>>()
                .join(", ")
        );
        out.push_str("  \"layers\": [\n");
        let mut roles: Vec<String> = Vec::new();
        for (m, layers) in self.modalities.iter().zip(&self.encoders) {
            roles.extend((0..layers.len()).map(|k| format!("encoder:{m}:{k}")));
        }
        roles.extend((0..self.fusion.len()).map(|k| format!("fusion:{k}")));
        roles.push("head".into());
        let layers = self.layers();
        for (i, (role, l)) in roles.iter().zip(&layers).enumerate() {
            let act = serde_json::to_string(&l.activation).expect("activation serializes");
            let _ = write!(
                out,
                "    {{\"role\": \"{role}\", \"activation\": {act}, \"rows\": {}, \"cols\": {}, \"weights\": [{}], \"bias\": [{}]}}",
                l.w.nrows(),
                l.w.ncols(),
                nums(&mut l.w.iter().copied()),
                nums(&mut l.b.iter().copied())
            );
            out.push_str(if i + 1 < layers.len() { ",\n" } else { "\n" });
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct LayerFile {
            activation: Activation,
            rows: usize,
            cols: usize,
            weights: Vec<f64>,
            bias: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct NetFile {
            format: String,
            arch: FusionArch,
            modalities: Vec<String>,
            input_dims: Vec<usize>,
            selected_epoch: usize,
            input_shift: Vec<Vec<f64>>,
            input_scale: Vec<Vec<f64>>,
            layers: Vec<LayerFile>,
        }
        let bad = |m: String| Error::Parse {
            path: "<fusion weights>".into(),
            msg: m,
        };
        let file: NetFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.format != "mmdml-fusion/1" {
            return Err(bad(format!("unknown format `{}`", file.format)));
        }
        let mut net = Self::new(&file.arch, &file.modalities, &file.input_dims, 0.0, 0)?;
        if file.layers.len() != net.layers().len() {
            return Err(bad("layer count does not match the architecture".into()));
        }
        for (layer, f) in net.layers_mut().into_iter().zip(file.layers) {
            if (f.rows, f.cols) != layer.w.dim() || f.weights.len() != f.rows * f.cols || f.bias.len() != f.rows {
                return Err(bad("layer shape does not match the architecture".into()));
            }
            layer.activation = f.activation;
            layer.w = Array2::from_shape_vec((f.rows, f.cols), f.weights.into_iter().map(T::lit).collect())
                .expect("checked shape");
            layer.b = f.bias.into_iter().map(T::lit).collect();
        }
        let to_arrays = |v: Vec<Vec<f64>>| -> Vec<Array1<T>> { v.into_iter().map(|a| a.into_iter().map(T::lit).collect()).collect() };
        net.input_shift = to_arrays(file.input_shift);
        net.input_scale = to_arrays(file.input_scale);
        if net.input_shift.iter().map(Array1::len).ne(net.input_dims.iter().copied())
            || net.input_scale.iter().map(Array1::len).ne(net.input_dims.iter().copied())
        {
            return Err(bad("input scaling does not match the input widths".into()));
        }
        net.selected_epoch = file.selected_epoch;
        Ok(net)
    }
}

fn back_layer<T: Scalar>(
    layer: &Dense<T>,
    input: ArrayView2<'_, T>,
    output: ArrayView2<'_, T>,
    mut d_out: Array2<T>,
) -> (LayerGrad<T>, Array2<T>) {
    let act = layer.activation;
    d_out.zip_mut_with(&output, |g, &a| *g = *g * act.slope(a));
    let grad = LayerGrad {
        w: d_out.t().dot(&input),
        b: d_out.sum_axis(Axis(0)),
    };
    let d_in = d_out.dot(&layer.w);
    (grad, d_in)
}

fn views<T: Scalar>(a: &[Array2<T>]) -> Vec<ArrayView2<'_, T>> {
    a.iter().map(|x| x.view()).collect()
}

/// Output of the fusion layers, `n x E`.
pub fn extract_embedding<T: Scalar>(net: &FusionNet<T>, data: &SemiSynthDataset<T>) -> Result<Array2<T>> {
    let inputs = net.prepare_inputs(data)?;
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    Ok(net.embedding_of(&views))
}

fn holdout_record<T: Scalar>(net: &FusionNet<T>, inputs: &[ArrayView2<'_, T>], y: ArrayView1<'_, T>, d: ArrayView1<'_, T>) -> HoldoutRecord<T> {
    let (l_hat, m_hat) = net.predict_prepared(inputs);
    let rmse_l = head_rmse(l_hat.view(), y);
    let rmse_m = head_rmse(m_hat.view(), d);
    HoldoutRecord {
        loss: rmse_l * rmse_m,
        rmse_l,
        rmse_m,
        l_hat,
        m_hat,
    }
}

/// Mini-batch gradient descent on the combined loss.
///
/// The log holds one record per epoch, starting with the initialization at
/// epoch 0; when a holdout set is given each record carries its predictions.
/// The holdout never influences the weight updates, only the choice among
/// the trained epochs (1 and later).
pub fn train_fusion<T: Scalar>(
    params: &FusionParams,
    train: &SemiSynthDataset<T>,
    holdout: Option<&SemiSynthDataset<T>>,
    modalities: &[String],
    seed: u64,
) -> Result<FusionNet<T>> {
    params.check()?;
    if modalities.is_empty() {
        return Err(Error::Config("fusion: empty modality subset".into()));
    }
    let dims = modalities
        .iter()
        .map(|m| {
            train
                .block(m)
                .map(|b| b.values.ncols())
                .ok_or_else(|| Error::Schema(format!("fusion: dataset has no modality `{m}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = FusionNet::new(&params.arch, modalities, &dims, params.weight_init_scale, seed)?;
    if params.standardize_inputs {
        for (j, m) in modalities.iter().enumerate() {
            let x = &train.block(m).expect("checked").values;
            for c in 0..x.ncols() {
                let col = x.column(c);
                let sd = var_pop(col).sqrt();
                net.input_shift[j][c] = mean(col);
                net.input_scale[j][c] = if sd > T::zero() { sd } else { T::one() };
            }
        }
    }

    let inputs = net.prepare_inputs(train)?;
    let holdout_inputs = holdout.map(|h| net.prepare_inputs(h)).transpose()?;
    let train_views = views(&inputs);
    let holdout_views = holdout_inputs.as_deref().map(views);

    let record = |net: &FusionNet<T>, epoch: usize| -> Result<EpochRecord<T>> {
        let (l, m) = net.predict_prepared(&train_views);
        let train_loss = combined_loss(l.view(), m.view(), train.y.view(), train.d.view());
        if !train_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let holdout = match (holdout, &holdout_views) {
            (Some(h), Some(v)) => Some(holdout_record(net, v, h.y.view(), h.d.view())),
            _ => None,
        };
        Ok(EpochRecord {
            epoch,
            train_loss,
            holdout,
        })
    };
    let selection_loss = |r: &EpochRecord<T>| r.holdout.as_ref().map(|h| h.loss).unwrap_or(r.train_loss);

    let mut log = vec![record(&net, 0)?];
    let mut best: Option<(T, usize, FusionNet<T>)> = None;
    let n = train.n();
    let step = T::lit(params.step_size);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=params.epochs {
        let mut rng = stream(seed, tag::SHUFFLE, epoch as u32, 0);
        order.shuffle(&mut rng);
        for batch in order.chunks(params.batch_size) {
            let xb: Vec<Array2<T>> = inputs.iter().map(|x| x.select(Axis(0), batch)).collect();
            let xv: Vec<_> = xb.iter().map(|x| x.view()).collect();
            let yb = train.y.select(Axis(0), batch);
            let db = train.d.select(Axis(0), batch);
            let (loss, grads) = net.loss_and_gradient(&xv, yb.view(), db.view());
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            net.apply_step(&grads, step);
        }
        let rec = record(&net, epoch)?;
        if params.selection == EpochSelection::MinHoldoutLoss {
            let loss = selection_loss(&rec);
            if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                best = Some((loss, epoch, net.clone()));
            }
        }
        log.push(rec);
    }

    let mut chosen = match best {
        Some((_, epoch, mut snapshot)) => {
            snapshot.selected_epoch = epoch;
            snapshot
        }
        None => {
            net.selected_epoch = params.epochs;
            net
        }
    };
    chosen.log = TrainingLog { epochs: log };
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpConfig};
    use ndarray::array;

    fn arch(encoder: Vec<usize>, fusion: Option<usize>, e: usize, act: Activation) -> FusionArch {
        FusionArch {
            encoder_widths: encoder,
            per_modality: BTreeMap::new(),
            fusion_width: fusion,
            embedding_dim: e,
            activation: act,
        }
    }

    #[test]
    fn combined_loss_examples() {
        let ones = array![1.0, 1.0, 1.0, 1.0];
        let zeros = Array1::<f64>::zeros(4);
        assert_eq!(combined_loss(ones.view(), ones.view(), ones.view(), ones.view()), 0.0);
        assert_eq!(combined_loss(zeros.view(), zeros.view(), ones.view(), ones.view()), 1.0);

        let y: Array1<f64> = array![0.5, -1.0, 2.0];
        let d = array![1.0, 0.0, -1.0];
        let l = array![0.0, -0.5, 1.0];
        let m = array![0.5, 0.5, 0.0];
        let base = combined_loss(l.view(), m.view(), y.view(), d.view());
        // Doubling the treatment residuals doubles the loss.
        let m2 = &d - &((&d - &m) * 2.0);
        let doubled = combined_loss(l.view(), m2.view(), y.view(), d.view());
        assert!((doubled - 2.0 * base).abs() < 1e-14);
    }

    #[test]
    fn zero_widths_rejected() {
        assert!(arch(vec![0], None, 4, Activation::Relu).check().is_err());
        assert!(arch(vec![4], Some(0), 4, Activation::Relu).check().is_err());
        assert!(arch(vec![4], None, 0, Activation::Relu).check().is_err());
        assert!(arch(vec![], None, 1, Activation::Identity).check().is_ok());
    }

    #[test]
    fn identity_embedding_is_feature_sum() {
        let a = arch(vec![], None, 1, Activation::Identity);
        let mods = vec!["tab".to_string(), "txt".to_string()];
        let mut net = FusionNet::<f64>::new(&a, &mods, &[2, 3], 1.0, 0).unwrap();
        net.fusion[0].w.fill(1.0);
        net.fusion[0].b.fill(0.0);
        let ds = generate::<f64>(&DgpConfig {
            modality_specs: vec![
                crate::model::ModalitySpec::surrogate("tab", 2, 1.0),
                crate::model::ModalitySpec::surrogate("txt", 3, 1.0),
            ],
            ..DgpConfig::three_modalities(20, 1.0, 2, 1)
        })
        .unwrap();
        let h = extract_embedding(&net, &ds).unwrap();
        let x = ds.features(&mods).unwrap();
        for i in 0..20 {
            assert!((h[[i, 0]] - x.row(i).sum()).abs() < 1e-12);
        }
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        let a = arch(vec![3], None, 2, Activation::Tanh);
        let net = FusionNet::<f64>::new(&a, &["tab".to_string()], &[5], 1.0, 0).unwrap();
        let ds = generate::<f64>(&DgpConfig::three_modalities(20, 1.0, 4, 1)).unwrap();
        assert!(matches!(extract_embedding(&net, &ds), Err(Error::Schema(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let a = arch(vec![3, 2], Some(4), 2, Activation::Relu);
        let mods = vec!["tab".to_string(), "img".to_string()];
        let mut net = FusionNet::<f64>::new(&a, &mods, &[2, 3], 0.7, 42).unwrap();
        net.input_shift[1][2] = 0.1;
        net.input_scale[0][1] = 3.0;
        net.selected_epoch = 5;
        let back = FusionNet::<f64>::from_json(&net.to_json()).unwrap();
        assert_eq!(back, net);
        assert!(FusionNet::<f64>::from_json("{}").is_err());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ds = generate::<f64>(&DgpConfig::three_modalities(600, 1.0, 3, 3)).unwrap();
        let train = ds.select_rows(&(0..400).collect::<Vec<_>>());
        let hold = ds.select_rows(&(400..600).collect::<Vec<_>>());
        let params = FusionParams {
            arch: arch(vec![6], Some(8), 4, Activation::Tanh),
            epochs: 15,
            batch_size: 32,
            step_size: 0.05,
            weight_init_scale: 1.0,
            selection: EpochSelection::MinHoldoutLoss,
            validation_fraction: 0.2,
            standardize_inputs: true,
        };
        let mods = ds.modality_names();
        let a = train_fusion(&params, &train, Some(&hold), &mods, 9).unwrap();
        let b = train_fusion(&params, &train, Some(&hold), &mods, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.epochs.len(), 16);
        let initial = a.log.epochs[0].holdout.as_ref().unwrap().loss;
        let best = a.log.epochs[a.selected_epoch].holdout.as_ref().unwrap().loss;
        assert!(best <= initial);
        assert!(best < 0.8 * initial, "{best} vs {initial}");

        let zero_epochs = FusionParams { epochs: 0, ..params };
        assert!(train_fusion(&zero_epochs, &train, None, &mods, 9).is_err());
    }

    #[test]
    fn huge_step_size_diverges_with_epoch() {
        let ds = generate::<f64>(&DgpConfig::three_modalities(200, 1.0, 3, 3)).unwrap();
        let params = FusionParams {
            arch: arch(vec![8], None, 8, Activation::Relu),
            epochs: 50,
            batch_size: 200,
            step_size: 1e6,
            weight_init_scale: 1.0,
            selection: EpochSelection::Last,
            validation_fraction: 0.0,
            standardize_inputs: true,
        };
        match train_fusion(&params, &ds, None, &ds.modality_names(), 1) {
            Err(Error::TrainingDiverged { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|n| n.selected_epoch)),
        }
    }
}
