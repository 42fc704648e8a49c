//! The deep functional multiple-index model.
//!
//! Three modules compose the network. The transformation module treats
//! each grid point (or MFCC frame) as a token with the p channels as its
//! embedding and runs a stack of transformer encoders. The adaptive
//! basis layer holds p*K micro-networks t -> theta(t); each is sampled
//! on the grid once per batch and scored against its channel by
//! trapezoidal quadrature. The head maps the p*K scores through tanh
//! dense layers to class logits or one regression output.
//!
//! Parameters live in one flat, named list in a fixed canonical order;
//! the same order is used for initialization, tape placement, optimizer
//! state, and checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AdError, NodeId, Tape};
use crate::fda::{Curve, FdaError, Grid, MultiCurve};
use crate::nn::{
    self, dense, encoder_layer, maybe_dropout, positional_encoding, Activation, AttentionP,
    DenseP, EncoderP, Mode,
};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input is {got_rows}x{got_cols} but the model expects {want_rows}x{want_cols}")]
    InputShape {
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("unknown parameter name {0:?}")]
    UnknownParam(String),
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("task mismatch: {0}")]
    TaskMismatch(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Fda(#[from] FdaError),
}

/// What the head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

/// Full model configuration. `p` doubles as the channel count and the
/// token embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DfmimConfig {
    /// Functional channels (MFCC coefficients or simulated processes).
    pub p: usize,
    /// Adaptive basis nodes per channel.
    pub k: usize,
    /// Classes; ignored under regression (output width 1).
    pub c: usize,
    /// Grid points per channel (tokens).
    pub n_grid: usize,
    /// Encoder layers in the transformation module.
    pub n_enc: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub focal_gamma: f64,
    /// Weight-decay factor on basis micro-net weight matrices, applied
    /// inside the loss.
    pub basis_l2: f64,
    pub seed: u64,
    pub task: Task,
    /// Hidden widths of each basis micro-net.
    pub basis_hidden: Vec<usize>,
    /// Hidden widths of the head before the final projection.
    pub head_hidden: Vec<usize>,
    /// Add sinusoidal positional encoding before the encoders.
    pub positional_encoding: bool,
    /// Standardize each input column with training-set statistics.
    pub normalize_features: bool,
    /// Standardize regression targets with training-set statistics
    /// (predictions are mapped back automatically).
    pub standardize_targets: bool,
}

impl DfmimConfig {
    /// Chunk-level speech emotion defaults: 64x40 MFCC chunks, 4 classes.
    pub fn ser_default() -> Self {
        Self {
            p: 40,
            k: 4,
            c: 4,
            n_grid: 64,
            n_enc: 2,
            heads: 4,
            ff_dim: 160,
            dropout: 0.2,
            lr: 3e-4,
            batch_size: 32,
            epochs: 15,
            focal_gamma: 2.0,
            basis_l2: 1e-4,
            seed: 0,
            task: Task::Classification,
            basis_hidden: vec![128, 128, 128],
            head_hidden: vec![64, 32],
            positional_encoding: true,
            normalize_features: true,
            standardize_targets: false,
        }
    }

    /// Simulation-study defaults: 30x4 curves, scalar response.
    pub fn sim_default() -> Self {
        Self {
            p: 4,
            k: 4,
            c: 1,
            n_grid: 30,
            n_enc: 2,
            heads: 1,
            ff_dim: 16,
            // The regression surface is deterministic given the curves;
            // dropout only slows convergence here.
            dropout: 0.0,
            lr: 3e-4,
            batch_size: 32,
            epochs: 15,
            focal_gamma: 2.0,
            basis_l2: 1e-4,
            seed: 0,
            task: Task::Regression,
            basis_hidden: vec![128, 128, 128],
            head_hidden: vec![64, 32],
            positional_encoding: true,
            normalize_features: true,
            standardize_targets: true,
        }
    }

    /// Output width of the head.
    pub fn out_dim(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification => self.c,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.p == 0 || self.k == 0 {
            return bad(format!("p and K must be >= 1, got p={}, K={}", self.p, self.k));
        }
        if self.n_grid < 2 {
            return bad(format!("n_grid must be >= 2, got {}", self.n_grid));
        }
        if self.task == Task::Classification && self.c < 2 {
            return bad(format!("classification needs C >= 2, got {}", self.c));
        }
        if self.heads == 0 || !self.p.is_multiple_of(self.heads) {
            return bad(format!(
                "heads must divide the model dimension p: p={}, heads={}",
                self.p, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.focal_gamma < 0.0 {
            return bad(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if self.basis_l2 < 0.0 {
            return bad(format!("basis_l2 must be >= 0, got {}", self.basis_l2));
        }
        if self.ff_dim == 0 && self.n_enc > 0 {
            return bad("ff_dim must be >= 1 when encoders are present".into());
        }
        Ok(())
    }
}

/// One entry of the canonical parameter layout.
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    init: InitKind,
}

enum InitKind {
    /// Uniform fan-in weight.
    FanIn,
    /// Bias drawn from the owning layer's fan-in range. Zero biases
    /// would start every basis micro-net as a line through the origin
    /// (all ReLU kinks at t=0, rank-one scores per channel) and leave
    /// the tanh head without first-order gradient signal on even link
    /// functions; spread biases break both degeneracies.
    FanInBias(usize),
    /// Layer-norm shift.
    Zero,
    /// Layer-norm gain.
    One,
}

/// Dense chain layout helper: widths [in, h1, .., out] yields one
/// weight+bias entry pair per layer.
fn push_dense_chain(entries: &mut Vec<ParamEntry>, prefix: &str, widths: &[usize]) {
    for l in 0..widths.len() - 1 {
        entries.push(ParamEntry {
            name: format!("{prefix}.layer{l}.w"),
            rows: widths[l],
            cols: widths[l + 1],
            init: InitKind::FanIn,
        });
        entries.push(ParamEntry {
            name: format!("{prefix}.layer{l}.b"),
            rows: 1,
            cols: widths[l + 1],
            init: InitKind::FanInBias(widths[l]),
        });
    }
}

/// The canonical layout. Initialization, placement, optimizer slots and
/// checkpoints all follow this order; `PlacedModel::from_ids` walks it
/// with the same loops.
fn layout(cfg: &DfmimConfig) -> Vec<ParamEntry> {
    let p = cfg.p;
    let mut entries = Vec::new();
    for e in 0..cfg.n_enc {
        for mat in ["wq", "wk", "wv", "wo"] {
            entries.push(ParamEntry {
                name: format!("enc{e}.{mat}"),
                rows: p,
                cols: p,
                init: InitKind::FanIn,
            });
        }
        entries.push(ParamEntry {
            name: format!("enc{e}.ln1.gamma"),
            rows: 1,
            cols: p,
            init: InitKind::One,
        });
        entries.push(ParamEntry {
            name: format!("enc{e}.ln1.beta"),
            rows: 1,
            cols: p,
            init: InitKind::Zero,
        });
        push_dense_chain(&mut entries, &format!("enc{e}.ff"), &[p, cfg.ff_dim, p]);
        entries.push(ParamEntry {
            name: format!("enc{e}.ln2.gamma"),
            rows: 1,
            cols: p,
            init: InitKind::One,
        });
        entries.push(ParamEntry {
            name: format!("enc{e}.ln2.beta"),
            rows: 1,
            cols: p,
            init: InitKind::Zero,
        });
    }
    let mut basis_widths = vec![1];
    basis_widths.extend_from_slice(&cfg.basis_hidden);
    basis_widths.push(1);
    for j in 0..p {
        for k in 0..cfg.k {
            push_dense_chain(&mut entries, &format!("basis{j}_{k}"), &basis_widths);
        }
    }
    let mut head_widths = vec![p * cfg.k];
    head_widths.extend_from_slice(&cfg.head_hidden);
    head_widths.push(cfg.out_dim());
    push_dense_chain(&mut entries, "head", &head_widths);
    entries
}

/// Typed view of the flat parameter list placed on a tape.
pub(crate) struct PlacedModel {
    pub encoders: Vec<EncoderP>,
    /// Micro-net layer parameters, indexed j*K + k, channel-major.
    pub basis: Vec<Vec<DenseP>>,
    pub head: Vec<DenseP>,
    /// Tape ids of basis weight matrices (penalty targets).
    pub basis_weight_ids: Vec<NodeId>,
    /// Tape ids of all parameters, in canonical order.
    pub param_ids: Vec<NodeId>,
}

impl PlacedModel {
    /// Walks the canonical order of [`layout`] over raw tape ids.
    fn from_ids(cfg: &DfmimConfig, ids: &[NodeId]) -> Self {
        let mut cur = 0usize;
        let mut next = || {
            let id = ids[cur];
            cur += 1;
            id
        };
        let mut encoders = Vec::with_capacity(cfg.n_enc);
        for _ in 0..cfg.n_enc {
            let attn = AttentionP {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
            };
            let ln1_gamma = next();
            let ln1_beta = next();
            let ff1 = DenseP { w: next(), b: next() };
            let ff2 = DenseP { w: next(), b: next() };
            let ln2_gamma = next();
            let ln2_beta = next();
            encoders.push(EncoderP {
                attn,
                ln1_gamma,
                ln1_beta,
                ff1,
                ff2,
                ln2_gamma,
                ln2_beta,
            });
        }
        let basis_layers = cfg.basis_hidden.len() + 1;
        let mut basis = Vec::with_capacity(cfg.p * cfg.k);
        let mut basis_weight_ids = Vec::with_capacity(cfg.p * cfg.k * basis_layers);
        for _ in 0..cfg.p * cfg.k {
            let mut net = Vec::with_capacity(basis_layers);
            for _ in 0..basis_layers {
                let w = next();
                let b = next();
                basis_weight_ids.push(w);
                net.push(DenseP { w, b });
            }
            basis.push(net);
        }
        let head_layers = cfg.head_hidden.len() + 1;
        let mut head = Vec::with_capacity(head_layers);
        for _ in 0..head_layers {
            head.push(DenseP { w: next(), b: next() });
        }
        debug_assert_eq!(cur, ids.len(), "layout walk must consume every parameter");
        Self {
            encoders,
            basis,
            head,
            basis_weight_ids,
            param_ids: ids.to_vec(),
        }
    }
}

/// One forward pass of a batch, ready for backward.
pub(crate) struct BatchForward {
    pub tape: Tape,
    /// Batch output, B x out_dim.
    pub output: NodeId,
    pub placed: PlacedModel,
}

/// The model: flat named parameters plus input/target statistics.
#[derive(Debug, Clone)]
pub struct DfmimModel {
    config: DfmimConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    /// Per-column input statistics (length p); identity when feature
    /// normalization is off.
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    /// Regression target statistics; identity unless standardization
    /// ran.
    target_mean: f64,
    target_std: f64,
}

impl DfmimModel {
    /// Fresh model with seeded initialization.
    pub fn init(config: DfmimConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stream(config.seed, Domain::Init, 0);
        let entries = layout(&config);
        let mut params = Vec::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        for e in &entries {
            let t = match e.init {
                InitKind::FanIn => nn::init_weight(e.rows, e.cols, &mut rng),
                InitKind::FanInBias(fan_in) => nn::init_bias(fan_in, e.cols, &mut rng),
                InitKind::Zero => Tensor::zeros(vec![e.rows, e.cols]),
                InitKind::One => {
                    Tensor::new(vec![e.rows, e.cols], vec![1.0; e.rows * e.cols]).expect("sized")
                }
            };
            params.push(t);
            names.push(e.name.clone());
        }
        let p = config.p;
        Ok(Self {
            config,
            params,
            names,
            norm_mean: vec![0.0; p],
            norm_std: vec![1.0; p],
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    pub fn config(&self) -> &DfmimConfig {
        &self.config
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.config.n_grid).expect("validated n_grid")
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Replaces one parameter by name, shape-checked.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ModelError::UnknownParam(name.into()))?;
        if self.params[i].shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.into(),
                got: value.shape().to_vec(),
                want: self.params[i].shape().to_vec(),
            });
        }
        self.params[i] = value;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Per-column feature statistics (mean, std).
    pub fn norm_stats(&self) -> (&[f64], &[f64]) {
        (&self.norm_mean, &self.norm_std)
    }

    pub fn set_norm_stats(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<(), ModelError> {
        if mean.len() != self.config.p || std.len() != self.config.p {
            return Err(ModelError::Config(format!(
                "normalization statistics must have length p={}, got {} and {}",
                self.config.p,
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| s <= 0.0 || s.is_nan()) {
            return Err(ModelError::Config("feature stds must be positive".into()));
        }
        self.norm_mean = mean;
        self.norm_std = std;
        Ok(())
    }

    /// Regression target statistics (mean, std).
    pub fn target_stats(&self) -> (f64, f64) {
        (self.target_mean, self.target_std)
    }

    pub fn set_target_stats(&mut self, mean: f64, std: f64) -> Result<(), ModelError> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(ModelError::Config(format!(
                "target statistics must be finite with positive std, got mean {mean}, std {std}"
            )));
        }
        self.target_mean = mean;
        self.target_std = std;
        Ok(())
    }

    /// Maps a standardized head output back to the target scale.
    pub fn destandardize(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }

    /// Maps a raw target to the standardized training scale.
    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.shape() != [self.config.n_grid, self.config.p] {
            return Err(ModelError::InputShape {
                got_rows: x.shape().first().copied().unwrap_or(0),
                got_cols: x.shape().get(1).copied().unwrap_or(0),
                want_rows: self.config.n_grid,
                want_cols: self.config.p,
            });
        }
        Ok(())
    }

    /// Column-standardized copy of an input using the stored statistics.
    fn normalized(&self, x: &Tensor) -> Tensor {
        if !self.config.normalize_features {
            return x.clone();
        }
        Tensor::from_fn(x.rows(), x.cols(), |i, j| {
            (x.at(i, j) - self.norm_mean[j]) / self.norm_std[j]
        })
    }

    /// Places every parameter on a tape. Trainable placement makes each
    /// one a gradient leaf; constant placement is for inference.
    pub(crate) fn place(&self, tape: &mut Tape, trainable: bool) -> PlacedModel {
        let ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        PlacedModel::from_ids(&self.config, &ids)
    }

    /// Samples every basis micro-net on the grid, already multiplied by
    /// the trapezoid quadrature weights. Returns p*K columns of shape
    /// n_grid x 1, channel-major. Evaluated once per batch: the curves
    /// do not depend on the inputs.
    fn weighted_basis_columns(
        &self,
        tape: &mut Tape,
        placed: &PlacedModel,
    ) -> Result<Vec<NodeId>, ModelError> {
        let grid = self.grid();
        let t_in = tape.constant(Tensor::col(grid.points().to_vec()));
        let h = grid.spacing();
        let n = grid.n();
        let mut w = vec![h; n];
        w[0] = 0.5 * h;
        w[n - 1] = 0.5 * h;
        let w_col = tape.constant(Tensor::col(w));
        let mut cols = Vec::with_capacity(placed.basis.len());
        for net in &placed.basis {
            let mut hcur = t_in;
            for (l, layer) in net.iter().enumerate() {
                let act = if l + 1 == net.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                hcur = dense(tape, hcur, layer, act)?;
            }
            cols.push(tape.mul(hcur, w_col)?);
        }
        Ok(cols)
    }

    /// Transformation module on one normalized sample.
    fn transform(
        &self,
        tape: &mut Tape,
        x: NodeId,
        placed: &PlacedModel,
        mode: &mut Mode,
    ) -> Result<NodeId, ModelError> {
        let mut hcur = x;
        if self.config.positional_encoding {
            let pe = tape.constant(positional_encoding(self.config.n_grid, self.config.p));
            hcur = tape.add(hcur, pe)?;
        }
        for enc in &placed.encoders {
            hcur = encoder_layer(tape, hcur, enc, self.config.heads, mode)?;
        }
        Ok(hcur)
    }

    /// Scores of all samples: B x (p*K), channel-major columns
    /// (score column j*K + k belongs to basis node k of channel j).
    fn scores(
        &self,
        tape: &mut Tape,
        zs: &[NodeId],
        wtheta: &[NodeId],
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.config;
        let mut score_cols = Vec::with_capacity(cfg.p * cfg.k);
        for j in 0..cfg.p {
            let cols: Vec<NodeId> = zs
                .iter()
                .map(|&z| tape.slice_cols(z, j, 1))
                .collect::<Result<_, _>>()?;
            let stacked = tape.concat_cols(&cols)?; // n_grid x B
            let zj = tape.transpose(stacked); // B x n_grid
            for k in 0..cfg.k {
                score_cols.push(tape.matmul(zj, wtheta[j * cfg.k + k])?); // B x 1
            }
        }
        Ok(tape.concat_cols(&score_cols)?)
    }

    /// Head on a B x (p*K) score matrix.
    fn head(
        &self,
        tape: &mut Tape,
        scores: NodeId,
        placed: &PlacedModel,
        mode: &mut Mode,
    ) -> Result<NodeId, ModelError> {
        let mut hcur = scores;
        let last = placed.head.len() - 1;
        for (l, layer) in placed.head.iter().enumerate() {
            if l == last {
                hcur = dense(tape, hcur, layer, Activation::Identity)?;
            } else {
                hcur = dense(tape, hcur, layer, Activation::Tanh)?;
                hcur = maybe_dropout(tape, hcur, mode)?;
            }
        }
        Ok(hcur)
    }

    /// Forward pass over a batch of samples (each n_grid x p). The
    /// output node is B x out_dim.
    pub(crate) fn forward_batch(
        &self,
        xs: &[&Tensor],
        trainable: bool,
        mode: &mut Mode,
    ) -> Result<BatchForward, ModelError> {
        if xs.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        for x in xs {
            self.check_input(x)?;
        }
        let mut tape = Tape::new();
        let placed = self.place(&mut tape, trainable);
        let wtheta = self.weighted_basis_columns(&mut tape, &placed)?;
        let mut zs = Vec::with_capacity(xs.len());
        for x in xs {
            let xin = tape.constant(self.normalized(x));
            zs.push(self.transform(&mut tape, xin, &placed, mode)?);
        }
        let scores = self.scores(&mut tape, &zs, &wtheta)?;
        let output = self.head(&mut tape, scores, &placed, mode)?;
        Ok(BatchForward {
            tape,
            output,
            placed,
        })
    }

    /// Raw head outputs for one input in eval mode: logits under
    /// classification, the standardized-scale score under regression.
    pub fn raw_output(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        let fwd = self.forward_batch(&[x], false, &mut Mode::Eval)?;
        Ok(fwd.tape.value(fwd.output).data().to_vec())
    }

    /// Regression prediction on the original target scale.
    pub fn predict_scalar(&self, x: &Tensor) -> Result<f64, ModelError> {
        if self.config.task != Task::Regression {
            return Err(ModelError::TaskMismatch(
                "predict_scalar needs a regression model".into(),
            ));
        }
        Ok(self.destandardize(self.raw_output(x)?[0]))
    }

    /// Regression predictions for many inputs, batched, original scale.
    pub fn predict_scalars(&self, xs: &[Tensor]) -> Result<Vec<f64>, ModelError> {
        if self.config.task != Task::Regression {
            return Err(ModelError::TaskMismatch(
                "predict_scalars needs a regression model".into(),
            ));
        }
        let mut out = Vec::with_capacity(xs.len());
        for batch in xs.chunks(self.config.batch_size.max(1)) {
            let refs: Vec<&Tensor> = batch.iter().collect();
            let fwd = self.forward_batch(&refs, false, &mut Mode::Eval)?;
            out.extend(
                fwd.tape
                    .value(fwd.output)
                    .data()
                    .iter()
                    .map(|&v| self.destandardize(v)),
            );
        }
        Ok(out)
    }

    /// Predicted class (argmax over logits) for each input, batched.
    pub fn predict_classes(&self, xs: &[Tensor]) -> Result<Vec<usize>, ModelError> {
        if self.config.task != Task::Classification {
            return Err(ModelError::TaskMismatch(
                "predict_classes needs a classification model".into(),
            ));
        }
        let c = self.config.c;
        let mut out = Vec::with_capacity(xs.len());
        for batch in xs.chunks(self.config.batch_size.max(1)) {
            let refs: Vec<&Tensor> = batch.iter().collect();
            let fwd = self.forward_batch(&refs, false, &mut Mode::Eval)?;
            for row in fwd.tape.value(fwd.output).data().chunks(c) {
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// The p*K quadrature scores of one input, eval mode, channel-major.
    pub fn dfn_scores(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let placed = self.place(&mut tape, false);
        let wtheta = self.weighted_basis_columns(&mut tape, &placed)?;
        let xin = tape.constant(self.normalized(x));
        let z = self.transform(&mut tape, xin, &placed, &mut Mode::Eval)?;
        let scores = self.scores(&mut tape, &[z], &wtheta)?;
        Ok(tape.value(scores).data().to_vec())
    }

    /// One adaptive basis function sampled on the model grid.
    pub fn basis_curve(&self, channel: usize, k: usize) -> Result<Curve, ModelError> {
        let cfg = &self.config;
        if channel >= cfg.p || k >= cfg.k {
            return Err(ModelError::Config(format!(
                "basis index ({channel}, {k}) out of range for p={}, K={}",
                cfg.p, cfg.k
            )));
        }
        let mut tape = Tape::new();
        let placed = self.place(&mut tape, false);
        let grid = self.grid();
        let t_in = tape.constant(Tensor::col(grid.points().to_vec()));
        let net = &placed.basis[channel * cfg.k + k];
        let mut hcur = t_in;
        for (l, layer) in net.iter().enumerate() {
            let act = if l + 1 == net.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            hcur = dense(&mut tape, hcur, layer, act)?;
        }
        let values = tape.value(hcur).data().to_vec();
        Ok(Curve::new(grid, values)?)
    }

    /// Task loss plus the basis weight penalty on a placed batch.
    /// Targets: standardized-scale column for regression, labels for
    /// classification.
    pub(crate) fn loss_on(
        &self,
        fwd: &mut BatchForward,
        targets: &BatchTargets,
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.config;
        let task_loss = match (cfg.task, targets) {
            (Task::Regression, BatchTargets::Values(ys)) => {
                let target = fwd.tape.constant(Tensor::col(ys.clone()));
                crate::autodiff::mse_loss(&mut fwd.tape, fwd.output, target)?
            }
            (Task::Classification, BatchTargets::Labels(ls)) => {
                fwd.tape
                    .focal_loss(fwd.output, ls, cfg.focal_gamma, None)?
            }
            _ => {
                return Err(ModelError::TaskMismatch(
                    "targets do not match the configured task".into(),
                ))
            }
        };
        if cfg.basis_l2 == 0.0 {
            return Ok(task_loss);
        }
        let mut penalty: Option<NodeId> = None;
        for &w in &fwd.placed.basis_weight_ids {
            let sq = fwd.tape.mul(w, w)?;
            let s = fwd.tape.sum(sq);
            penalty = Some(match penalty {
                Some(acc) => fwd.tape.add(acc, s)?,
                None => s,
            });
        }
        let penalty = fwd.tape.scale(penalty.expect("p*K >= 1 nets"), cfg.basis_l2);
        Ok(fwd.tape.add(task_loss, penalty)?)
    }
}

/// Batch targets for [`DfmimModel::loss_on`].
pub(crate) enum BatchTargets {
    /// Standardized regression targets.
    Values(Vec<f64>),
    Labels(Vec<usize>),
}

/// A MultiCurve as the model's n_grid x p input matrix (channel j in
/// column j).
pub fn multicurve_matrix(mc: &MultiCurve) -> Tensor {
    let n = mc.grid().n();
    Tensor::from_fn(n, mc.p(), |i, j| mc.channel(j).values()[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> DfmimConfig {
        DfmimConfig {
            p: 2,
            k: 2,
            c: 3,
            n_grid: 8,
            n_enc: 1,
            heads: 1,
            ff_dim: 4,
            dropout: 0.0,
            lr: 3e-4,
            batch_size: 4,
            epochs: 2,
            focal_gamma: 2.0,
            basis_l2: 1e-4,
            seed: 11,
            task: Task::Classification,
            basis_hidden: vec![8],
            head_hidden: vec![6],
            positional_encoding: true,
            normalize_features: false,
            standardize_targets: false,
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = tiny_config();
        c.p = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.heads = 3; // does not divide p=2
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.c = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_grid = 1;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn init_is_seeded_and_named_uniquely() {
        let a = DfmimModel::init(tiny_config()).unwrap();
        let b = DfmimModel::init(tiny_config()).unwrap();
        assert_eq!(a.params().len(), b.params().len());
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x, y);
        }
        let mut names = a.param_names().to_vec();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before, "parameter names must be unique");

        let mut other_seed = tiny_config();
        other_seed.seed = 12;
        let c = DfmimModel::init(other_seed).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn basis_count_matches_p_times_k() {
        let m = DfmimModel::init(tiny_config()).unwrap();
        let per_net = 2 * (m.config().basis_hidden.len() + 1);
        let n_basis_params = m
            .param_names()
            .iter()
            .filter(|n| n.starts_with("basis"))
            .count();
        assert_eq!(n_basis_params, m.config().p * m.config().k * per_net);
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let m = DfmimModel::init(tiny_config()).unwrap();
        let x = Tensor::from_fn(8, 2, |i, j| 0.1 * i as f64 - 0.2 * j as f64);
        let out1 = m.raw_output(&x).unwrap();
        let out2 = m.raw_output(&x).unwrap();
        assert_eq!(out1.len(), 3);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out1), bits(&out2));

        let bad = Tensor::zeros(vec![7, 2]);
        assert!(matches!(
            m.raw_output(&bad),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn zero_final_basis_layer_gives_constant_curves() {
        let mut m = DfmimModel::init(tiny_config()).unwrap();
        let last = m.config().basis_hidden.len(); // final layer index
        m.set_param(&format!("basis0_0.layer{last}.w"), Tensor::zeros(vec![8, 1]))
            .unwrap();
        m.set_param(&format!("basis0_0.layer{last}.b"), Tensor::row(vec![0.7]))
            .unwrap();
        let c = m.basis_curve(0, 0).unwrap();
        for &v in c.values() {
            assert_abs_diff_eq!(v, 0.7, epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_set_single_unit_basis_curve() {
        // One hidden unit, all weights 1, zero biases:
        // theta(t) = relu(t) * 1 = t on [0,1].
        let mut cfg = tiny_config();
        cfg.basis_hidden = vec![1];
        let mut m = DfmimModel::init(cfg).unwrap();
        m.set_param("basis1_0.layer0.w", Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        m.set_param("basis1_0.layer0.b", Tensor::row(vec![0.0])).unwrap();
        m.set_param("basis1_0.layer1.w", Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        m.set_param("basis1_0.layer1.b", Tensor::row(vec![0.0])).unwrap();
        let c = m.basis_curve(1, 0).unwrap();
        for (t, v) in c.grid().points().to_vec().iter().zip(c.values()) {
            assert_abs_diff_eq!(*v, *t, epsilon = 1e-15);
        }
    }

    /// Forces every basis net to a constant output value.
    fn force_constant_basis(m: &mut DfmimModel, values: &[f64]) {
        let cfg = m.config().clone();
        let last = cfg.basis_hidden.len();
        let widths = {
            let mut w = vec![1];
            w.extend_from_slice(&cfg.basis_hidden);
            w.push(1);
            w
        };
        for j in 0..cfg.p {
            for k in 0..cfg.k {
                let v = values[j * cfg.k + k];
                for l in 0..=last {
                    m.set_param(
                        &format!("basis{j}_{k}.layer{l}.w"),
                        Tensor::zeros(vec![widths[l], widths[l + 1]]),
                    )
                    .unwrap();
                    let bias = if l == last {
                        Tensor::row(vec![v])
                    } else {
                        Tensor::zeros(vec![1, widths[l + 1]])
                    };
                    m.set_param(&format!("basis{j}_{k}.layer{l}.b"), bias).unwrap();
                }
            }
        }
    }

    #[test]
    fn constant_bases_on_constant_channels_score_exactly() {
        // Identity transformation (no encoders, no positional encoding),
        // theta = 1 for every node, channels constant (1, 2): the
        // quadrature scores are (1, 1, 2, 2) channel-major.
        let mut cfg = tiny_config();
        cfg.n_enc = 0;
        cfg.positional_encoding = false;
        let mut m = DfmimModel::init(cfg).unwrap();
        force_constant_basis(&mut m, &[1.0; 4]);
        let x = Tensor::from_fn(8, 2, |_, j| (j + 1) as f64);
        let scores = m.dfn_scores(&x).unwrap();
        let expect = [1.0, 1.0, 2.0, 2.0];
        for (s, e) in scores.iter().zip(expect) {
            assert_abs_diff_eq!(*s, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_scores() {
        let mut cfg = tiny_config();
        cfg.n_enc = 0;
        cfg.positional_encoding = false;
        let m = DfmimModel::init(cfg).unwrap();
        let x = Tensor::zeros(vec![8, 2]);
        for s in m.dfn_scores(&x).unwrap() {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn identity_stack_single_index_reduction() {
        // N_enc=0, positional encoding off, p=1, K=1: the score equals
        // the quadrature inner product of the basis curve with the raw
        // input curve.
        let cfg = DfmimConfig {
            p: 1,
            k: 1,
            c: 2,
            n_grid: 16,
            n_enc: 0,
            heads: 1,
            ff_dim: 4,
            dropout: 0.0,
            lr: 1e-3,
            batch_size: 2,
            epochs: 1,
            focal_gamma: 0.0,
            basis_l2: 0.0,
            seed: 3,
            task: Task::Regression,
            basis_hidden: vec![8, 8],
            head_hidden: vec![],
            positional_encoding: false,
            normalize_features: false,
            standardize_targets: false,
        };
        let m = DfmimModel::init(cfg).unwrap();
        let grid = m.grid();
        let x_curve = Curve::from_fn(grid.clone(), |t| libm::sin(5.0 * t) - 0.3).unwrap();
        let x = Tensor::col(x_curve.values().to_vec());

        let score = m.dfn_scores(&x).unwrap()[0];
        let theta = m.basis_curve(0, 0).unwrap();
        let oracle = theta.inner_product(&x_curve).unwrap();
        assert!(
            libm::fabs(score - oracle) < 1e-12,
            "score {score} vs quadrature {oracle}"
        );
    }

    #[test]
    fn head_zero_weights_output_biases() {
        let mut m = DfmimModel::init(tiny_config()).unwrap();
        let cfg = m.config().clone();
        let widths = {
            let mut w = vec![cfg.p * cfg.k];
            w.extend_from_slice(&cfg.head_hidden);
            w.push(cfg.out_dim());
            w
        };
        for l in 0..widths.len() - 1 {
            m.set_param(
                &format!("head.layer{l}.w"),
                Tensor::zeros(vec![widths[l], widths[l + 1]]),
            )
            .unwrap();
        }
        let final_l = widths.len() - 2;
        m.set_param(
            &format!("head.layer{final_l}.b"),
            Tensor::row(vec![0.3, -0.7, 1.1]),
        )
        .unwrap();
        let x = Tensor::from_fn(8, 2, |i, j| (i + j) as f64 * 0.05);
        let out = m.raw_output(&x).unwrap();
        assert_abs_diff_eq!(out[0], 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(out[1], -0.7, epsilon = 1e-14);
        assert_abs_diff_eq!(out[2], 1.1, epsilon = 1e-14);
    }

    #[test]
    fn batched_forward_matches_single_forward() {
        let m = DfmimModel::init(tiny_config()).unwrap();
        let xs: Vec<Tensor> = (0..5)
            .map(|s| Tensor::from_fn(8, 2, |i, j| ((s + 1) * (i + 2 * j + 1)) as f64 * 0.03))
            .collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let fwd = m.forward_batch(&refs, false, &mut Mode::Eval).unwrap();
        let batch_out = fwd.tape.value(fwd.output).clone();
        assert_eq!(batch_out.shape(), &[5, 3]);
        for (i, x) in xs.iter().enumerate() {
            let single = m.raw_output(x).unwrap();
            for j in 0..3 {
                assert_abs_diff_eq!(batch_out.at(i, j), single[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn penalty_hand_value_on_perfect_predictions() {
        // Regression model forced to predict target exactly; loss is
        // then the penalty alone: lambda * sum of squared basis weights.
        // All basis weights set to 1 with a 1-wide hidden layer:
        // each net has 1*1 + 1*1 = 2 unit entries; p*K = 4 nets -> 8;
        // lambda = 1e-4 -> penalty 8e-4. With a hand value of ten
        // entries: use 10 entries at 1.0 => 1e-3.
        let cfg = DfmimConfig {
            p: 1,
            k: 1,
            c: 2,
            n_grid: 4,
            n_enc: 0,
            heads: 1,
            ff_dim: 4,
            dropout: 0.0,
            lr: 0.0,
            batch_size: 1,
            epochs: 0,
            focal_gamma: 0.0,
            basis_l2: 1e-4,
            seed: 1,
            task: Task::Regression,
            basis_hidden: vec![5], // weights: 1x5 + 5x1 = 10 entries
            head_hidden: vec![],
            positional_encoding: false,
            normalize_features: false,
            standardize_targets: false,
        };
        let mut m = DfmimModel::init(cfg).unwrap();
        m.set_param("basis0_0.layer0.w", Tensor::new(vec![1, 5], vec![1.0; 5]).unwrap())
            .unwrap();
        m.set_param("basis0_0.layer1.w", Tensor::new(vec![5, 1], vec![1.0; 5]).unwrap())
            .unwrap();
        // Zero the head so predictions are 0, and use target 0.
        m.set_param("head.layer0.w", Tensor::zeros(vec![1, 1])).unwrap();
        let x = Tensor::col(vec![0.2, 0.4, 0.6, 0.8]);
        let mut fwd = m.forward_batch(&[&x], true, &mut Mode::Eval).unwrap();
        let loss = m
            .loss_on(&mut fwd, &BatchTargets::Values(vec![0.0]))
            .unwrap();
        assert_abs_diff_eq!(fwd.tape.scalar_value(loss), 1e-3, epsilon = 1e-15);
    }

    #[test]
    fn loss_rejects_task_mismatch() {
        let m = DfmimModel::init(tiny_config()).unwrap();
        let x = Tensor::zeros(vec![8, 2]);
        let mut fwd = m.forward_batch(&[&x], true, &mut Mode::Eval).unwrap();
        assert!(matches!(
            m.loss_on(&mut fwd, &BatchTargets::Values(vec![0.0])),
            Err(ModelError::TaskMismatch(_))
        ));
    }

    #[test]
    fn permutation_of_channels_and_parameters_is_consistent() {
        // Permuting input columns together with every parameter block
        // that indexes channels (encoder projections on both sides,
        // layer-norm columns, feed-forward first/last layers, basis-net
        // groups, head input rows) leaves the output unchanged.
        // Positional encoding must be off: its columns are fixed by
        // architecture, not parameters.
        let mut cfg = tiny_config();
        cfg.positional_encoding = false;
        cfg.normalize_features = false;
        let m = DfmimModel::init(cfg.clone()).unwrap();

        // The permutation swaps the two channels.
        let perm = [1usize, 0];
        let mut mp = DfmimModel::init(cfg.clone()).unwrap();
        let permute_square = |t: &Tensor| {
            Tensor::from_fn(t.rows(), t.cols(), |i, j| t.at(perm[i], perm[j]))
        };
        let permute_rows = |t: &Tensor| {
            Tensor::from_fn(t.rows(), t.cols(), |i, j| t.at(perm[i], j))
        };
        let permute_cols = |t: &Tensor| {
            Tensor::from_fn(t.rows(), t.cols(), |i, j| t.at(i, perm[j]))
        };
        for e in 0..cfg.n_enc {
            for mat in ["wq", "wk", "wv", "wo"] {
                let name = format!("enc{e}.{mat}");
                let t = permute_square(m.param(&name).unwrap());
                mp.set_param(&name, t).unwrap();
            }
            for vecname in ["ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"] {
                let name = format!("enc{e}.{vecname}");
                let t = permute_cols(m.param(&name).unwrap());
                mp.set_param(&name, t).unwrap();
            }
            let name = format!("enc{e}.ff.layer0.w");
            mp.set_param(&name, permute_rows(m.param(&name).unwrap())).unwrap();
            let name = format!("enc{e}.ff.layer1.w");
            mp.set_param(&name, permute_cols(m.param(&name).unwrap())).unwrap();
        }
        // Basis nets move with their channel.
        for j in 0..cfg.p {
            for k in 0..cfg.k {
                for l in 0..=cfg.basis_hidden.len() {
                    for wb in ["w", "b"] {
                        let src = format!("basis{}_{k}.layer{l}.{wb}", perm[j]);
                        let dst = format!("basis{j}_{k}.layer{l}.{wb}");
                        mp.set_param(&dst, m.param(&src).unwrap().clone()).unwrap();
                    }
                }
            }
        }
        // Head input rows follow the channel-major score layout.
        let head0 = m.param("head.layer0.w").unwrap();
        let permuted_head = Tensor::from_fn(head0.rows(), head0.cols(), |i, j| {
            let (ch, k) = (i / cfg.k, i % cfg.k);
            head0.at(perm[ch] * cfg.k + k, j)
        });
        mp.set_param("head.layer0.w", permuted_head).unwrap();

        let x = Tensor::from_fn(8, 2, |i, j| libm::sin((i + 1) as f64 * (j + 1) as f64));
        let xp = Tensor::from_fn(8, 2, |i, j| x.at(i, perm[j]));
        let out = m.raw_output(&x).unwrap();
        let outp = mp.raw_output(&xp).unwrap();
        for (a, b) in out.iter().zip(&outp) {
            assert!(libm::fabs(a - b) < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn multicurve_matrix_lays_channels_in_columns() {
        let g = Grid::new(4).unwrap();
        let c1 = Curve::from_fn(g.clone(), |t| t).unwrap();
        let c2 = Curve::from_fn(g.clone(), |t| 10.0 * t).unwrap();
        let mc = MultiCurve::new(vec![c1, c2]).unwrap();
        let m = multicurve_matrix(&mc);
        assert_eq!(m.shape(), &[4, 2]);
        for i in 0..4 {
            assert_eq!(m.at(i, 1), 10.0 * m.at(i, 0));
        }
    }
}
