//! Two-phase training loop: a continuous update of both networks, then an
//! asymmetric update of each network against the other's frozen sign codes,
//! with the correlation set expanded at every epoch boundary.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrmine::{correlation_stats, CorrelationMiner, CorrelationSet, MiningMode};
use crate::dataio::{DatasetBundle, FeatureMatrix, LabelMatrix};
use crate::error::{Error, Result};
use crate::hashnet::{sign_codes, Activation, HashNet, OptimizerConfig};
use crate::objective::{total_loss_and_grads, BatchSlice, Freeze, LossBreakdown, LossWeights};
use crate::simgraph::{build_semantic, cosine_matrix, SimilarityMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct TrainConfig {
    pub code_length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(rename = "Ks")]
    pub ks: usize,
    #[serde(rename = "Kr")]
    pub kr: usize,
    pub tau: usize,
    pub gamma: f64,
    pub weights: LossWeights,
    pub opt: OptimizerConfig,
    pub eta_base: f64,
    pub d_hidden: usize,
    pub seed: u64,
    pub adaptive_enabled: bool,
    pub bin_opt_enabled: bool,
    pub corr_enabled: bool,
    pub struct_enabled: bool,
    /// Mine first-order neighbor pairs instead of second-order ones.
    pub pair_corr: bool,
    pub activation: Activation,
    /// Take the asymmetric-phase sign codes from a fresh forward pass after
    /// the continuous update (otherwise reuse the pre-update outputs).
    pub recompute_after_continuous: bool,
    pub loss_reduction: LossReduction,
    pub threads: usize,
}

/// Scaling of the batch objective before the gradient step. Reported losses
/// are always the raw sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Sum,
    /// Divide by `m²`, the entry count of each batch similarity matrix.
    #[default]
    Mean,
}

impl LossReduction {
    pub fn factor(self, m: usize) -> f64 {
        match self {
            LossReduction::Sum => 1.0,
            LossReduction::Mean => 1.0 / (m * m) as f64,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            code_length: 64,
            epochs: 50,
            batch_size: 32,
            ks: 2000,
            kr: 50,
            tau: 1,
            gamma: 0.3,
            weights: LossWeights::default(),
            opt: OptimizerConfig::default(),
            eta_base: 1.0,
            d_hidden: 4096,
            seed: 0,
            adaptive_enabled: true,
            bin_opt_enabled: true,
            corr_enabled: true,
            struct_enabled: true,
            pair_corr: false,
            activation: Activation::Relu,
            recompute_after_continuous: true,
            loss_reduction: LossReduction::Mean,
            threads: 1,
        }
    }
}

pub const PROFILES: &[&str] = &["paper-default", "desk"];

impl TrainConfig {
    /// Built-in profiles. `desk` is the paper default scaled down for a
    /// 1000-instance training split.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper-default" => Ok(Self::default()),
            "desk" => Ok(Self {
                code_length: 32,
                epochs: 25,
                ks: 400,
                kr: 10,
                ..Self::default()
            }),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected one of {PROFILES:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("codeLength", self.code_length),
            ("epochs", self.epochs),
            ("batchSize", self.batch_size),
            ("Ks", self.ks),
            ("Kr", self.kr),
            ("tau", self.tau),
            ("dHidden", self.d_hidden),
            ("threads", self.threads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.eta_base.is_finite() && self.eta_base > 0.0) {
            return Err(Error::Config(format!("etaBase must be positive, got {}", self.eta_base)));
        }
        self.weights.validate()?;
        self.opt.validate()
    }

    /// Checks that also depend on the data.
    pub fn validate_for(&self, bundle: &DatasetBundle) -> Result<()> {
        self.validate()?;
        let m = bundle.split.train.len();
        if m == 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        if self.batch_size > m {
            return Err(Error::Config(format!(
                "batchSize {} exceeds training size {m}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// The settings training actually uses once ablation switches are
    /// applied: no structural term means `gamma = 0`, no correlation mining
    /// means `mu1 = 0`.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if !c.struct_enabled {
            c.gamma = 0.0;
        }
        if !c.corr_enabled {
            c.weights.mu1 = 0.0;
        }
        c
    }
}

pub fn eta_schedule(epoch: usize, eta_base: f64) -> f64 {
    eta_base * epoch as f64
}

/// Ablation variants, each a single switch on top of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ASSPH")]
    Full,
    #[serde(rename = "ASSPH_NoAdapt")]
    NoAdapt,
    #[serde(rename = "ASSPH_PairCorr")]
    PairCorr,
    #[serde(rename = "ASSPH_NoCorr")]
    NoCorr,
    #[serde(rename = "ASSPH_NoBinOpt")]
    NoBinOpt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAdapt,
        Variant::PairCorr,
        Variant::NoCorr,
        Variant::NoBinOpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "ASSPH",
            Variant::NoAdapt => "ASSPH_NoAdapt",
            Variant::PairCorr => "ASSPH_PairCorr",
            Variant::NoCorr => "ASSPH_NoCorr",
            Variant::NoBinOpt => "ASSPH_NoBinOpt",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoAdapt => c.adaptive_enabled = false,
            Variant::PairCorr => c.pair_corr = true,
            Variant::NoCorr => c.corr_enabled = false,
            Variant::NoBinOpt => c.bin_opt_enabled = false,
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_prefix("assph_").unwrap_or(&key);
        match key {
            "full" | "assph" => Ok(Variant::Full),
            "noadapt" => Ok(Variant::NoAdapt),
            "paircorr" => Ok(Variant::PairCorr),
            "nocorr" => Ok(Variant::NoCorr),
            "nobinopt" => Ok(Variant::NoBinOpt),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochRecord {
    pub epoch: usize,
    pub eta: f64,
    pub iterations: usize,
    /// Mean continuous-phase loss over the epoch's iterations.
    pub loss: LossBreakdown,
    /// Mean of the two asymmetric sub-step losses, when that phase ran.
    pub binary_loss: Option<f64>,
    pub correlation_count: u64,
    pub correlation_growth: u64,
    pub correlation_precision: Option<f64>,
    pub second_order_calls: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    /// Copy with wall times zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        for r in &mut h.records {
            r.wall_seconds = 0.0;
        }
        h
    }
}

/// Training-set state carried between epochs.
pub struct Trainer {
    cfg: TrainConfig,
    image_x: Array2<f64>,
    text_x: Array2<f64>,
    labels: Option<LabelMatrix>,
    similarity: SimilarityMatrix,
    correlation: CorrelationSet,
    miner: CorrelationMiner,
    image: HashNet,
    text: HashNet,
    rng: ChaCha8Rng,
    history: TrainHistory,
}

pub struct TrainOutcome {
    pub image: HashNet,
    pub text: HashNet,
    pub history: TrainHistory,
    pub correlation: CorrelationSet,
}

fn rows_of(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

impl Trainer {
    pub fn new(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<Self> {
        bundle.validate()?;
        cfg.validate_for(bundle)?;
        let cfg = cfg.effective();
        let train = &bundle.split.train;
        let fi: FeatureMatrix = bundle.image.select(train);
        let ft: FeatureMatrix = bundle.text.select(train);

        let similarity = build_semantic(&fi, &ft, cfg.ks, cfg.gamma)?;
        let mode = if cfg.pair_corr {
            MiningMode::Pairwise
        } else {
            MiningMode::SecondOrder
        };
        let mut miner = CorrelationMiner::new(cfg.kr, cfg.tau, mode);
        let correlation = if cfg.corr_enabled {
            miner.init(&cosine_matrix(&fi), &cosine_matrix(&ft))?
        } else {
            CorrelationSet::identity(train.len())
        };

        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
        let image = HashNet::init(fi.dim(), cfg.d_hidden, cfg.code_length, seeds.next_u64(), cfg.activation)?;
        let text = HashNet::init(ft.dim(), cfg.d_hidden, cfg.code_length, seeds.next_u64(), cfg.activation)?;
        let rng = ChaCha8Rng::seed_from_u64(seeds.next_u64());
        let labels = bundle.labels.as_ref().map(|l| l.select(train));

        Ok(Self {
            image_x: fi.to_f64(),
            text_x: ft.to_f64(),
            labels,
            similarity,
            correlation,
            miner,
            image,
            text,
            rng,
            history: TrainHistory::default(),
            cfg,
        })
    }

    /// Effective configuration (ablation switches applied).
    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn similarity(&self) -> &SimilarityMatrix {
        &self.similarity
    }

    pub fn correlation(&self) -> &CorrelationSet {
        &self.correlation
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn nets(&self) -> (&HashNet, &HashNet) {
        (&self.image, &self.text)
    }

    pub fn second_order_calls(&self) -> usize {
        self.miner.second_order_calls()
    }

    /// Continuous codes of the whole training split at `eta`.
    pub fn full_forward(&self, eta: f64) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((
            self.image.forward(self.image_x.view(), eta)?,
            self.text.forward(self.text_x.view(), eta)?,
        ))
    }

    fn batch(&self, idx: &[usize]) -> Result<BatchSlice> {
        let s = self
            .similarity
            .values()
            .select(Axis(0), idx)
            .select(Axis(1), idx);
        BatchSlice::new(idx.to_vec(), s, self.correlation.slice(idx))
    }

    fn step_net(
        net: &mut HashNet,
        x: ArrayView2<f64>,
        eta: f64,
        cache: &crate::hashnet::ForwardCache,
        mut grad: Array2<f64>,
        scale: f64,
        opt: &OptimizerConfig,
    ) -> Result<()> {
        grad *= scale;
        let g = net.backward_from_cache(x, eta, cache, grad.view())?;
        net.sgd_step(&g, opt)
    }

    fn check_loss(loss: f64, epoch: usize, iteration: usize, phase: &str) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence(format!(
                "non-finite {phase} loss at epoch {epoch}, iteration {iteration}"
            )))
        }
    }

    fn iteration(&mut self, idx: &[usize], eta: f64, epoch: usize, it: usize) -> Result<(LossBreakdown, Option<f64>)> {
        let cfg = &self.cfg;
        let scale = cfg.loss_reduction.factor(idx.len());
        let batch = self.batch(idx)?;
        let xi = rows_of(&self.image_x, idx);
        let xt = rows_of(&self.text_x, idx);
        let at = |e: Error| match e {
            Error::Divergence(msg) => Error::Divergence(format!("{msg} (epoch {epoch}, iteration {it})")),
            other => other,
        };

        let ci = self.image.forward_cached(xi.view(), eta)?;
        let ct = self.text.forward_cached(xt.view(), eta)?;
        let lg = total_loss_and_grads(ci.output.view(), ct.output.view(), &batch, &cfg.weights, Freeze::None)
            .map_err(at)?;
        Self::check_loss(lg.loss.total, epoch, it, "continuous")?;
        log::trace!(
            "epoch {epoch} it {it}: loss {:.3} |h| {:.4} |dh| {:.4}",
            lg.loss.total,
            ci.output.mapv(f64::abs).mean().unwrap_or(0.0),
            lg.grad_image.mapv(f64::abs).mean().unwrap_or(0.0)
        );
        Self::step_net(&mut self.image, xi.view(), eta, &ci, lg.grad_image, scale, &cfg.opt).map_err(at)?;
        Self::step_net(&mut self.text, xt.view(), eta, &ct, lg.grad_text, scale, &cfg.opt).map_err(at)?;

        if !cfg.bin_opt_enabled {
            return Ok((lg.loss, None));
        }
        let (hi, ht) = if cfg.recompute_after_continuous {
            (self.image.forward(xi.view(), eta)?, self.text.forward(xt.view(), eta)?)
        } else {
            (ci.output, ct.output)
        };
        let bi = sign_codes(hi.view()).to_f64();
        let bt = sign_codes(ht.view()).to_f64();

        let ci = self.image.forward_cached(xi.view(), eta)?;
        let li = total_loss_and_grads(ci.output.view(), bt.view(), &batch, &cfg.weights, Freeze::FreezeText)
            .map_err(at)?;
        Self::check_loss(li.loss.total, epoch, it, "image binary")?;
        Self::step_net(&mut self.image, xi.view(), eta, &ci, li.grad_image, scale, &cfg.opt).map_err(at)?;

        let ct = self.text.forward_cached(xt.view(), eta)?;
        let lt = total_loss_and_grads(bi.view(), ct.output.view(), &batch, &cfg.weights, Freeze::FreezeImage)
            .map_err(at)?;
        Self::check_loss(lt.loss.total, epoch, it, "text binary")?;
        Self::step_net(&mut self.text, xt.view(), eta, &ct, lt.grad_text, scale, &cfg.opt).map_err(at)?;

        Ok((lg.loss, Some(0.5 * (li.loss.total + lt.loss.total))))
    }

    /// Runs the next epoch and returns its record.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.history.records.len() + 1;
        let eta = eta_schedule(epoch, self.cfg.eta_base);
        let m = self.cfg.batch_size;
        let n = self.image_x.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);

        let iterations = n / m;
        let mut sum = LossBreakdown::default();
        let mut bin_sum = 0.0;
        let mut bin_any = false;
        for it in 0..iterations {
            let (l, b) = self.iteration(&perm[it * m..(it + 1) * m], eta, epoch, it + 1)?;
            sum.total += l.total;
            sum.reconstruction += l.reconstruction;
            sum.correlation += l.correlation;
            sum.alignment += l.alignment;
            if let Some(b) = b {
                bin_sum += b;
                bin_any = true;
            }
        }
        let k = iterations as f64;
        let loss = LossBreakdown {
            total: sum.total / k,
            reconstruction: sum.reconstruction / k,
            correlation: sum.correlation / k,
            alignment: sum.alignment / k,
        };

        let before = self.correlation.count();
        if self.cfg.adaptive_enabled && self.cfg.corr_enabled {
            let (hi, ht) = self.full_forward(eta)?;
            self.correlation = self.miner.update(&self.correlation, hi.view(), ht.view())?;
        }
        let count = self.correlation.count();
        let correlation_precision = match &self.labels {
            Some(l) => Some(correlation_stats(&self.correlation, l)?.precision),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            eta,
            iterations,
            loss,
            binary_loss: bin_any.then(|| bin_sum / k),
            correlation_count: count,
            correlation_growth: count - before,
            correlation_precision,
            second_order_calls: self.miner.second_order_calls(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} |R| {count} (+{}) eta {eta}",
            record.loss.total,
            record.correlation_growth
        );
        self.history.records.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs. Returned parameters are rounded to f32 so
    /// they equal what the checkpoints store.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.history.records.len() < self.cfg.epochs {
            self.train_epoch()?;
        }
        self.image.round_to_f32();
        self.text.round_to_f32();
        Ok(TrainOutcome {
            image: self.image,
            text: self.text,
            history: self.history,
            correlation: self.correlation,
        })
    }
}

pub fn train(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(bundle, cfg)?.run()
}
