//! Prosody track: conditional flow matching over two stages. Stage 1
//! transports noise to the 5-component prosody target vector; stage 2
//! transports noise to a fixed-grid pitch modulation curve conditioned on
//! the coarse output. Sampling is plain Euler integration with
//! classifier-free guidance.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::losses::norm_term;
use crate::adapter::model::band_histogram;
use crate::adapter::PROSODY_DIM;
use crate::corpus::{Archetype, Corpus, GroundTruthContour, PersonaConfig, Split};
use crate::error::{Error, Result};
use crate::num::checkpoint;
use crate::num::nn::{linear, Binding, Params};
use crate::num::optim::{cosine_lr, AdamConfig, AdamW};
use crate::num::signal::resample_linear;
use crate::num::tape::{Tape, Var};
use crate::num::tensor::Tensor;
use crate::rng::{next_normal, shuffled_indices, Seed};

/// Persona condition features plus the token band histogram.
pub const CONDITION_DIM: usize = 21;
/// Default fine-grid length.
pub const FINE_GRID: usize = 32;

/// Sampler configuration shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub cond_dropout_prob: f64,
    pub coarse_dim: usize,
    pub fine_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            steps: 8,
            cfg_scale: 2.0,
            cond_dropout_prob: 0.1,
            coarse_dim: PROSODY_DIM,
            fine_dim: FINE_GRID,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("flow steps must be >= 1".into()));
        }
        if self.cfg_scale < 0.0 {
            return Err(Error::Config(format!("cfg_scale {} must be >= 0", self.cfg_scale)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::Config(format!(
                "cond_dropout_prob {} must lie in [0,1)",
                self.cond_dropout_prob
            )));
        }
        if self.coarse_dim == 0 || self.fine_dim == 0 {
            return Err(Error::Config("flow dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that maps (x_t, t, condition) to a velocity of x's dimension.
/// `None` means the null condition. Closed-form fields plug in for tests.
pub trait Velocity {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>>;
}

/// Residual MLP velocity network with a learned null-condition token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNet {
    pub x_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
}

impl FlowNet {
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Params {
        let mut p = Params::new();
        p.init_linear(rng, "in", self.x_dim + 1 + self.cond_dim, self.hidden);
        p.init_linear(rng, "fc1", self.hidden, self.hidden);
        p.init_linear(rng, "fc2", self.hidden, self.hidden);
        p.init_linear(rng, "out", self.hidden, self.x_dim);
        p.insert("null", crate::num::nn::xavier_uniform(rng, 1, self.cond_dim));
        p
    }

    /// Velocity of a batch: `x` is B x x_dim, `t` B x 1, `cond` B x cond_dim.
    pub fn velocity_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: Var,
        t: Var,
        cond: Var,
    ) -> Result<Var> {
        let xt = tape.concat_cols(x, t)?;
        let inp = tape.concat_cols(xt, cond)?;
        let h = linear(tape, bind, "in", inp)?;
        let mut h = tape.gelu(h);
        let r = linear(tape, bind, "fc1", h)?;
        let r = tape.gelu(r);
        let r = linear(tape, bind, "fc2", r)?;
        h = tape.add(h, r)?;
        linear(tape, bind, "out", h)
    }
}

/// A velocity network paired with its weights.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub net: FlowNet,
    pub params: Params,
}

impl Velocity for FlowModel {
    fn dim(&self) -> usize {
        self.net.x_dim
    }

    fn velocity(&self, x: &[f64], t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.len() != self.net.x_dim {
            return Err(Error::shape("flow_velocity", format!("x has {} dims, net expects {}", x.len(), self.net.x_dim)));
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.params);
        let xv = tape.leaf(Tensor::row_vec(x.to_vec()));
        let tv = tape.leaf(Tensor::row_vec(vec![t]));
        let cv = match cond {
            Some(c) => {
                if c.len() != self.net.cond_dim {
                    return Err(Error::shape(
                        "flow_velocity",
                        format!("condition has {} dims, net expects {}", c.len(), self.net.cond_dim),
                    ));
                }
                tape.leaf(Tensor::row_vec(c.to_vec()))
            }
            None => bind.var(&mut tape, "null")?,
        };
        let v = self.net.velocity_on_tape(&mut tape, &mut bind, xv, tv, cv)?;
        Ok(tape.value(v).row(0).to_vec())
    }
}

/// The random choices behind one flow-matching loss sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmDraw {
    pub x0: Vec<f64>,
    pub t: f64,
    pub drop_cond: bool,
}

pub fn sample_draws(rng: &mut ChaCha8Rng, n: usize, dim: usize, dropout_prob: f64) -> Vec<CfmDraw> {
    (0..n)
        .map(|_| {
            let x0: Vec<f64> = (0..dim).map(|_| next_normal(rng)).collect();
            let t: f64 = rng.gen_range(0.0..1.0);
            let drop_cond = rng.gen_range(0.0..1.0) < dropout_prob;
            CfmDraw { x0, t, drop_cond }
        })
        .collect()
}

/// Straight-from-formula single-example loss: interpolate, evaluate the
/// field, return the squared Euclidean error against the target velocity.
pub fn cfm_loss_value(
    field: &dyn Velocity,
    x1: &[f64],
    cond: &[f64],
    draw: &CfmDraw,
) -> Result<f64> {
    if x1.len() != field.dim() || draw.x0.len() != x1.len() {
        return Err(Error::shape("cfm_loss", "x0/x1 dimension mismatch"));
    }
    let x_t: Vec<f64> = draw
        .x0
        .iter()
        .zip(x1)
        .map(|(x0, x1)| (1.0 - draw.t) * x0 + draw.t * x1)
        .collect();
    let v = field.velocity(&x_t, draw.t, if draw.drop_cond { None } else { Some(cond) })?;
    Ok(v
        .iter()
        .zip(draw.x0.iter().zip(x1))
        .map(|(v, (x0, x1))| {
            let tgt = x1 - x0;
            (v - tgt) * (v - tgt)
        })
        .sum())
}

/// Single-example training loss with freshly drawn noise, time, and
/// condition dropout.
pub fn cfm_train_loss(
    model: &FlowModel,
    x1: &[f64],
    cond: &[f64],
    dropout_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let draw = sample_draws(rng, 1, x1.len(), dropout_prob).remove(0);
    cfm_loss_value(model, x1, cond, &draw)
}

/// Batched loss on an open tape: mean over examples of the squared velocity
/// error. Dropped conditions route through the learned null token, which
/// therefore receives gradient.
pub fn cfm_batch_loss_on_tape(
    net: &FlowNet,
    tape: &mut Tape,
    bind: &mut Binding,
    x1s: &[Vec<f64>],
    conds: &[Vec<f64>],
    draws: &[CfmDraw],
) -> Result<Var> {
    if x1s.is_empty() || x1s.len() != conds.len() || x1s.len() != draws.len() {
        return Err(Error::shape("cfm_batch_loss", "x1/cond/draw counts differ"));
    }
    let b = x1s.len();
    let mut x_t = Tensor::zeros(b, net.x_dim);
    let mut t_col = Tensor::zeros(b, 1);
    let mut target = Tensor::zeros(b, net.x_dim);
    let mut cond_rows = Vec::with_capacity(b);
    for (i, ((x1, cond), draw)) in x1s.iter().zip(conds).zip(draws).enumerate() {
        if x1.len() != net.x_dim || draw.x0.len() != net.x_dim {
            return Err(Error::shape("cfm_batch_loss", "x dimension mismatch"));
        }
        for d in 0..net.x_dim {
            *x_t.at_mut(i, d) = (1.0 - draw.t) * draw.x0[d] + draw.t * x1[d];
            *target.at_mut(i, d) = x1[d] - draw.x0[d];
        }
        *t_col.at_mut(i, 0) = draw.t;
        if draw.drop_cond {
            cond_rows.push(bind.var(tape, "null")?);
        } else {
            if cond.len() != net.cond_dim {
                return Err(Error::shape("cfm_batch_loss", "condition dimension mismatch"));
            }
            cond_rows.push(tape.leaf(Tensor::row_vec(cond.clone())));
        }
    }
    let x = tape.leaf(x_t);
    let t = tape.leaf(t_col);
    let cond = tape.concat_rows(&cond_rows)?;
    let v = net.velocity_on_tape(tape, bind, x, t, cond)?;
    let tgt = tape.leaf(target);
    norm_term(tape, v, tgt, true)
}

/// Euler sampler with classifier-free guidance. `bounds` clamps the final
/// state to the prosody domain, one (lo, hi) pair per dimension.
///
/// cfg_scale 1 evaluates only the conditional branch (so the identity
/// v_cfg = v_cond holds exactly); cfg_scale 0 evaluates only the null
/// branch and is bit-identical to unconditional sampling.
pub fn flow_sample(
    field: &dyn Velocity,
    steps: usize,
    cfg_scale: f64,
    cond: &[f64],
    bounds: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("flow steps must be >= 1".into()));
    }
    let dim = field.dim();
    if bounds.len() != dim {
        return Err(Error::shape("flow_sample", format!("{} bounds for {dim} dims", bounds.len())));
    }
    let mut x: Vec<f64> = (0..dim).map(|_| next_normal(rng)).collect();
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = if cfg_scale == 1.0 {
            field.velocity(&x, t, Some(cond))?
        } else if cfg_scale == 0.0 {
            field.velocity(&x, t, None)?
        } else {
            let v_null = field.velocity(&x, t, None)?;
            let v_cond = field.velocity(&x, t, Some(cond))?;
            v_null
                .iter()
                .zip(&v_cond)
                .map(|(n, c)| n + cfg_scale * (c - n))
                .collect()
        };
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    for (xi, (lo, hi)) in x.iter_mut().zip(bounds) {
        *xi = xi.clamp(*lo, *hi);
    }
    Ok(x)
}

/// Domain of the coarse prosody vector: VAD in [0,1], relative scalars in
/// [-1,1].
pub fn coarse_bounds() -> Vec<(f64, f64)> {
    vec![(0.0, 1.0), (0.0, 1.0), (0.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)]
}

/// Domain of the fine modulation curve. Targets are range-normalized pitch
/// offsets; they stay well inside two range units.
pub fn fine_bounds(fine_dim: usize) -> Vec<(f64, f64)> {
    vec![(-2.0, 2.0); fine_dim]
}

/// Persona condition features: archetype one-hot, volatility, speech
/// pattern one-hot, scaled base profile, token band histogram.
pub fn persona_condition(persona: &PersonaConfig, tokens: &[u32]) -> Vec<f64> {
    let mut c = Vec::with_capacity(CONDITION_DIM);
    for a in Archetype::ALL {
        c.push(if a == persona.archetype { 1.0 } else { 0.0 });
    }
    c.push(persona.volatility);
    for p in crate::corpus::SpeechPattern::ALL {
        c.push(if p == persona.speech_pattern { 1.0 } else { 0.0 });
    }
    let bp = &persona.base_profile;
    c.push(bp.base_f0 / 300.0);
    c.push(bp.f0_range / 60.0);
    c.push(bp.base_energy);
    c.push(bp.base_rate / 7.0);
    c.extend_from_slice(&band_histogram(tokens));
    debug_assert_eq!(c.len(), CONDITION_DIM);
    c
}

/// Fine-stage regression target: the utterance's f0 contour resampled to
/// the fixed grid, centered on its own mean and normalized by the
/// character's pitch range.
pub fn fine_target(contour: &GroundTruthContour, f0_range: f64, grid: usize) -> Result<Vec<f64>> {
    if f0_range <= 0.0 {
        return Err(Error::domain("fine_target", format!("f0_range {f0_range} must be positive")));
    }
    let mean = contour.f0.iter().sum::<f64>() / contour.f0.len() as f64;
    let resampled = resample_linear(&contour.f0, grid)?;
    Ok(resampled.iter().map(|v| (v - mean) / f0_range).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowStageKind {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Training hyperparameters for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
}

impl FlowTrainConfig {
    pub fn desk() -> Self {
        FlowTrainConfig { hidden_dim: 64, epochs: 40, lr: 3e-3, lr_floor: 1e-5, batch_size: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("flow training dims/epochs/batch must be positive".into()));
        }
        if self.lr <= 0.0 || self.lr_floor < 0.0 || self.lr_floor > self.lr {
            return Err(Error::Config("flow lr must be positive and above its floor".into()));
        }
        Ok(())
    }
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One trained stage.
#[derive(Debug, Clone)]
pub struct FlowStage {
    pub kind: FlowStageKind,
    pub net: FlowNet,
    pub params: Params,
    pub log: Vec<FlowEpochLog>,
    /// Mean loss over the training rows with frozen draws, before training.
    pub initial_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct StageMeta {
    kind: String,
    stage: FlowStageKind,
    net: FlowNet,
    log: Vec<FlowEpochLog>,
    initial_loss: f64,
}

impl FlowStage {
    pub fn model(&self) -> FlowModel {
        FlowModel { net: self.net.clone(), params: self.params.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(StageMeta {
            kind: "flow-stage".into(),
            stage: self.kind,
            net: self.net.clone(),
            log: self.log.clone(),
            initial_loss: self.initial_loss,
        })?;
        checkpoint::save(path, &meta, &self.params.clone().into_map())
    }

    pub fn load(path: &Path) -> Result<FlowStage> {
        let (meta, tensors) = checkpoint::load(path)?;
        let meta: StageMeta = serde_json::from_value(meta)?;
        if meta.kind != "flow-stage" {
            return Err(Error::Data(format!("{} is not a flow stage checkpoint", path.display())));
        }
        Ok(FlowStage {
            kind: meta.stage,
            net: meta.net,
            params: Params::from_map(tensors),
            log: meta.log,
            initial_loss: meta.initial_loss,
        })
    }
}

/// Generic CFM training over (x1, cond) rows.
fn train_rows(
    net: &FlowNet,
    rows: &[(Vec<f64>, Vec<f64>)],
    tcfg: &FlowTrainConfig,
    dropout_prob: f64,
    seed: Seed,
    stream_tag: &str,
) -> Result<(Params, Vec<FlowEpochLog>, f64)> {
    if rows.is_empty() {
        return Err(Error::Data("no rows to train the flow stage on".into()));
    }
    let mut rng = seed.stream(&format!("{stream_tag}-init"));
    let mut params = net.init_params(&mut rng);
    let mut adam = AdamW::new(AdamConfig::default());

    let x1s_all: Vec<Vec<f64>> = rows.iter().map(|(x, _)| x.clone()).collect();
    let conds_all: Vec<Vec<f64>> = rows.iter().map(|(_, c)| c.clone()).collect();
    let mut init_rng = seed.stream(&format!("{stream_tag}-initial"));
    let init_draws = sample_draws(&mut init_rng, rows.len(), net.x_dim, dropout_prob);
    let initial_loss = {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&params);
        let loss =
            cfm_batch_loss_on_tape(net, &mut tape, &mut bind, &x1s_all, &conds_all, &init_draws)?;
        tape.value(loss).scalar()?
    };

    let mut log = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let lr = cosine_lr(tcfg.lr, tcfg.lr_floor, epoch, tcfg.epochs);
        let mut order_rng = seed.epoch_stream(&format!("{stream_tag}-shuffle"), epoch);
        let order = shuffled_indices(&mut order_rng, rows.len());
        let mut draw_rng = seed.epoch_stream(&format!("{stream_tag}-draw"), epoch);

        let mut sum = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let x1s: Vec<Vec<f64>> = batch.iter().map(|&i| rows[i].0.clone()).collect();
            let conds: Vec<Vec<f64>> = batch.iter().map(|&i| rows[i].1.clone()).collect();
            let draws = sample_draws(&mut draw_rng, batch.len(), net.x_dim, dropout_prob);
            let mut tape = Tape::new();
            let mut bind = Binding::new(&params);
            let loss = cfm_batch_loss_on_tape(net, &mut tape, &mut bind, &x1s, &conds, &draws)?;
            sum += tape.value(loss).scalar()? * batch.len() as f64;
            tape.backward(loss)?;
            let grads = bind.grads(&tape);
            adam.step(&mut params, &grads, lr);
        }
        log.push(FlowEpochLog { epoch, lr, loss: sum / rows.len() as f64 });
    }
    Ok((params, log, initial_loss))
}

/// Trains one stage on the corpus train split. The fine stage is teacher
/// forced: its condition carries the true coarse target, not a sample.
pub fn train_flow_stage(
    corpus: &Corpus,
    kind: FlowStageKind,
    fcfg: &FlowConfig,
    tcfg: &FlowTrainConfig,
    seed: Seed,
) -> Result<FlowStage> {
    fcfg.validate()?;
    tcfg.validate()?;
    let mut rows = Vec::new();
    for rec in corpus.split(Split::Train) {
        let persona = corpus.persona(&rec.utterance.character_id)?;
        let base = persona_condition(persona, &rec.utterance.token_ids);
        match kind {
            FlowStageKind::Coarse => {
                rows.push((rec.target.as_p5().to_vec(), base));
            }
            FlowStageKind::Fine => {
                let x1 = fine_target(&rec.contour, persona.base_profile.f0_range, fcfg.fine_dim)?;
                let mut cond = base;
                cond.extend_from_slice(&rec.target.as_p5());
                rows.push((x1, cond));
            }
        }
    }
    let net = match kind {
        FlowStageKind::Coarse => FlowNet {
            x_dim: fcfg.coarse_dim,
            cond_dim: CONDITION_DIM,
            hidden: tcfg.hidden_dim,
        },
        FlowStageKind::Fine => FlowNet {
            x_dim: fcfg.fine_dim,
            cond_dim: CONDITION_DIM + fcfg.coarse_dim,
            hidden: tcfg.hidden_dim,
        },
    };
    let tag = match kind {
        FlowStageKind::Coarse => "flow-coarse",
        FlowStageKind::Fine => "flow-fine",
    };
    let (params, log, initial_loss) =
        train_rows(&net, &rows, tcfg, fcfg.cond_dropout_prob, seed, tag)?;
    Ok(FlowStage { kind, net, params, log, initial_loss })
}

/// Output of the two-stage sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalSample {
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

/// Samples the coarse vector, then the fine curve conditioned on it.
/// Substreams are keyed by utterance id so batch order cannot change any
/// single utterance's draw.
pub fn hierarchical_predict(
    coarse: &FlowStage,
    fine: &FlowStage,
    fcfg: &FlowConfig,
    persona: &PersonaConfig,
    tokens: &[u32],
    utterance_id: &str,
    seed: Seed,
) -> Result<HierarchicalSample> {
    fcfg.validate()?;
    if coarse.kind != FlowStageKind::Coarse || fine.kind != FlowStageKind::Fine {
        return Err(Error::Config("hierarchical_predict got stages in the wrong roles".into()));
    }
    if coarse.net.x_dim != fcfg.coarse_dim || fine.net.x_dim != fcfg.fine_dim {
        return Err(Error::Config("stage dimensions disagree with the flow config".into()));
    }
    let base_cond = persona_condition(persona, tokens);
    let coarse_model = coarse.model();
    let mut rng = seed.stream(&format!("flow-sample/{utterance_id}/coarse"));
    let coarse_out = flow_sample(
        &coarse_model,
        fcfg.steps,
        fcfg.cfg_scale,
        &base_cond,
        &coarse_bounds(),
        &mut rng,
    )?;

    let mut fine_cond = base_cond;
    fine_cond.extend_from_slice(&coarse_out);
    let fine_model = fine.model();
    let mut rng = seed.stream(&format!("flow-sample/{utterance_id}/fine"));
    let fine_out = flow_sample(
        &fine_model,
        fcfg.steps,
        fcfg.cfg_scale,
        &fine_cond,
        &fine_bounds(fcfg.fine_dim),
        &mut rng,
    )?;
    Ok(HierarchicalSample { coarse: coarse_out, fine: fine_out })
}
