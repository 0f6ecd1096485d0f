use rand::Rng as _;

use super::config::{LossWeights, ModelConfig};
use super::intensity::IntensityContext;
use crate::autodiff::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::bipartite::{structural_loss_on_tape, EdgeBatch, EmbeddingParams, PositiveEdge};
use crate::data::{log_gaps, Visit};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;

/// Probabilities are kept inside `[PROB_FLOOR, 1 − PROB_FLOOR]` in the code loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Marker {
    Graph(EmbeddingParams),
    Projection { w: ParamId, b: ParamId },
}

#[derive(Clone, Copy, Debug)]
struct Gru {
    /// Input weights; the decoder splits them into marker and context parts.
    wx: ParamId,
    wz: Option<ParamId>,
    wh: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Alignment {
    w_state: ParamId,
    w_hidden: ParamId,
    b: ParamId,
    v: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    w_out: ParamId,
    b_out: ParamId,
    w_hist: ParamId,
    w_casc: ParamId,
    w_mark: ParamId,
    slope: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ids {
    pub(crate) marker: Marker,
    time: Option<ParamId>,
    enc: Gru,
    dec: Gru,
    align: Option<Alignment>,
    head: Head,
}

/// Encoder–decoder point-process model over visit sequences.
#[derive(Clone, Debug)]
pub struct CascadeModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub(crate) ids: Ids,
}

/// Tape nodes of one forward pass over a visit sequence.
#[derive(Debug)]
pub struct Forward<T> {
    /// `[n, D_m]` markers.
    pub markers: Var,
    /// `[n, D]` encoder states.
    pub hidden: Var,
    /// `[steps, D]` decoder states.
    pub states: Var,
    /// `[steps, |C|]` next-visit code distributions.
    pub probs: Var,
    /// `[steps, 1]` log-intensity offsets and their parts.
    pub offset: Var,
    pub history_term: Var,
    pub cascade_term: Var,
    pub marker_term: Var,
    pub slope: Var,
    pub bias: Var,
    /// Attention over visits `1..=i` at each decoder step.
    pub attention: Vec<Vec<T>>,
}

/// Next-visit prediction after a prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub t_hat: T,
    pub gap_hat: T,
    pub probs: Vec<T>,
    pub attention: Vec<T>,
    pub intensity: IntensityContext<T>,
}

fn gru_step<T: Real>(tape: &mut Tape<T>, gx: Var, h: Var, wh: Var, d: usize) -> Result<Var> {
    let gh = tape.matmul(h, wh)?;
    let gx_ru = tape.slice(gx, 1, 0, 2 * d)?;
    let gh_ru = tape.slice(gh, 1, 0, 2 * d)?;
    let pre = tape.add(gx_ru, gh_ru)?;
    let ru = tape.sigmoid(pre)?;
    let r = tape.slice(ru, 1, 0, d)?;
    let u = tape.slice(ru, 1, d, d)?;
    let gx_n = tape.slice(gx, 1, 2 * d, d)?;
    let gh_n = tape.slice(gh, 1, 2 * d, d)?;
    let rg = tape.mul(r, gh_n)?;
    let pre_n = tape.add(gx_n, rg)?;
    let n = tape.tanh(pre_n)?;
    let diff = tape.sub(h, n)?;
    let keep = tape.mul(u, diff)?;
    tape.add(n, keep)
}

fn ones<T: Real>(tape: &mut Tape<T>, rows: usize) -> Result<Var> {
    tape.constant(Tensor::filled(&[rows, 1], T::one()))
}

/// Index of the largest entry, earliest on ties.
pub fn argmax_first<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> CascadeModel<T> {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (c, dm, dt, d) = (config.n_codes, config.marker_dim, config.time_dim, config.hidden_dim);
        let ab = config.ablation;
        let marker = if ab.no_graph {
            Marker::Projection {
                w: store.create("marker.w_proj", c, dm, Init::Xavier, rng)?,
                b: store.create("marker.b_proj", 1, dm, Init::Zeros, rng)?,
            }
        } else {
            Marker::Graph(EmbeddingParams::create(&mut store, c, dm, rng)?)
        };
        let time = if ab.scalar_time {
            None
        } else {
            Some(store.create("time.w_delta", 1, dt, Init::Gaussian { std: 0.01 }, rng)?)
        };
        let time_width = if ab.scalar_time { 1 } else { dt };
        let enc = Gru {
            wx: store.create("encoder.w_input", dm + time_width, 3 * d, Init::Xavier, rng)?,
            wz: None,
            wh: store.create("encoder.w_hidden", d, 3 * d, Init::Xavier, rng)?,
            b: store.create("encoder.b", 1, 3 * d, Init::Zeros, rng)?,
        };
        let dec = Gru {
            wx: store.create("decoder.w_marker", dm, 3 * d, Init::Xavier, rng)?,
            wz: Some(store.create("decoder.w_context", d, 3 * d, Init::Xavier, rng)?),
            wh: store.create("decoder.w_hidden", d, 3 * d, Init::Xavier, rng)?,
            b: store.create("decoder.b", 1, 3 * d, Init::Zeros, rng)?,
        };
        let align = if ab.no_cascade {
            None
        } else {
            Some(Alignment {
                w_state: store.create("align.w_state", d, d, Init::Xavier, rng)?,
                w_hidden: store.create("align.w_hidden", d, d, Init::Xavier, rng)?,
                b: store.create("align.b", 1, d, Init::Zeros, rng)?,
                v: store.create("align.v", d, 1, Init::Xavier, rng)?,
            })
        };
        let head = Head {
            w_out: store.create("output.w", d, c, Init::Xavier, rng)?,
            b_out: store.create("output.b", 1, c, Init::Zeros, rng)?,
            w_hist: store.create("intensity.w_history", d, 1, Init::Xavier, rng)?,
            w_casc: store.create("intensity.w_cascade", d, 1, Init::Xavier, rng)?,
            w_mark: store.create("intensity.w_marker", dm, 1, Init::Xavier, rng)?,
            slope: store.create("intensity.slope", 1, 1, Init::Zeros, rng)?,
            bias: store.create("intensity.bias", 1, 1, Init::Zeros, rng)?,
        };
        Ok(Self { config, store, ids: Ids { marker, time, enc, dec, align, head } })
    }

    /// Rebuild from a parameter store holding every expected tensor.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        // Build a template to learn names and shapes, then check the store.
        let template = Self::new(config, &mut crate::rng::substream(0, crate::rng::Stream::Init, 0))?;
        if template.store.len() != store.len() {
            return invalid(format!("expected {} parameters, found {}", template.store.len(), store.len()));
        }
        for (_, p) in template.store.iter() {
            let id = store.id(&p.name)?;
            if store.value(id).shape() != p.value.shape() {
                return invalid(format!("parameter `{}` has shape {:?}, expected {:?}", p.name, store.value(id).shape(), p.value.shape()));
            }
        }
        let remap = |id: ParamId| store.id(&template.store.get(id).name).expect("checked");
        let t = template.ids;
        let marker = match t.marker {
            Marker::Graph(_) => Marker::Graph(EmbeddingParams::lookup(&store)?),
            Marker::Projection { w, b } => Marker::Projection { w: remap(w), b: remap(b) },
        };
        let gru = |g: Gru| Gru { wx: remap(g.wx), wz: g.wz.map(remap), wh: remap(g.wh), b: remap(g.b) };
        let ids = Ids {
            marker,
            time: t.time.map(remap),
            enc: gru(t.enc),
            dec: gru(t.dec),
            align: t.align.map(|a| Alignment { w_state: remap(a.w_state), w_hidden: remap(a.w_hidden), b: remap(a.b), v: remap(a.v) }),
            head: Head {
                w_out: remap(t.head.w_out),
                b_out: remap(t.head.b_out),
                w_hist: remap(t.head.w_hist),
                w_casc: remap(t.head.w_casc),
                w_mark: remap(t.head.w_mark),
                slope: remap(t.head.slope),
                bias: remap(t.head.bias),
            },
        };
        Ok(Self { config, store, ids })
    }

    pub fn graph_params(&self) -> Option<&EmbeddingParams> {
        match &self.ids.marker {
            Marker::Graph(p) => Some(p),
            Marker::Projection { .. } => None,
        }
    }

    pub(crate) fn time_bias_id(&self) -> ParamId {
        self.ids.head.bias
    }

    fn check_visits(&self, visits: &[Visit]) -> Result<()> {
        if visits.is_empty() {
            return invalid("empty visit sequence");
        }
        for v in visits {
            if let Some(&c) = v.codes.last() {
                if c >= self.config.n_codes {
                    return Err(Error::Invalid(format!("code index {c} outside taxonomy of {}", self.config.n_codes)));
                }
            }
        }
        Ok(())
    }

    /// Most recent visits within the sequence-length cap.
    pub fn truncate<'a>(&self, visits: &'a [Visit]) -> &'a [Visit] {
        let n = visits.len();
        &visits[n.saturating_sub(self.config.max_seq_len)..]
    }

    /// Marker rows for `visits` as an `[n, D_m]` node.
    pub fn markers_on_tape(&self, tape: &mut Tape<T>, visits: &[Visit]) -> Result<Var> {
        match &self.ids.marker {
            Marker::Graph(p) => p.visits_on_tape(tape, &self.store, visits),
            Marker::Projection { w, b } => {
                let n_codes = self.config.n_codes;
                let mut data = Vec::with_capacity(visits.len() * n_codes);
                for v in visits {
                    data.extend(v.multi_hot::<T>(n_codes));
                }
                let x = tape.constant(Tensor::matrix(visits.len(), n_codes, data)?)?;
                let w = tape.param(&self.store, *w);
                let b = tape.param(&self.store, *b);
                let o = ones(tape, visits.len())?;
                let xw = tape.matmul(x, w)?;
                let bias = tape.matmul(o, b)?;
                tape.add(xw, bias)
            }
        }
    }

    /// Encoder over all of `visits`, decoder for the first `steps` of them.
    /// Decoder step `i` sees visits `1..=i` only.
    pub fn forward(&self, tape: &mut Tape<T>, visits: &[Visit], steps: usize) -> Result<Forward<T>> {
        self.check_visits(visits)?;
        let n = visits.len();
        if steps == 0 || steps > n {
            return invalid(format!("decoder steps {steps} outside 1..={n}"));
        }
        let d = self.config.hidden_dim;
        let ids = self.ids;
        let p = |tape: &mut Tape<T>, id: ParamId| tape.param(&self.store, id);

        let markers = self.markers_on_tape(tape, visits)?;
        let gaps: Vec<T> = log_gaps(visits)?;
        let gap_col = tape.constant(Tensor::matrix(n, 1, gaps)?)?;
        let time_feat = match ids.time {
            Some(w_delta) => {
                let w = p(tape, w_delta);
                tape.matmul(gap_col, w)?
            }
            None => gap_col,
        };
        let enc_in = tape.concat(&[markers, time_feat], 1)?;
        let ones_n = ones(tape, n)?;

        let (wx, wh, b) = (p(tape, ids.enc.wx), p(tape, ids.enc.wh), p(tape, ids.enc.b));
        let gx_lin = tape.matmul(enc_in, wx)?;
        let gx_bias = tape.matmul(ones_n, b)?;
        let gx_all = tape.add(gx_lin, gx_bias)?;
        let mut h = tape.constant(Tensor::zeros(&[1, d]))?;
        let mut hs = Vec::with_capacity(n);
        for i in 0..n {
            let gx = tape.slice(gx_all, 0, i, 1)?;
            h = gru_step(tape, gx, h, wh, d)?;
            hs.push(h);
        }
        let hidden = tape.concat(&hs, 0)?;

        let dwx = p(tape, ids.dec.wx);
        let dwz = p(tape, ids.dec.wz.expect("decoder has context weights"));
        let dwh = p(tape, ids.dec.wh);
        let db = p(tape, ids.dec.b);
        let marker_steps = tape.slice(markers, 0, 0, steps)?;
        let ones_s = ones(tape, steps)?;
        let gv_lin = tape.matmul(marker_steps, dwx)?;
        let gv_bias = tape.matmul(ones_s, db)?;
        let gv_all = tape.add(gv_lin, gv_bias)?;

        let align = match ids.align {
            Some(a) => {
                let wh_a = p(tape, a.w_hidden);
                Some((a, tape.matmul(hidden, wh_a)?))
            }
            None => None,
        };

        let mut s = tape.constant(Tensor::zeros(&[1, d]))?;
        let mut ss = Vec::with_capacity(steps);
        let mut attention = Vec::with_capacity(steps);
        for i in 0..steps {
            let z = match &align {
                None => {
                    let mut theta = vec![T::zero(); i + 1];
                    theta[i] = T::one();
                    attention.push(theta);
                    hs[i]
                }
                Some((a, hidden_proj)) => {
                    let ws = p(tape, a.w_state);
                    let ab = p(tape, a.b);
                    let av = p(tape, a.v);
                    let q_lin = tape.matmul(s, ws)?;
                    let q = tape.add(q_lin, ab)?;
                    let ones_i = ones(tape, i + 1)?;
                    let q_rep = tape.matmul(ones_i, q)?;
                    let keys = tape.slice(*hidden_proj, 0, 0, i + 1)?;
                    let pre = tape.add(q_rep, keys)?;
                    let act = tape.tanh(pre)?;
                    let scores_col = tape.matmul(act, av)?;
                    let scores = tape.transpose(scores_col)?;
                    let soft = tape.softmax_lastdim(scores)?;
                    let theta = if self.config.ablation.single_parent {
                        let best = argmax_first(tape.value(scores).data());
                        let mut hard = vec![T::zero(); i + 1];
                        hard[best] = T::one();
                        tape.straight_through(Tensor::row(hard), soft)?
                    } else {
                        soft
                    };
                    attention.push(tape.value(theta).data().to_vec());
                    let past = tape.slice(hidden, 0, 0, i + 1)?;
                    tape.matmul(theta, past)?
                }
            };
            let gv = tape.slice(gv_all, 0, i, 1)?;
            let gz = tape.matmul(z, dwz)?;
            let gx = tape.add(gv, gz)?;
            s = gru_step(tape, gx, s, dwh, d)?;
            ss.push(s);
        }
        let states = tape.concat(&ss, 0)?;

        let h = ids.head;
        let w_out = p(tape, h.w_out);
        let b_out = p(tape, h.b_out);
        let logits_lin = tape.matmul(states, w_out)?;
        let logits_bias = tape.matmul(ones_s, b_out)?;
        let logits = tape.add(logits_lin, logits_bias)?;
        let probs = tape.softmax_lastdim(logits)?;

        let hidden_steps = tape.slice(hidden, 0, 0, steps)?;
        let w_hist = p(tape, h.w_hist);
        let w_casc = p(tape, h.w_casc);
        let w_mark = p(tape, h.w_mark);
        let history_term = tape.matmul(hidden_steps, w_hist)?;
        let cascade_term = tape.matmul(states, w_casc)?;
        let marker_term = tape.matmul(marker_steps, w_mark)?;
        let bias = p(tape, h.bias);
        let slope = p(tape, h.slope);
        let hc = tape.add(history_term, cascade_term)?;
        let hcm = tape.add(hc, marker_term)?;
        let offset = tape.add(hcm, bias)?;

        Ok(Forward { markers, hidden, states, probs, offset, history_term, cascade_term, marker_term, slope, bias, attention })
    }

    /// Per-patient joint loss `(Σ_i [L_d(i) + α L_t(i)] + β L_s) / (N − 1)`.
    ///
    /// `edges` index visits of `visits` unless `foreign` supplies the visit
    /// sequences they refer to (random edge sampling).
    pub fn patient_loss(
        &self,
        tape: &mut Tape<T>,
        visits: &[Visit],
        edges: &[PositiveEdge],
        foreign: Option<&[&[Visit]]>,
        weights: LossWeights,
    ) -> Result<Var> {
        let n = visits.len();
        if n < 2 {
            return invalid("a patient needs at least two visits to contribute a loss");
        }
        let steps = n - 1;
        let fw = self.forward(tape, visits, steps)?;
        let c = self.config.n_codes;

        let mut targets = Vec::with_capacity(steps * c);
        for v in &visits[1..] {
            targets.extend(v.multi_hot::<T>(c));
        }
        let x = tape.constant(Tensor::matrix(steps, c, targets)?)?;
        let floor = T::lit(PROB_FLOOR);
        let pc = tape.clamp(fw.probs, floor, T::one() - floor)?;
        let lp = tape.log(pc)?;
        let one = tape.constant_scalar(T::one())?;
        let qc = tape.sub(one, pc)?;
        let lq = tape.log(qc)?;
        let notx = tape.sub(one, x)?;
        let pos = tape.mul(x, lp)?;
        let neg = tape.mul(notx, lq)?;
        let pos_s = tape.sum(pos)?;
        let neg_s = tape.sum(neg)?;
        let ll = tape.add(pos_s, neg_s)?;
        let disease = tape.neg(ll)?;

        let mut total = disease;
        if weights.alpha != 0.0 {
            let gaps: Vec<T> = visits.windows(2).map(|w| T::lit(w[1].time - w[0].time)).collect();
            let nll = tape.time_nll(fw.offset, fw.slope, &gaps)?;
            let lt = tape.sum(nll)?;
            let a = tape.constant_scalar(T::lit(weights.alpha))?;
            let wlt = tape.mul(a, lt)?;
            total = tape.add(total, wlt)?;
        }
        if weights.beta != 0.0 && !edges.is_empty() {
            if let Some(gp) = self.graph_params().copied() {
                let markers = fw.markers;
                let ls = structural_loss_on_tape(tape, &self.store, &gp, edges, |tape, e| match foreign {
                    Some(corpus) => gp.visits_on_tape(tape, &self.store, &corpus[e.patient][e.visit..=e.visit]),
                    None => tape.slice(markers, 0, e.visit, 1),
                })?;
                if let Some(ls) = ls {
                    let bt = tape.constant_scalar(T::lit(weights.beta))?;
                    let wls = tape.mul(bt, ls)?;
                    total = tape.add(total, wls)?;
                }
            }
        }
        let norm = tape.constant_scalar(T::one() / T::from_usize_lossy(steps))?;
        tape.mul(total, norm)
    }

    /// Batch-mean joint loss with edges sampled from the batch's own visits.
    pub fn joint_loss(&self, tape: &mut Tape<T>, batch: &[&[Visit]], edges: &EdgeBatch, weights: LossWeights) -> Result<Var> {
        if batch.is_empty() {
            return invalid("empty patient batch");
        }
        let mut losses = Vec::with_capacity(batch.len());
        for (pi, visits) in batch.iter().enumerate() {
            let own: Vec<PositiveEdge> = edges.for_patient(pi).cloned().collect();
            losses.push(self.patient_loss(tape, visits, &own, None, weights)?);
        }
        let all = tape.concat(&losses, 0)?;
        tape.mean(all)
    }

    /// Predictions after each of the first `steps` visits (truncated to the
    /// sequence-length cap first).
    pub fn predict_steps(&self, visits: &[Visit], steps: usize) -> Result<Vec<Prediction<T>>> {
        let full = visits.len();
        let visits = self.truncate(visits);
        let dropped = full - visits.len();
        let steps = steps.checked_sub(dropped).filter(|s| *s > 0).ok_or_else(|| {
            Error::Invalid("requested steps fall entirely in the truncated history".into())
        })?;
        let mut tape = Tape::inference();
        let fw = self.forward(&mut tape, visits, steps)?;
        let probs = tape.value(fw.probs).clone();
        let slope = tape.scalar(fw.slope);
        let bias = tape.scalar(fw.bias);
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let ctx = IntensityContext {
                history: tape.value(fw.history_term).data()[i],
                cascade: tape.value(fw.cascade_term).data()[i],
                marker: tape.value(fw.marker_term).data()[i],
                slope,
                bias,
                base_time: T::lit(visits[i].time),
            };
            let t_hat = ctx.expected_next_time()?;
            out.push(Prediction {
                t_hat,
                gap_hat: t_hat - ctx.base_time,
                probs: probs.row_slice(i).to_vec(),
                attention: fw.attention[i].clone(),
                intensity: ctx,
            });
        }
        Ok(out)
    }

    /// Next-visit prediction given a history prefix.
    pub fn predict(&self, prefix: &[Visit]) -> Result<Prediction<T>> {
        let n = prefix.len();
        let mut all = self.predict_steps(prefix, n)?;
        Ok(all.pop().expect("at least one step"))
    }

    /// Set the intensity bias so the initial rate equals `rate` per day.
    pub fn set_base_rate(&mut self, rate: f64) -> Result<()> {
        if !(rate > 0.0 && rate.is_finite()) {
            return invalid(format!("base rate {rate} must be positive"));
        }
        let id = self.time_bias_id();
        self.store.get_mut(id).value = Tensor::matrix(1, 1, vec![T::lit(rate.ln())])?;
        Ok(())
    }
}

/// Random multi-hot perturbation helper for tests of causality.
#[doc(hidden)]
pub fn perturb_visit(v: &Visit, n_codes: usize, rng: &mut Rng) -> Visit {
    let k = rng.gen_range(1..=n_codes.min(4));
    let codes: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n_codes)).collect();
    Visit::new(v.time + rng.gen_range(0.5..5.0), codes).expect("valid perturbed visit")
}
