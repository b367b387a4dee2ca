//! The autoregressive LSTM policy that emits architecture actions.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{decode, Action, ArchDescription, ArchError, SearchSpace, TokenClass};
use crate::compiler::LstmParams;
use crate::numeric::{softmax_row, GraphOps, NodeId, NumericError, ParamSet, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("head for {class} has {got} outputs but the space lists {expected} choices")]
    HeadWidth {
        class: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parameter \"{0}\" is missing or has the wrong shape")]
    Params(String),
    #[error("a conv rollout needs at least one layer")]
    Depth,
    #[error("forced actions do not fit the schedule: {0}")]
    Trajectory(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub lstm_layers: usize,
    /// Weights start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            hidden: 35,
            lstm_layers: 2,
            init_range: 0.08,
        }
    }
}

/// One rollout: the actions taken, their log-probabilities and the
/// description they decode to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<Action>,
    /// One entry per action; a skip action's entry sums its bits.
    pub log_probs: Vec<f64>,
    pub description: ArchDescription,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Layers for conv descriptions, 0 for cells.
    pub fn depth(&self) -> usize {
        match &self.description {
            ArchDescription::Conv(a) => a.layers.len(),
            ArchDescription::Cell(_) => 0,
        }
    }
}

/// How each decision is made.
pub enum Policy<'a> {
    Sample(&'a mut dyn RngCore),
    /// Argmax tokens; a skip bit is on when its probability is at least 0.5.
    Greedy,
    Forced(&'a [Action]),
}

/// A trajectory plus the distributions that produced it.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Per action: softmax probabilities for a token, or the on-probability
    /// of each bit for a skip action.
    pub distributions: Vec<Vec<f64>>,
    /// Top-layer hidden state captured at each conv layer's anchor step.
    pub anchors: Vec<Vec<f64>>,
}

/// Slot layout and rollout logic for one search space.
#[derive(Clone, Debug)]
pub struct Controller {
    space: SearchSpace,
    config: ControllerConfig,
    heads: Vec<(TokenClass, usize)>,
    slots: BTreeMap<String, Vec<usize>>,
}

impl Controller {
    pub fn new(space: SearchSpace, config: ControllerConfig) -> Result<Self, ControllerError> {
        space.check()?;
        let h = config.hidden;
        let heads: Vec<(TokenClass, usize)> = TokenClass::ALL
            .iter()
            .filter_map(|&c| c.width(&space).map(|w| (c, w)))
            .collect();
        let mut slots = BTreeMap::new();
        slots.insert("embed.start".to_string(), vec![1, h]);
        for &(class, w) in &heads {
            slots.insert(format!("embed.{}", class.name()), vec![w, h]);
            slots.insert(format!("head.{}.w", class.name()), vec![h, w]);
            slots.insert(format!("head.{}.b", class.name()), vec![w]);
        }
        for l in 0..config.lstm_layers {
            slots.insert(format!("lstm{l}.wx"), vec![h, 4 * h]);
            slots.insert(format!("lstm{l}.wh"), vec![h, 4 * h]);
            slots.insert(format!("lstm{l}.b"), vec![4 * h]);
        }
        if matches!(&space, SearchSpace::Conv(s) if s.skip_connections) {
            slots.insert("attn.w_prev".into(), vec![h, h]);
            slots.insert("attn.w_curr".into(), vec![h, h]);
            slots.insert("attn.v".into(), vec![h, 1]);
        }
        Ok(Controller {
            space,
            config,
            heads,
            slots,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn slots(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.slots
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let r = self.config.init_range;
        self.slots
            .iter()
            .map(|(name, shape)| (name.clone(), Tensor::uniform(shape, -r, r, rng)))
            .collect()
    }

    fn check_params(&self, params: &ParamSet) -> Result<(), ControllerError> {
        for &(class, w) in &self.heads {
            let name = format!("head.{}.b", class.name());
            if let Some(t) = params.get(&name) {
                if t.shape() != [w] {
                    return Err(ControllerError::HeadWidth {
                        class: class.name(),
                        expected: w,
                        got: t.shape()[0],
                    });
                }
            }
        }
        for (name, shape) in &self.slots {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(ControllerError::Params(name.clone())),
            }
        }
        Ok(())
    }

    /// Samples with a generator seeded from `seed`; the seed is stored on
    /// the trajectory.
    pub fn sample(&self, params: &ParamSet, depth: usize, seed: u64) -> Result<Trajectory, ControllerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = self.rollout(params, depth, Policy::Sample(&mut rng))?.trajectory;
        t.seed = Some(seed);
        Ok(t)
    }

    pub fn greedy(&self, params: &ParamSet, depth: usize) -> Result<Trajectory, ControllerError> {
        Ok(self.rollout(params, depth, Policy::Greedy)?.trajectory)
    }

    pub fn rollout(&self, params: &ParamSet, depth: usize, policy: Policy<'_>) -> Result<Rollout, ControllerError> {
        self.check_params(params)?;
        let mut tape = Tape::new(params);
        let out = self.run(&mut tape, depth, policy)?;
        let description = decode(&self.space, &out.actions)?;
        Ok(Rollout {
            trajectory: Trajectory {
                actions: out.actions,
                log_probs: out.log_probs,
                description,
                seed: None,
            },
            distributions: out.distributions,
            anchors: out.anchors,
        })
    }

    /// Recomputes the trajectory's log-probability under `params` along
    /// with its gradient for every controller slot.
    pub fn log_prob(&self, params: &ParamSet, trajectory: &Trajectory) -> Result<(f64, ParamSet), ControllerError> {
        self.check_params(params)?;
        let mut tape = Tape::new(params);
        let out = self.run(&mut tape, trajectory.depth(), Policy::Forced(&trajectory.actions))?;
        let total = out.total.expect("every schedule has at least one action");
        let value = tape.value(total).item();
        let mut grads = tape.backward(total, &Tensor::scalar(1.0))?;
        for (name, shape) in &self.slots {
            if !grads.contains(name) {
                grads.insert(name.clone(), Tensor::zeros(shape));
            }
        }
        Ok((value, grads))
    }

    fn run(&self, tape: &mut Tape<'_>, depth: usize, mut policy: Policy<'_>) -> Result<RunOutput, ControllerError> {
        let h = self.config.hidden;
        let lstms = (0..self.config.lstm_layers)
            .map(|l| LstmParams::declare(tape, &format!("lstm{l}"), h, h))
            .collect::<Result<Vec<_>, _>>()?;
        let zero = tape.constant(Tensor::zeros(&[1, h]));
        let mut st = State {
            lstms,
            hc: vec![(zero, zero); self.config.lstm_layers],
            out: RunOutput::default(),
        };
        let mut x = tape.param("embed.start", &[1, h])?;
        match &self.space {
            SearchSpace::Conv(s) => {
                if depth == 0 {
                    return Err(ControllerError::Depth);
                }
                let mut tokens = vec![TokenClass::FilterHeight, TokenClass::FilterWidth];
                if s.strides.is_some() {
                    tokens.extend([TokenClass::StrideHeight, TokenClass::StrideWidth]);
                }
                tokens.push(TokenClass::NumFilters);
                let attn = if s.skip_connections {
                    Some(Attention::declare(tape, h)?)
                } else {
                    None
                };
                let mut anchors: Vec<(NodeId, NodeId)> = Vec::new();
                for layer in 0..depth {
                    for &class in &tokens {
                        x = self.token_step(tape, &mut st, &mut policy, class, x)?;
                    }
                    if let Some(attn) = &attn {
                        let h_i = st.advance(tape, x)?;
                        st.out.anchors.push(tape.value(h_i).data().to_vec());
                        let mut feedback = h_i;
                        let mut count = 0usize;
                        if layer > 0 {
                            let bits = self.skip_step(tape, &mut st, &mut policy, attn, &anchors, h_i)?;
                            for (j, on) in bits.into_iter().enumerate() {
                                if on {
                                    feedback = tape.add(feedback, anchors[j].0)?;
                                    count += 1;
                                }
                            }
                        }
                        x = if count == 0 {
                            feedback
                        } else {
                            tape.scale(feedback, 1.0 / (1 + count) as f64)?
                        };
                        let projected = tape.matmul(h_i, attn.w_prev)?;
                        anchors.push((h_i, projected));
                    }
                }
            }
            SearchSpace::Cell(s) => {
                for _ in 0..s.nodes() + 1 {
                    x = self.token_step(tape, &mut st, &mut policy, TokenClass::Combiner, x)?;
                    x = self.token_step(tape, &mut st, &mut policy, TokenClass::Activation, x)?;
                }
                x = self.token_step(tape, &mut st, &mut policy, TokenClass::CellIndex, x)?;
                self.token_step(tape, &mut st, &mut policy, TokenClass::CellIndex, x)?;
            }
        }
        if let Policy::Forced(actions) = policy {
            if actions.len() != st.out.actions.len() {
                return Err(ControllerError::Trajectory(format!(
                    "{} actions given, schedule has {}",
                    actions.len(),
                    st.out.actions.len()
                )));
            }
        }
        Ok(st.out)
    }

    fn token_step(
        &self,
        tape: &mut Tape<'_>,
        st: &mut State,
        policy: &mut Policy<'_>,
        class: TokenClass,
        x: NodeId,
    ) -> Result<NodeId, ControllerError> {
        let h = self.config.hidden;
        let width = class.width(&self.space).expect("schedule only emits classes the space has");
        let top = st.advance(tape, x)?;
        let w = tape.param(&format!("head.{}.w", class.name()), &[h, width])?;
        let b = tape.param(&format!("head.{}.b", class.name()), &[width])?;
        let logits = tape.matmul(top, w)?;
        let logits = tape.add_bias(logits, b)?;
        let probs = softmax_row(tape.value(logits).data());
        let step = st.out.actions.len();
        let choice = match policy {
            Policy::Sample(rng) => categorical(&probs, rng.random::<f64>()),
            Policy::Greedy => argmax(&probs),
            Policy::Forced(actions) => match actions.get(step) {
                Some(Action::Token(v)) if *v < width => *v,
                other => {
                    return Err(ControllerError::Trajectory(format!(
                        "action {step}: expected a {} token below {width}, found {other:?}",
                        class.name()
                    )))
                }
            },
        };
        let lp = st.log_prob_of(tape, logits, choice)?;
        st.record(tape, Action::Token(choice), lp, probs);
        let table = tape.param(&format!("embed.{}", class.name()), &[width, h])?;
        Ok(tape.select_row(table, choice)?)
    }

    fn skip_step(
        &self,
        tape: &mut Tape<'_>,
        st: &mut State,
        policy: &mut Policy<'_>,
        attn: &Attention,
        anchors: &[(NodeId, NodeId)],
        h_i: NodeId,
    ) -> Result<Vec<bool>, ControllerError> {
        let step = st.out.actions.len();
        let forced = match policy {
            Policy::Forced(actions) => match actions.get(step) {
                Some(Action::Skips(bits)) if bits.len() == anchors.len() => Some(bits.clone()),
                other => {
                    return Err(ControllerError::Trajectory(format!(
                        "action {step}: expected {} skip bits, found {other:?}",
                        anchors.len()
                    )))
                }
            },
            _ => None,
        };
        let curr = tape.matmul(h_i, attn.w_curr)?;
        let zero = tape.constant(Tensor::zeros(&[1, 1]));
        let mut bits = Vec::with_capacity(anchors.len());
        let mut probs = Vec::with_capacity(anchors.len());
        let mut total: Option<NodeId> = None;
        for (j, &(_, projected)) in anchors.iter().enumerate() {
            let z = attn.logit(tape, projected, curr)?;
            let p = crate::numeric::sigmoid(tape.value(z).item());
            let on = match (&forced, &mut *policy) {
                (Some(f), _) => f[j],
                (None, Policy::Sample(rng)) => rng.random::<f64>() < p,
                _ => p >= 0.5,
            };
            // Bernoulli log-probability as a two-way softmax over [0, z].
            let pair = tape.concat(&[zero, z])?;
            let lp = st.log_prob_of(tape, pair, on as usize)?;
            total = Some(match total {
                None => lp,
                Some(t) => tape.add(t, lp)?,
            });
            bits.push(on);
            probs.push(p);
        }
        let lp = total.expect("skip steps exist only with earlier layers");
        st.record(tape, Action::Skips(bits.clone()), lp, probs);
        Ok(bits)
    }
}

/// Skip-connection attention: `sigmoid(v^T tanh(W_prev h_j + W_curr h_i))`.
struct Attention {
    w_prev: NodeId,
    w_curr: NodeId,
    v: NodeId,
}

impl Attention {
    fn declare<G: GraphOps>(g: &mut G, hidden: usize) -> Result<Self, NumericError> {
        Ok(Attention {
            w_prev: g.param("attn.w_prev", &[hidden, hidden])?,
            w_curr: g.param("attn.w_curr", &[hidden, hidden])?,
            v: g.param("attn.v", &[hidden, 1])?,
        })
    }

    /// Pre-sigmoid logit given the already projected `h_j W_prev` and
    /// `h_i W_curr`.
    fn logit<G: GraphOps>(&self, g: &mut G, prev: NodeId, curr: NodeId) -> Result<NodeId, NumericError> {
        let s = g.add(prev, curr)?;
        let s = g.tanh(s)?;
        g.matmul(s, self.v)
    }
}

/// Builds the skip probability for anchors `h_j` and `h_i` (each `[1, H]`)
/// using slots `attn.w_prev`, `attn.w_curr` and `attn.v`.
pub fn skip_probability_node<G: GraphOps>(g: &mut G, h_j: NodeId, h_i: NodeId) -> Result<NodeId, NumericError> {
    let hidden = g.shape_of(h_j)[1];
    let attn = Attention::declare(g, hidden)?;
    let prev = g.matmul(h_j, attn.w_prev)?;
    let curr = g.matmul(h_i, attn.w_curr)?;
    let z = attn.logit(g, prev, curr)?;
    g.sigmoid(z)
}

/// Probability that layer `j` (anchor `h_j`) feeds layer `i` (anchor `h_i`).
pub fn skip_probability(params: &ParamSet, h_j: &[f64], h_i: &[f64]) -> Result<f64, ControllerError> {
    let mut tape = Tape::new(params);
    let a = tape.feed("h_j", Tensor::row(h_j));
    let b = tape.feed("h_i", Tensor::row(h_i));
    let p = skip_probability_node(&mut tape, a, b)?;
    Ok(tape.value(p).item())
}

#[derive(Default)]
struct RunOutput {
    actions: Vec<Action>,
    log_probs: Vec<f64>,
    distributions: Vec<Vec<f64>>,
    anchors: Vec<Vec<f64>>,
    total: Option<NodeId>,
}

struct State {
    lstms: Vec<LstmParams>,
    hc: Vec<(NodeId, NodeId)>,
    out: RunOutput,
}

impl State {
    /// Runs the LSTM stack one step and returns the top hidden state.
    fn advance(&mut self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId, NumericError> {
        let mut input = x;
        for (lstm, hc) in self.lstms.iter().zip(self.hc.iter_mut()) {
            *hc = lstm.step(tape, input, hc.0, hc.1)?;
            input = hc.0;
        }
        Ok(input)
    }

    fn log_prob_of(&mut self, tape: &mut Tape<'_>, logits: NodeId, choice: usize) -> Result<NodeId, NumericError> {
        let label = tape.constant(Tensor::new(vec![1], vec![choice as f64]).expect("one label"));
        let ce = tape.softmax_cross_entropy(logits, label)?;
        tape.scale(ce, -1.0)
    }

    fn record(&mut self, tape: &mut Tape<'_>, action: Action, lp: NodeId, dist: Vec<f64>) {
        self.out.actions.push(action);
        self.out.log_probs.push(tape.value(lp).item());
        self.out.distributions.push(dist);
        self.out.total = Some(match self.out.total {
            None => lp,
            Some(t) => tape.add(t, lp).expect("scalars add"),
        });
    }
}

fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
