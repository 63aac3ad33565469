//! Agent communication and relation scoring on the tape.
//!
//! The `tape_*` functions record the forward pass for differentiation. The
//! value-level functions (`init_states`, `extract_step`, ...) run the same
//! code on a scratch tape whose leaves are constants.

use crate::autodiff::{Tape, Var};

use super::{ordered_pairs, pair_index, AgentState, ModelError, ModelParameters, Param, ParamVars, Result, SceneInput};

/// Unary message per agent and pairwise message per ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Messages<T> {
    pub unary: Vec<T>,
    pub pair: Vec<T>,
}

/// Agent state recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeState {
    pub step: usize,
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
    pub input: Vec<Var>,
    pub logits: Vec<Var>,
    pub embedding: Vec<Var>,
    pub pair_hidden: Vec<Var>,
}

fn read(tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter().map(|&v| tape.values(v).to_vec()).collect()
}

impl TapeState {
    pub fn values(&self, tape: &Tape) -> AgentState {
        AgentState {
            step: self.step,
            hidden: read(tape, &self.hidden),
            cell: read(tape, &self.cell),
            input: read(tape, &self.input),
            logits: read(tape, &self.logits),
            embedding: read(tape, &self.embedding),
            pair_hidden: read(tape, &self.pair_hidden),
        }
    }

    fn constants(tape: &mut Tape, state: &AgentState) -> Result<Self> {
        let mut load = |rows: &[Vec<f64>]| -> Result<Vec<Var>> {
            rows.iter()
                .map(|r| tape.constant(r.clone()).map_err(ModelError::from))
                .collect()
        };
        Ok(Self {
            step: state.step,
            hidden: load(&state.hidden)?,
            cell: load(&state.cell)?,
            input: load(&state.input)?,
            logits: load(&state.logits)?,
            embedding: load(&state.embedding)?,
            pair_hidden: load(&state.pair_hidden)?,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.hidden.len()
    }
}

/// Step-0 state: zero hidden and cell, inputs and logits from the scene,
/// embedding from the softmax of the initial logits.
pub(crate) fn tape_init(tape: &mut Tape, pv: &ParamVars, input: &SceneInput, hidden: usize) -> Result<TapeState> {
    let n = input.num_agents();
    let mut st = TapeState {
        step: 0,
        hidden: Vec::with_capacity(n),
        cell: Vec::with_capacity(n),
        input: Vec::with_capacity(n),
        logits: Vec::with_capacity(n),
        embedding: Vec::with_capacity(n),
        pair_hidden: Vec::with_capacity(n * n.saturating_sub(1)),
    };
    for i in 0..n {
        st.hidden.push(tape.constant(vec![0.0; hidden])?);
        st.cell.push(tape.constant(vec![0.0; hidden])?);
        st.input.push(tape.constant(input.features[i].clone())?);
        let s = tape.constant(input.init_logits[i].clone())?;
        let p = tape.softmax(s)?;
        st.embedding.push(tape.vecmat(p, pv.get(Param::Embedding))?);
        st.logits.push(s);
    }
    for f in &input.pair_features {
        st.pair_hidden.push(tape.constant(f.clone())?);
    }
    Ok(st)
}

/// LSTM over `[x, e]`, logit accumulation and soft embedding.
pub(crate) fn tape_extract(tape: &mut Tape, pv: &ParamVars, st: &TapeState, hidden: usize) -> Result<TapeState> {
    let h = hidden;
    let mut next = st.clone();
    next.step = st.step + 1;
    for i in 0..st.num_agents() {
        let xin = tape.concat(&[st.input[i], st.embedding[i]])?;
        let gx = tape.matvec(pv.get(Param::LstmInput), xin)?;
        let gh = tape.matvec(pv.get(Param::LstmHidden), st.hidden[i])?;
        let gates = tape.add(gx, gh)?;
        let gates = tape.add(gates, pv.get(Param::LstmBias))?;
        let gi = tape.slice(gates, 0, h)?;
        let gf = tape.slice(gates, h, h)?;
        let gg = tape.slice(gates, 2 * h, h)?;
        let go = tape.slice(gates, 3 * h, h)?;
        let (gi, gf, gg, go) = (tape.sigmoid(gi), tape.sigmoid(gf), tape.tanh(gg), tape.sigmoid(go));
        let keep = tape.mul(gf, st.cell[i])?;
        let write = tape.mul(gi, gg)?;
        let cell = tape.add(keep, write)?;
        let tc = tape.tanh(cell);
        let hid = tape.mul(go, tc)?;

        let ds = tape.matvec(pv.get(Param::ClassProj), hid)?;
        let logits = tape.add(st.logits[i], ds)?;
        let p = tape.softmax(logits)?;
        let emb = tape.vecmat(p, pv.get(Param::Embedding))?;

        next.hidden[i] = hid;
        next.cell[i] = cell;
        next.logits[i] = logits;
        next.embedding[i] = emb;
    }
    Ok(next)
}

pub(crate) fn tape_messages(tape: &mut Tape, pv: &ParamVars, st: &TapeState) -> Result<Messages<Var>> {
    let unary = st
        .hidden
        .iter()
        .map(|&hj| tape.matvec(pv.get(Param::UnaryMessage), hj))
        .collect::<std::result::Result<_, _>>()?;
    let pair = st
        .pair_hidden
        .iter()
        .map(|&hij| tape.matvec(pv.get(Param::PairMessage), hij))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Messages { unary, pair })
}

/// Attention-weighted message fusion producing the next inputs and
/// pairwise states. The pairwise update reads the agents' current hidden
/// states.
pub(crate) fn tape_update(
    tape: &mut Tape,
    pv: &ParamVars,
    st: &TapeState,
    msg: &Messages<Var>,
    hidden: usize,
    feature: usize,
) -> Result<TapeState> {
    let n = st.num_agents();
    let mut next = st.clone();

    // w·[a, b] = w_left·a + w_right·b
    let ua = pv.get(Param::UnaryAttention);
    let (ua_self, ua_other) = (tape.slice(ua, 0, hidden)?, tape.slice(ua, hidden, hidden)?);
    let pa = pv.get(Param::PairAttention);
    let (pa_self, pa_pair) = (tape.slice(pa, 0, hidden)?, tape.slice(pa, hidden, feature)?);

    let mut self_score = Vec::with_capacity(n);
    let mut other_score = Vec::with_capacity(n);
    let mut self_pair_score = Vec::with_capacity(n);
    for &hi in &st.hidden {
        self_score.push(tape.dot(ua_self, hi)?);
        other_score.push(tape.dot(ua_other, hi)?);
        self_pair_score.push(tape.dot(pa_self, hi)?);
    }
    let pair_score: Vec<Var> = st
        .pair_hidden
        .iter()
        .map(|&hij| tape.dot(pa_pair, hij))
        .collect::<std::result::Result<_, _>>()?;

    for i in 0..n {
        let mut agg = st.hidden[i];
        if n > 1 {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut u = Vec::with_capacity(n - 1);
            let mut up = Vec::with_capacity(n - 1);
            for &j in &others {
                u.push(tape.add(self_score[i], other_score[j])?);
                up.push(tape.add(self_pair_score[i], pair_score[pair_index(n, i, j)])?);
            }
            let u = tape.concat(&u)?;
            let alpha = tape.softmax(u)?;
            let up = tape.concat(&up)?;
            let alpha_pair = tape.softmax(up)?;
            let unary: Vec<Var> = others.iter().map(|&j| msg.unary[j]).collect();
            let pair: Vec<Var> = others.iter().map(|&j| msg.pair[pair_index(n, i, j)]).collect();
            let mu = tape.weighted_sum(alpha, &unary)?;
            let mp = tape.weighted_sum(alpha_pair, &pair)?;
            agg = tape.add(agg, mu)?;
            agg = tape.add(agg, mp)?;
        }
        let act = tape.relu(agg);
        next.input[i] = tape.matvec(pv.get(Param::InputUpdate), act)?;
    }

    let subj: Vec<Var> = st
        .hidden
        .iter()
        .map(|&hi| tape.matvec(pv.get(Param::PairSubject), hi))
        .collect::<std::result::Result<_, _>>()?;
    let obj: Vec<Var> = st
        .hidden
        .iter()
        .map(|&hj| tape.matvec(pv.get(Param::PairObject), hj))
        .collect::<std::result::Result<_, _>>()?;
    for (k, (i, j)) in ordered_pairs(n).enumerate() {
        let a = tape.add(st.pair_hidden[k], subj[i])?;
        let a = tape.add(a, obj[j])?;
        next.pair_hidden[k] = tape.relu(a);
    }
    Ok(next)
}

/// `steps` rounds of extract → message → update followed by a final
/// extract. Parameters are shared across agents and rounds.
pub fn tape_communicate(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParameters,
    input: &SceneInput,
    steps: usize,
) -> Result<TapeState> {
    let dims = params.dims();
    input.check(dims)?;
    let mut st = tape_init(tape, pv, input, dims.hidden)?;
    for _ in 0..steps {
        st = tape_extract(tape, pv, &st, dims.hidden)?;
        let msg = tape_messages(tape, pv, &st)?;
        st = tape_update(tape, pv, &st, &msg, dims.hidden, dims.feature)?;
    }
    tape_extract(tape, pv, &st, dims.hidden)
}

/// Predicate logits for every ordered pair given each agent's category.
pub fn tape_relation_logits(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParameters,
    st: &TapeState,
    actions: &[usize],
) -> Result<Vec<Var>> {
    let n = st.num_agents();
    let c = params.dims().num_classes;
    if actions.len() != n || actions.iter().any(|&a| a >= c) {
        return Err(ModelError::Input(format!(
            "need {n} actions below {c}, got {actions:?}"
        )));
    }
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let emb = tape.row(pv.get(Param::Embedding), actions[i])?;
        let cat = tape.concat(&[st.hidden[i], emb])?;
        z.push(tape.matvec(pv.get(Param::EntityProj), cat)?);
    }
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for (k, (i, j)) in ordered_pairs(n).enumerate() {
        let zij = tape.matvec(pv.get(Param::PairProj), st.pair_hidden[k])?;
        let wide = tape.matvec(pv.get(Param::RelationExpand), zij)?;
        let y = tape.matvec(pv.get(Param::FusePair), wide)?;
        let zz = tape.concat(&[z[i], z[j]])?;
        let x = tape.matvec(pv.get(Param::FuseEntity), zz)?;
        let sum = tape.add(x, y)?;
        let pos = tape.relu(sum);
        let diff = tape.sub(x, y)?;
        let sq = tape.square(diff);
        let fused = tape.sub(pos, sq)?;
        let logits = tape.matvec(pv.get(Param::PredicateProj), fused)?;
        let bias = tape.row(pv.get(Param::FrequencyBias), actions[i] * c + actions[j])?;
        out.push(tape.add(logits, bias)?);
    }
    Ok(out)
}

pub fn init_states(input: &SceneInput, params: &ModelParameters) -> Result<AgentState> {
    input.check(params.dims())?;
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, false);
    Ok(tape_init(&mut tape, &pv, input, params.dims().hidden)?.values(&tape))
}

pub fn extract_step(state: &AgentState, params: &ModelParameters) -> Result<AgentState> {
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, false);
    let st = TapeState::constants(&mut tape, state)?;
    Ok(tape_extract(&mut tape, &pv, &st, params.dims().hidden)?.values(&tape))
}

pub fn compose_messages(state: &AgentState, params: &ModelParameters) -> Result<Messages<Vec<f64>>> {
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, false);
    let st = TapeState::constants(&mut tape, state)?;
    let m = tape_messages(&mut tape, &pv, &st)?;
    Ok(Messages {
        unary: read(&tape, &m.unary),
        pair: read(&tape, &m.pair),
    })
}

pub fn attention_update(
    state: &AgentState,
    messages: &Messages<Vec<f64>>,
    params: &ModelParameters,
) -> Result<AgentState> {
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, false);
    let st = TapeState::constants(&mut tape, state)?;
    let load = |tape: &mut Tape, rows: &[Vec<f64>]| -> Result<Vec<Var>> {
        rows.iter()
            .map(|r| tape.constant(r.clone()).map_err(ModelError::from))
            .collect()
    };
    let msg = Messages {
        unary: load(&mut tape, &messages.unary)?,
        pair: load(&mut tape, &messages.pair)?,
    };
    let d = params.dims();
    Ok(tape_update(&mut tape, &pv, &st, &msg, d.hidden, d.feature)?.values(&tape))
}

pub fn communicate(input: &SceneInput, params: &ModelParameters, steps: usize) -> Result<AgentState> {
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, false);
    Ok(tape_communicate(&mut tape, &pv, params, input, steps)?.values(&tape))
}

/// Predicate distribution for every ordered pair, in pair order.
pub fn predict_relations(
    state: &AgentState,
    actions: &[usize],
    params: &ModelParameters,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let pv = params.load(&mut tape, false);
    let st = TapeState::constants(&mut tape, state)?;
    let logits = tape_relation_logits(&mut tape, &pv, params, &st, actions)?;
    Ok(logits
        .iter()
        .map(|&l| crate::autodiff::softmax(tape.values(l)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{softmax, Tensor};
    use crate::model::tests::small_dims;
    use crate::model::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(dims: &Dims, n: usize, seed: u64) -> SceneInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        SceneInput {
            features: (0..n).map(|_| v(dims.feature)).collect(),
            init_logits: (0..n).map(|_| v(dims.num_classes)).collect(),
            pair_features: (0..n * (n - 1)).map(|_| v(dims.feature)).collect(),
        }
    }

    fn set(params: &mut ModelParameters, p: Param, values: Vec<f64>) {
        let t = params.get_mut(p);
        let shape = t.shape().to_vec();
        *t = Tensor::new(shape, values).unwrap();
    }

    fn matvec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
        m.chunks(cols).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_agent_has_no_pairs() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 1);
        let input = random_input(&dims, 1, 2);
        let st = communicate(&input, &params, 2).unwrap();
        assert_eq!(st.num_agents(), 1);
        assert!(st.pair_hidden.is_empty());
        assert_eq!(st.step, 3);
        assert!(st.logits[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_logits_give_mean_embedding() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 1);
        let mut input = random_input(&dims, 3, 2);
        input.init_logits = vec![vec![0.7; dims.num_classes]; 3];
        let st = init_states(&input, &params).unwrap();
        let emb = params.get(Param::Embedding).values();
        let e = dims.embed;
        let mean: Vec<f64> = (0..e)
            .map(|c| (0..dims.num_classes).map(|r| emb[r * e + c]).sum::<f64>() / dims.num_classes as f64)
            .collect();
        for row in &st.embedding {
            assert!(close(row, &mean, 1e-12));
        }
        assert!(st.hidden.iter().all(|h| h.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_rejects_bad_dimensions() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 1);
        let mut input = random_input(&dims, 2, 2);
        input.features[1].pop();
        assert!(matches!(init_states(&input, &params), Err(ModelError::Input(_))));
        let mut input = random_input(&dims, 2, 2);
        input.pair_features.pop();
        assert!(init_states(&input, &params).is_err());
    }

    #[test]
    fn deterministic_state() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 9);
        let input = random_input(&dims, 4, 11);
        assert_eq!(communicate(&input, &params, 3).unwrap(), communicate(&input, &params, 3).unwrap());
    }

    #[test]
    fn zero_class_projection_keeps_logits() {
        let dims = small_dims();
        let mut params = ModelParameters::init(dims, 1);
        set(&mut params, Param::ClassProj, vec![0.0; dims.num_classes * dims.hidden]);
        let input = random_input(&dims, 3, 5);
        let st0 = init_states(&input, &params).unwrap();
        let st1 = extract_step(&st0, &params).unwrap();
        assert_eq!(st1.logits, st0.logits);
    }

    #[test]
    fn embedding_in_convex_hull() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 4);
        let input = random_input(&dims, 3, 6);
        let st = extract_step(&init_states(&input, &params).unwrap(), &params).unwrap();
        let emb = params.get(Param::Embedding).values();
        let e = dims.embed;
        for (row, s) in st.embedding.iter().zip(&st.logits) {
            let p = softmax(s);
            // weights are p itself; verify each coordinate lies within row extremes
            for c in 0..e {
                let col: Vec<f64> = (0..dims.num_classes).map(|r| emb[r * e + c]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(row[c] >= lo - 1e-12 && row[c] <= hi + 1e-12);
                let direct: f64 = p.iter().zip(&col).map(|(a, b)| a * b).sum();
                assert!((direct - row[c]).abs() < 1e-12);
            }
        }
    }

    /// Scalar reference of one LSTM-extract step for a single agent with
    /// hand-set 2×2-sized blocks.
    #[test]
    fn extract_matches_hand_rolled_recurrence() {
        let dims = Dims {
            hidden: 2,
            feature: 1,
            embed: 1,
            relation: 1,
            num_classes: 2,
            num_predicates: 2,
        };
        let mut params = ModelParameters::init(dims, 0);
        let w_in = vec![0.5, -0.2, 0.1, 0.3, -0.4, 0.2, 0.6, -0.1, 0.3, 0.3, -0.5, 0.4, 0.2, 0.1, 0.7, -0.3];
        let w_hh = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.1, -0.2, 0.3, 0.2, 0.2, 0.1, -0.1, 0.4, 0.5];
        let bias = vec![0.0, 0.1, 1.0, 1.0, -0.1, 0.2, 0.05, 0.0];
        let w_h = vec![0.8, -0.5, -0.3, 0.9];
        let emb = vec![0.4, -0.7];
        set(&mut params, Param::LstmInput, w_in.clone());
        set(&mut params, Param::LstmHidden, w_hh.clone());
        set(&mut params, Param::LstmBias, bias.clone());
        set(&mut params, Param::ClassProj, w_h.clone());
        set(&mut params, Param::Embedding, emb.clone());

        let state = AgentState {
            step: 0,
            hidden: vec![vec![0.25, -0.5]],
            cell: vec![vec![0.1, 0.3]],
            input: vec![vec![0.9]],
            logits: vec![vec![0.2, -0.1]],
            embedding: vec![vec![0.05]],
            pair_hidden: vec![],
        };
        let got = extract_step(&state, &params).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let xin = [0.9, 0.05];
        let h_prev = [0.25, -0.5];
        let mut gates = [0.0; 8];
        for g in 0..8 {
            gates[g] = w_in[2 * g] * xin[0] + w_in[2 * g + 1] * xin[1]
                + w_hh[2 * g] * h_prev[0]
                + w_hh[2 * g + 1] * h_prev[1]
                + bias[g];
        }
        let mut h = [0.0; 2];
        let mut c = [0.0; 2];
        for u in 0..2 {
            let (i, f, gg, o) = (sig(gates[u]), sig(gates[2 + u]), gates[4 + u].tanh(), sig(gates[6 + u]));
            c[u] = f * [0.1, 0.3][u] + i * gg;
            h[u] = o * c[u].tanh();
        }
        let s = [0.2 + w_h[0] * h[0] + w_h[1] * h[1], -0.1 + w_h[2] * h[0] + w_h[3] * h[1]];
        let z = (s[0].exp() + s[1].exp()).ln();
        let p = [(s[0] - z).exp(), (s[1] - z).exp()];
        let e = p[0] * emb[0] + p[1] * emb[1];

        assert!(close(&got.hidden[0], &h, 1e-14));
        assert!(close(&got.cell[0], &c, 1e-14));
        assert!(close(&got.logits[0], &s, 1e-14));
        assert!(close(&got.embedding[0], &[e], 1e-14));
        assert_eq!(got.step, 1);
    }

    #[test]
    fn messages_match_direct_products() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 7);
        let input = random_input(&dims, 3, 8);
        let st = communicate(&input, &params, 1).unwrap();
        let m = compose_messages(&st, &params).unwrap();
        for (j, h) in st.hidden.iter().enumerate() {
            let want = matvec(params.get(Param::UnaryMessage).values(), dims.hidden, h);
            assert!(close(&m.unary[j], &want, 1e-14));
        }
        for (k, hij) in st.pair_hidden.iter().enumerate() {
            let want = matvec(params.get(Param::PairMessage).values(), dims.feature, hij);
            assert!(close(&m.pair[k], &want, 1e-14));
        }

        let mut zero = st.clone();
        zero.hidden.iter_mut().for_each(|h| h.iter_mut().for_each(|v| *v = 0.0));
        zero.pair_hidden.iter_mut().for_each(|h| h.iter_mut().for_each(|v| *v = 0.0));
        let mz = compose_messages(&zero, &params).unwrap();
        assert!(mz.unary.iter().chain(&mz.pair).all(|m| m.iter().all(|&v| v == 0.0)));

        let mut eye = params.clone();
        let h = dims.hidden;
        set(&mut eye, Param::UnaryMessage, (0..h * h).map(|k| if k % (h + 1) == 0 { 1.0 } else { 0.0 }).collect());
        let me = compose_messages(&st, &eye).unwrap();
        assert_eq!(me.unary, st.hidden);
    }

    /// Scalar re-implementation of the update step.
    fn update_oracle(st: &AgentState, m: &Messages<Vec<f64>>, params: &ModelParameters) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let d = params.dims();
        let (h, f) = (d.hidden, d.feature);
        let n = st.num_agents();
        let ua = params.get(Param::UnaryAttention).values();
        let pa = params.get(Param::PairAttention).values();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut xs = vec![];
        for i in 0..n {
            let mut agg = st.hidden[i].clone();
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            if !others.is_empty() {
                let u: Vec<f64> = others
                    .iter()
                    .map(|&j| dot(&ua[..h], &st.hidden[i]) + dot(&ua[h..], &st.hidden[j]))
                    .collect();
                let up: Vec<f64> = others
                    .iter()
                    .map(|&j| dot(&pa[..h], &st.hidden[i]) + dot(&pa[h..], &st.pair_hidden[pair_index(n, i, j)]))
                    .collect();
                let (a, ap) = (softmax(&u), softmax(&up));
                for (k, &j) in others.iter().enumerate() {
                    for c in 0..h {
                        agg[c] += a[k] * m.unary[j][c] + ap[k] * m.pair[pair_index(n, i, j)][c];
                    }
                }
            }
            let act: Vec<f64> = agg.iter().map(|v| v.max(0.0)).collect();
            xs.push(matvec(params.get(Param::InputUpdate).values(), h, &act));
        }
        let mut hs = vec![];
        for (k, (i, j)) in ordered_pairs(n).enumerate() {
            let s = matvec(params.get(Param::PairSubject).values(), h, &st.hidden[i]);
            let o = matvec(params.get(Param::PairObject).values(), h, &st.hidden[j]);
            hs.push((0..f).map(|c| (st.pair_hidden[k][c] + s[c] + o[c]).max(0.0)).collect());
        }
        (xs, hs)
    }

    #[test]
    fn update_matches_scalar_oracle() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 12);
        let input = random_input(&dims, 3, 13);
        let st = extract_step(&init_states(&input, &params).unwrap(), &params).unwrap();
        let m = compose_messages(&st, &params).unwrap();
        let got = attention_update(&st, &m, &params).unwrap();
        let (xs, hs) = update_oracle(&st, &m, &params);
        for i in 0..3 {
            assert!(close(&got.input[i], &xs[i], 1e-13));
        }
        for k in 0..6 {
            assert!(close(&got.pair_hidden[k], &hs[k], 1e-13));
        }
    }

    #[test]
    fn single_agent_update_ignores_attention() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 12);
        let input = random_input(&dims, 1, 13);
        let st = extract_step(&init_states(&input, &params).unwrap(), &params).unwrap();
        let m = compose_messages(&st, &params).unwrap();
        let got = attention_update(&st, &m, &params).unwrap();
        let act: Vec<f64> = st.hidden[0].iter().map(|v| v.max(0.0)).collect();
        let want = matvec(params.get(Param::InputUpdate).values(), dims.hidden, &act);
        assert!(close(&got.input[0], &want, 1e-14));
    }

    #[test]
    fn two_agents_and_equal_states_give_trivial_attention() {
        // with two agents each softmax has a single entry; with identical
        // hidden and pair states attention is uniform, so the fused message
        // equals the plain mean
        let dims = small_dims();
        let params = ModelParameters::init(dims, 3);
        let input = random_input(&dims, 3, 4);
        let mut st = extract_step(&init_states(&input, &params).unwrap(), &params).unwrap();
        let h0 = st.hidden[0].clone();
        st.hidden.iter_mut().for_each(|h| *h = h0.clone());
        let p0 = st.pair_hidden[0].clone();
        st.pair_hidden.iter_mut().for_each(|h| *h = p0.clone());
        let m = compose_messages(&st, &params).unwrap();
        let got = attention_update(&st, &m, &params).unwrap();
        let mut agg = h0.clone();
        for c in 0..dims.hidden {
            agg[c] += m.unary[0][c] + m.pair[0][c];
        }
        let act: Vec<f64> = agg.iter().map(|v| v.max(0.0)).collect();
        let want = matvec(params.get(Param::InputUpdate).values(), dims.hidden, &act);
        assert!(close(&got.input[1], &want, 1e-13));

        let input2 = random_input(&dims, 2, 5);
        let st2 = extract_step(&init_states(&input2, &params).unwrap(), &params).unwrap();
        let m2 = compose_messages(&st2, &params).unwrap();
        let got2 = attention_update(&st2, &m2, &params).unwrap();
        let mut agg = st2.hidden[0].clone();
        for c in 0..dims.hidden {
            agg[c] += m2.unary[1][c] + m2.pair[0][c];
        }
        let act: Vec<f64> = agg.iter().map(|v| v.max(0.0)).collect();
        assert!(close(&got2.input[0], &matvec(params.get(Param::InputUpdate).values(), dims.hidden, &act), 1e-13));
    }

    #[test]
    fn one_round_equals_manual_chain() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 21);
        let input = random_input(&dims, 4, 22);
        let auto = communicate(&input, &params, 1).unwrap();
        let s0 = init_states(&input, &params).unwrap();
        let s1 = extract_step(&s0, &params).unwrap();
        let m = compose_messages(&s1, &params).unwrap();
        let s2 = attention_update(&s1, &m, &params).unwrap();
        let manual = extract_step(&s2, &params).unwrap();
        assert_eq!(auto, manual);
    }

    #[test]
    fn more_rounds_change_outputs() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 23);
        let input = random_input(&dims, 4, 24);
        let a = communicate(&input, &params, 2).unwrap();
        let b = communicate(&input, &params, 4).unwrap();
        assert!(!close(&a.logits[0], &b.logits[0], 1e-9));
    }

    fn permute_input(input: &SceneInput, perm: &[usize]) -> SceneInput {
        // new agent k is old agent perm[k]
        let n = perm.len();
        let mut pairs = vec![vec![]; n * (n - 1)];
        for (a, b) in ordered_pairs(n) {
            pairs[pair_index(n, a, b)] = input.pair_features[pair_index(n, perm[a], perm[b])].clone();
        }
        SceneInput {
            features: perm.iter().map(|&k| input.features[k].clone()).collect(),
            init_logits: perm.iter().map(|&k| input.init_logits[k].clone()).collect(),
            pair_features: pairs,
        }
    }

    #[test]
    fn permutation_equivariance() {
        let dims = small_dims();
        let params = ModelParameters::init(dims, 31);
        let input = random_input(&dims, 4, 32);
        let perm = [2, 0, 3, 1];
        let a = communicate(&input, &params, 2).unwrap();
        let b = communicate(&permute_input(&input, &perm), &params, 2).unwrap();
        for k in 0..4 {
            assert!(close(&b.logits[k], &a.logits[perm[k]], 1e-12));
            assert!(close(&b.hidden[k], &a.hidden[perm[k]], 1e-12));
        }
        for (x, y) in ordered_pairs(4) {
            assert!(close(
                &b.pair_hidden[pair_index(4, x, y)],
                &a.pair_hidden[pair_index(4, perm[x], perm[y])],
                1e-12
            ));
        }
        let acts = [1, 3, 0, 2];
        let pa = predict_relations(&a, &acts, &params).unwrap();
        let pacts: Vec<usize> = perm.iter().map(|&k| acts[k]).collect();
        let pb = predict_relations(&b, &pacts, &params).unwrap();
        for (x, y) in ordered_pairs(4) {
            assert!(close(&pb[pair_index(4, x, y)], &pa[pair_index(4, perm[x], perm[y])], 1e-12));
        }
    }

    #[test]
    fn relation_distributions() {
        let dims = small_dims();
        let mut params = ModelParameters::init(dims, 41);
        let input = random_input(&dims, 3, 42);
        let st = communicate(&input, &params, 2).unwrap();
        let p = predict_relations(&st, &[1, 2, 3], &params).unwrap();
        assert_eq!(p.len(), 6);
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // changing one category changes only pairs that involve the agent
        let q = predict_relations(&st, &[1, 0, 3], &params).unwrap();
        for (k, (i, j)) in ordered_pairs(3).enumerate() {
            if i == 1 || j == 1 {
                assert!(!close(&p[k], &q[k], 1e-12));
            } else {
                assert_eq!(p[k], q[k]);
            }
        }
        // the bias path alone also reacts to the category
        let fb = params.get_mut(Param::FrequencyBias).values_mut();
        fb[(1 * 4 + 3) * 3 + 2] = 2.0;
        let r = predict_relations(&st, &[1, 2, 3], &params).unwrap();
        assert!(r[pair_index(3, 0, 2)][2] > p[pair_index(3, 0, 2)][2]);

        let mut zero = params.clone();
        for t in zero.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let u = predict_relations(&st, &[1, 2, 3], &zero).unwrap();
        for row in u {
            assert!(close(&row, &[1.0 / 3.0; 3], 1e-15));
        }
        assert!(predict_relations(&st, &[1, 2], &params).is_err());
        assert!(predict_relations(&st, &[1, 2, 4], &params).is_err());
    }
}
