//! LSTM building blocks: a single gated step, stacked bidirectional runs
//! over a token sequence, and the small two-layer perceptron used by the
//! attention and scoring heads.

use super::{Graph, ParameterStore, Result, RngStream, Var};
use crate::tensor::Init;

/// Graph handles for one LSTM direction's weights.
#[derive(Clone, Copy)]
pub struct LstmParams {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

/// One layer of a bidirectional stack.
#[derive(Clone, Copy)]
pub struct BiLstmLayer {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

/// Two affine maps with a ReLU between them.
#[derive(Clone, Copy)]
pub struct MlpParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Register one LSTM direction's parameters under `prefix`.
pub fn define_lstm(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut RngStream,
) -> Result<()> {
    store.define(&format!("{prefix}/wx"), input, 4 * hidden, Init::Glorot, rng)?;
    store.define_recurrent(&format!("{prefix}/wh"), hidden, 4 * hidden, Init::Glorot, rng)?;
    store.define(&format!("{prefix}/b"), 1, 4 * hidden, Init::LstmBias, rng)
}

/// Bind a previously defined LSTM's parameters into `graph`.
pub fn lstm_params(
    graph: &Graph,
    store: &ParameterStore,
    prefix: &str,
    hidden: usize,
) -> Result<LstmParams> {
    Ok(LstmParams {
        wx: graph.param(store, &format!("{prefix}/wx"))?,
        wh: graph.param(store, &format!("{prefix}/wh"))?,
        b: graph.param(store, &format!("{prefix}/b"))?,
        hidden,
    })
}

pub fn define_mlp(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut RngStream,
) -> Result<()> {
    store.define(&format!("{prefix}/w1"), input, hidden, Init::Glorot, rng)?;
    store.define(&format!("{prefix}/b1"), 1, hidden, Init::Zeros, rng)?;
    store.define(&format!("{prefix}/w2"), hidden, output, Init::Glorot, rng)?;
    store.define(&format!("{prefix}/b2"), 1, output, Init::Zeros, rng)
}

pub fn mlp_params(graph: &Graph, store: &ParameterStore, prefix: &str) -> Result<MlpParams> {
    Ok(MlpParams {
        w1: graph.param(store, &format!("{prefix}/w1"))?,
        b1: graph.param(store, &format!("{prefix}/b1"))?,
        w2: graph.param(store, &format!("{prefix}/w2"))?,
        b2: graph.param(store, &format!("{prefix}/b2"))?,
    })
}

pub fn affine(g: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

pub fn mlp2(g: &Graph, x: Var, p: &MlpParams) -> Result<Var> {
    let h = g.relu(affine(g, x, p.w1, p.b1)?);
    affine(g, h, p.w2, p.b2)
}

/// One LSTM step with gates stacked as [input, forget, cell, output].
/// Returns the new hidden and cell states.
pub fn lstm_step(
    g: &Graph,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmParams,
) -> Result<(Var, Var)> {
    let h = p.hidden;
    let zx = g.matmul(x, p.wx)?;
    let zh = g.matmul(h_prev, p.wh)?;
    let z = g.add(g.add(zx, zh)?, p.b)?;
    let i = g.sigmoid(g.slice_cols(z, 0, h)?);
    let f = g.sigmoid(g.slice_cols(z, h, h)?);
    let cand = g.tanh(g.slice_cols(z, 2 * h, h)?);
    let o = g.sigmoid(g.slice_cols(z, 3 * h, h)?);
    let c = g.add(g.mul(f, c_prev)?, g.mul(i, cand)?)?;
    let h_new = g.mul(o, g.tanh(c))?;
    Ok((h_new, c))
}

/// Run a stacked bidirectional LSTM over `inputs` (each a 1xD row).
///
/// Layer l > 0 consumes the concatenated [forward; backward] states of layer
/// l-1. With `training` set, inverted dropout at `dropout` is applied to each
/// layer's input independently per position. Returns the top layer's
/// (forward, backward) state pair per position.
pub fn bi_lstm_stack(
    g: &Graph,
    inputs: &[Var],
    layers: &[BiLstmLayer],
    dropout: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<Vec<(Var, Var)>> {
    assert!(!inputs.is_empty(), "bi_lstm_stack: empty sequence");
    assert!(!layers.is_empty(), "bi_lstm_stack: no layers");
    let mut seq: Vec<Var> = inputs.to_vec();
    let mut states: Vec<(Var, Var)> = Vec::new();
    for layer in layers {
        let dropped: Vec<Var> = seq
            .iter()
            .map(|&x| g.dropout(x, dropout, rng, training))
            .collect::<Result<_>>()?;
        let fwd = run_direction(g, &dropped, &layer.fwd, false)?;
        let bwd = run_direction(g, &dropped, &layer.bwd, true)?;
        states = fwd.into_iter().zip(bwd).collect();
        seq = states
            .iter()
            .map(|&(f, b)| g.concat_cols(&[f, b]))
            .collect::<Result<_>>()?;
    }
    Ok(states)
}

fn run_direction(g: &Graph, seq: &[Var], p: &LstmParams, reverse: bool) -> Result<Vec<Var>> {
    let n = seq.len();
    let mut h = g.zeros(1, p.hidden);
    let mut c = g.zeros(1, p.hidden);
    let mut out = vec![h; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in order {
        let (h2, c2) = lstm_step(g, seq[t], h, c, p)?;
        h = h2;
        c = c2;
        out[t] = h;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn zeroed_lstm(g: &Graph, hidden: usize, input: usize) -> LstmParams {
        LstmParams {
            wx: g.zeros(input, 4 * hidden),
            wh: g.zeros(hidden, 4 * hidden),
            b: g.zeros(1, 4 * hidden),
            hidden,
        }
    }

    #[test]
    fn zero_weights_give_zero_hidden_state() {
        let g = Graph::new();
        let p = zeroed_lstm(&g, 3, 2);
        let x = g.row_leaf(vec![0.7, -0.4]);
        let h0 = g.zeros(1, 3);
        let c0 = g.zeros(1, 3);
        let (h, c) = lstm_step(&g, x, h0, c0, &p).unwrap();
        assert_eq!(g.value(h), vec![0.0; 3]);
        assert_eq!(g.value(c), vec![0.0; 3]);
    }

    #[test]
    fn lstm_step_matches_hand_rolled_gates() {
        // Single unit, scalar input: z = x*wx + h*wh + b for the four gates.
        let g = Graph::new();
        let p = LstmParams {
            wx: g.leaf(1, 4, vec![0.5, -0.3, 0.8, 0.2]).unwrap(),
            wh: g.leaf(1, 4, vec![0.1, 0.4, -0.2, 0.6]).unwrap(),
            b: g.leaf(1, 4, vec![0.05, 1.0, -0.1, 0.0]).unwrap(),
            hidden: 1,
        };
        let x = g.row_leaf(vec![0.9]);
        let h_prev = g.row_leaf(vec![-0.2]);
        let c_prev = g.row_leaf(vec![0.3]);
        let (h, c) = lstm_step(&g, x, h_prev, c_prev, &p).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let i = sig(0.9 * 0.5 + (-0.2) * 0.1 + 0.05);
        let f = sig(0.9 * (-0.3) + (-0.2) * 0.4 + 1.0);
        let cand = (0.9f64 * 0.8 + (-0.2) * (-0.2) + (-0.1)).tanh();
        let o = sig(0.9 * 0.2 + (-0.2) * 0.6);
        let c_want = f * 0.3 + i * cand;
        let h_want = o * c_want.tanh();
        assert!((g.scalar_value(c) - c_want).abs() < 1e-12);
        assert!((g.scalar_value(h) - h_want).abs() < 1e-12);
    }

    #[test]
    fn hidden_states_stay_bounded() {
        let g = Graph::new();
        let mut rng = RngStream::new(4);
        let mut store = ParameterStore::new();
        define_lstm(&mut store, "l", 3, 5, &mut rng).unwrap();
        let p = lstm_params(&g, &store, "l", 5).unwrap();
        let mut h = g.zeros(1, 5);
        let mut c = g.zeros(1, 5);
        for _ in 0..40 {
            let x = g.row_leaf((0..3).map(|_| rng.uniform_in(-5.0, 5.0)).collect());
            let (h2, c2) = lstm_step(&g, x, h, c, &p).unwrap();
            h = h2;
            c = c2;
            assert!(g.value(h).iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn stack_output_width_is_hidden_per_direction() {
        let g = Graph::new();
        let mut rng = RngStream::new(5);
        let mut store = ParameterStore::new();
        define_lstm(&mut store, "l0/fwd", 4, 6, &mut rng).unwrap();
        define_lstm(&mut store, "l0/bwd", 4, 6, &mut rng).unwrap();
        define_lstm(&mut store, "l1/fwd", 12, 6, &mut rng).unwrap();
        define_lstm(&mut store, "l1/bwd", 12, 6, &mut rng).unwrap();
        let layers = vec![
            BiLstmLayer {
                fwd: lstm_params(&g, &store, "l0/fwd", 6).unwrap(),
                bwd: lstm_params(&g, &store, "l0/bwd", 6).unwrap(),
            },
            BiLstmLayer {
                fwd: lstm_params(&g, &store, "l1/fwd", 6).unwrap(),
                bwd: lstm_params(&g, &store, "l1/bwd", 6).unwrap(),
            },
        ];
        let inputs: Vec<Var> = (0..3)
            .map(|_| g.row_leaf((0..4).map(|_| rng.normal()).collect()))
            .collect();
        let states = bi_lstm_stack(&g, &inputs, &layers, 0.0, &mut rng, false).unwrap();
        assert_eq!(states.len(), 3);
        for (f, b) in states {
            assert_eq!(g.shape(f), (1, 6));
            assert_eq!(g.shape(b), (1, 6));
        }
    }

    #[test]
    fn backward_direction_sees_later_tokens() {
        // With forward-only influence, position 0's backward state must react
        // to a change at the last position.
        let g = Graph::new();
        let mut rng = RngStream::new(6);
        let mut store = ParameterStore::new();
        define_lstm(&mut store, "f", 2, 3, &mut rng).unwrap();
        define_lstm(&mut store, "b", 2, 3, &mut rng).unwrap();
        let layer = BiLstmLayer {
            fwd: lstm_params(&g, &store, "f", 3).unwrap(),
            bwd: lstm_params(&g, &store, "b", 3).unwrap(),
        };
        let mk = |last: f64| -> (Vec<f64>, Vec<f64>) {
            let g2 = Graph::new();
            let layer2 = BiLstmLayer {
                fwd: lstm_params(&g2, &store, "f", 3).unwrap(),
                bwd: lstm_params(&g2, &store, "b", 3).unwrap(),
            };
            let inputs = vec![
                g2.row_leaf(vec![0.1, 0.2]),
                g2.row_leaf(vec![-0.3, 0.4]),
                g2.row_leaf(vec![last, 0.0]),
            ];
            let states =
                bi_lstm_stack(&g2, &inputs, &[layer2], 0.0, &mut RngStream::new(0), false)
                    .unwrap();
            (g2.value(states[0].0), g2.value(states[0].1))
        };
        let _ = layer;
        let (f_a, b_a) = mk(0.5);
        let (f_b, b_b) = mk(-0.9);
        assert_eq!(f_a, f_b, "forward state at t=0 must ignore later tokens");
        assert_ne!(b_a, b_b, "backward state at t=0 must depend on the tail");
    }

    #[test]
    fn depth_one_length_one_yields_single_pair() {
        let g = Graph::new();
        let mut rng = RngStream::new(8);
        let mut store = ParameterStore::new();
        define_lstm(&mut store, "f", 2, 3, &mut rng).unwrap();
        define_lstm(&mut store, "b", 2, 3, &mut rng).unwrap();
        let layer = BiLstmLayer {
            fwd: lstm_params(&g, &store, "f", 3).unwrap(),
            bwd: lstm_params(&g, &store, "b", 3).unwrap(),
        };
        let inputs = vec![g.row_leaf(vec![0.2, -0.6])];
        let states = bi_lstm_stack(&g, &inputs, &[layer], 0.0, &mut RngStream::new(0), false)
            .unwrap();
        assert_eq!(states.len(), 1);
    }

    #[test]
    fn reversed_input_swaps_directions_under_tied_weights() {
        // With the same weights driving both directions, running the stack on
        // the reversed sequence mirrors the state table.
        let mut rng = RngStream::new(9);
        let mut store = ParameterStore::new();
        define_lstm(&mut store, "w", 2, 3, &mut rng).unwrap();
        let xs = [vec![0.3, -0.2], vec![0.9, 0.1], vec![-0.5, 0.7], vec![0.0, 0.4]];
        let run = |order: &[usize]| -> Vec<(Vec<f64>, Vec<f64>)> {
            let g = Graph::new();
            let p = lstm_params(&g, &store, "w", 3).unwrap();
            let layer = BiLstmLayer { fwd: p, bwd: p };
            let inputs: Vec<Var> = order.iter().map(|&i| g.row_leaf(xs[i].clone())).collect();
            bi_lstm_stack(&g, &inputs, &[layer], 0.0, &mut RngStream::new(0), false)
                .unwrap()
                .into_iter()
                .map(|(f, b)| (g.value(f), g.value(b)))
                .collect()
        };
        let fwd_order = run(&[0, 1, 2, 3]);
        let rev_order = run(&[3, 2, 1, 0]);
        let n = xs.len();
        for t in 0..n {
            assert_eq!(rev_order[t].0, fwd_order[n - 1 - t].1);
            assert_eq!(rev_order[t].1, fwd_order[n - 1 - t].0);
        }
    }

    #[test]
    fn three_step_sequence_passes_gradient_check() {
        let mut rng = RngStream::new(10);
        let mut store = ParameterStore::new();
        define_lstm(&mut store, "l", 2, 4, &mut rng).unwrap();
        let xs = [vec![0.5, -0.3], vec![-0.8, 0.2], vec![0.1, 0.9]];

        let forward = |s: &ParameterStore, g: &Graph| -> super::Result<Var> {
            let p = lstm_params(g, s, "l", 4)?;
            let mut h = g.zeros(1, 4);
            let mut c = g.zeros(1, 4);
            for x in &xs {
                let (h2, c2) = lstm_step(g, g.row_leaf(x.clone()), h, c, &p)?;
                h = h2;
                c = c2;
            }
            Ok(g.sum_all(h))
        };

        let g = Graph::new();
        let loss = forward(&store, &g).unwrap();
        g.backward(loss).unwrap();
        g.flush_param_grads(&mut store).unwrap();

        let names = store.names();
        let report = crate::gradcheck::check_gradients(
            &mut store,
            &names,
            |s| -> super::Result<f64> {
                let g = Graph::new();
                let loss = forward(s, &g)?;
                Ok(g.scalar_value(loss))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mlp_with_zero_weights_returns_second_bias() {
        let g = Graph::new();
        let p = MlpParams {
            w1: g.zeros(3, 2),
            b1: g.zeros(1, 2),
            w2: g.zeros(2, 2),
            b2: g.row_leaf(vec![0.7, -1.3]),
        };
        let x = g.row_leaf(vec![5.0, -2.0, 9.0]);
        let y = mlp2(&g, x, &p).unwrap();
        assert_eq!(g.value(y), vec![0.7, -1.3]);
    }

    #[test]
    fn relu_clamp_blocks_gradient() {
        // Drive the single hidden unit negative: x contributes nothing.
        let g = Graph::new();
        let p = MlpParams {
            w1: g.leaf(1, 1, vec![1.0]).unwrap(),
            b1: g.row_leaf(vec![-10.0]),
            w2: g.leaf(1, 1, vec![2.0]).unwrap(),
            b2: g.row_leaf(vec![0.0]),
        };
        let x = g.row_leaf(vec![3.0]);
        let y = mlp2(&g, x, &p).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), vec![0.0]);
    }

    #[test]
    fn mlp_passes_gradient_check() {
        use crate::tensor::{define_mlp, mlp_params};
        let mut rng = RngStream::new(12);
        let mut store = ParameterStore::new();
        define_mlp(&mut store, "m", 3, 5, 2, &mut rng).unwrap();
        let x = vec![0.3, -0.9, 0.5];

        let g = Graph::new();
        let p = mlp_params(&g, &store, "m").unwrap();
        let loss = g.sum_all(mlp2(&g, g.row_leaf(x.clone()), &p).unwrap());
        g.backward(loss).unwrap();
        g.flush_param_grads(&mut store).unwrap();

        let names = store.names();
        let report = crate::gradcheck::check_gradients(
            &mut store,
            &names,
            |s| -> super::Result<f64> {
                let g = Graph::new();
                let p = mlp_params(&g, s, "m")?;
                Ok(g.scalar_value(g.sum_all(mlp2(&g, g.row_leaf(x.clone()), &p)?)))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mlp_values_match_manual_computation() {
        let g = Graph::new();
        let p = MlpParams {
            w1: g.leaf(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            b1: g.row_leaf(vec![0.0, -0.5]),
            w2: g.leaf(2, 1, vec![1.0, 1.0]).unwrap(),
            b2: g.row_leaf(vec![0.25]),
        };
        let x = g.row_leaf(vec![2.0, -1.0]);
        // pre-activation: [2*1 + (-1)*0.5, 2*(-1) + (-1)*2 - 0.5] = [1.5, -4.5]
        // relu -> [1.5, 0]; output = 1.5 + 0 + 0.25
        let y = mlp2(&g, x, &p).unwrap();
        assert!((g.scalar_value(y) - 1.75).abs() < 1e-12);
    }
}
