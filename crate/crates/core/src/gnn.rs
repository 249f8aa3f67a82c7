// SPDX-License-Identifier: Apache-2.0
//! Graph encoders over the rTCG: an edge-gated, context-modulated GCN and a
//! GIN variant.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::floorplan::PackageConfig;
use crate::rtcg::{RtcgGraph, EDGE_FEATURES, NODE_FEATURES};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, TensorError, Var};

pub const CONTEXT_FEATURES: usize = 6;

/// Edge feature entries that flip sign when an edge is traversed backwards.
const ANTISYMMETRIC: [usize; 5] = [2, 3, 5, 6, 7];

/// One aggregation edge `src → dst` with its (possibly reversed) features.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub features: [f64; EDGE_FEATURES],
}

/// Both directions of every rTCG edge, sorted by `(dst, src)` so that
/// neighbour sums have a fixed order.
pub fn message_edges(graph: &RtcgGraph) -> Vec<Message> {
    let mut out = Vec::with_capacity(2 * graph.edges.len());
    for e in &graph.edges {
        out.push(Message {
            src: e.u,
            dst: e.v,
            features: e.features,
        });
        let mut rev = e.features;
        for i in ANTISYMMETRIC {
            rev[i] = -rev[i];
        }
        out.push(Message {
            src: e.v,
            dst: e.u,
            features: rev,
        });
    }
    out.sort_by_key(|m| (m.dst, m.src));
    out
}

/// Package-level context broadcast to every node.
pub fn global_context(cfg: &PackageConfig) -> [f64; CONTEXT_FEATURES] {
    let s = &cfg.layers.substrate;
    [
        cfg.delta_t / 100.0,
        s.cte / 10.0,
        s.youngs_modulus / 100.0,
        s.thickness,
        cfg.pkg_width / 200.0,
        cfg.pkg_height / 200.0,
    ]
}

/// Model-ready tensors for one graph.
#[derive(Clone, Debug)]
pub struct GraphInput {
    /// `[n, 7]` node features.
    pub nodes: Tensor,
    /// `[m, 8]` message features.
    pub edges: Tensor,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    /// `[1, 6]`.
    pub context: Tensor,
}

impl GraphInput {
    pub fn new(graph: &RtcgGraph, cfg: &PackageConfig) -> Self {
        let msgs = message_edges(graph);
        let n = graph.node_count();
        Self {
            nodes: Tensor {
                shape: vec![n, NODE_FEATURES],
                data: graph.nodes.iter().flatten().copied().collect(),
            },
            edges: Tensor {
                shape: vec![msgs.len(), EDGE_FEATURES],
                data: msgs.iter().flat_map(|m| m.features).collect(),
            },
            src: Arc::new(msgs.iter().map(|m| m.src).collect()),
            dst: Arc::new(msgs.iter().map(|m| m.dst).collect()),
            context: Tensor {
                shape: vec![1, CONTEXT_FEATURES],
                data: global_context(cfg).to_vec(),
            },
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.shape[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gcn,
    Gin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub hidden: usize,
    pub gate_hidden: usize,
    pub film_hidden: usize,
    /// GIN only: add a learned affine of the edge features to each neighbour
    /// term before summation.
    pub gin_edge_mix: bool,
}

impl EncoderConfig {
    pub fn gcn() -> Self {
        Self {
            kind: EncoderKind::Gcn,
            layers: 4,
            hidden: 64,
            gate_hidden: 32,
            film_hidden: 32,
            gin_edge_mix: false,
        }
    }

    pub fn gin() -> Self {
        Self {
            kind: EncoderKind::Gin,
            layers: 3,
            ..Self::gcn()
        }
    }
}

#[derive(Clone, Debug)]
struct Mlp2 {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
enum Layer {
    Gcn {
        w_msg: usize,
        gate: Mlp2,
        film: Mlp2,
        w_res: usize,
    },
    Gin {
        eps: usize,
        w1: usize,
        w2: usize,
        edge: Option<(usize, usize)>,
    },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    lift_w: usize,
    lift_b: usize,
    layers: Vec<Layer>,
}

fn mlp2(store: &mut ParamStore, name: &str, i: usize, h: usize, o: usize, rng: &mut impl Rng) -> Mlp2 {
    Mlp2 {
        w1: store.add(format!("{name}.w1"), Tensor::he(vec![i, h], i, rng)),
        b1: store.add(format!("{name}.b1"), Tensor::zeros(vec![h])),
        w2: store.add(format!("{name}.w2"), Tensor::glorot(vec![h, o], h, o, rng)),
        b2: store.add(format!("{name}.b2"), Tensor::zeros(vec![o])),
    }
}

fn apply_mlp2(g: &mut Graph, p: &Bound, m: &Mlp2, x: Var) -> Result<Var, TensorError> {
    let h = g.matmul(x, p[m.w1])?;
    let h = g.add_row(h, p[m.b1])?;
    let h = g.relu(h)?;
    let o = g.matmul(h, p[m.w2])?;
    g.add_row(o, p[m.b2])
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = config.hidden;
        let lift_w = store.add("enc.lift.w", Tensor::he(vec![NODE_FEATURES, d], NODE_FEATURES, rng));
        let lift_b = store.add("enc.lift.b", Tensor::zeros(vec![d]));
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("enc.{l}");
                match config.kind {
                    EncoderKind::Gcn => Layer::Gcn {
                        w_msg: store.add(format!("{name}.w_msg"), Tensor::glorot(vec![d, d], d, d, rng)),
                        gate: mlp2(store, &format!("{name}.gate"), EDGE_FEATURES, config.gate_hidden, 1, rng),
                        film: {
                            let m = mlp2(
                                store,
                                &format!("{name}.film"),
                                CONTEXT_FEATURES,
                                config.film_hidden,
                                2 * d,
                                rng,
                            );
                            // Start as the identity modulation.
                            store.get_mut(m.w2).data.iter_mut().for_each(|v| *v *= 0.1);
                            m
                        },
                        w_res: store.add(format!("{name}.w_res"), Tensor::glorot(vec![d, d], d, d, rng)),
                    },
                    EncoderKind::Gin => Layer::Gin {
                        eps: store.add(format!("{name}.eps"), Tensor::scalar(0.0)),
                        w1: store.add(format!("{name}.w1"), Tensor::he(vec![d, d], d, rng)),
                        w2: store.add(format!("{name}.w2"), Tensor::he(vec![d, d], d, rng)),
                        edge: config.gin_edge_mix.then(|| {
                            (
                                store.add(
                                    format!("{name}.edge_w"),
                                    Tensor::glorot(vec![EDGE_FEATURES, d], EDGE_FEATURES, d, rng),
                                ),
                                store.add(format!("{name}.edge_b"), Tensor::zeros(vec![d])),
                            )
                        }),
                    },
                }
            })
            .collect();
        Self {
            config,
            lift_w,
            lift_b,
            layers,
        }
    }

    /// Final node embeddings `[n, hidden]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: &GraphInput) -> Result<Var, TensorError> {
        let n = input.node_count();
        let x = g.constant(input.nodes.clone());
        let e = g.constant(input.edges.clone());
        let s = g.constant(input.context.clone());
        let h = g.matmul(x, p[self.lift_w])?;
        let h = g.add_row(h, p[self.lift_b])?;
        let mut h = g.relu(h)?;
        for layer in &self.layers {
            h = match layer {
                Layer::Gcn {
                    w_msg,
                    gate,
                    film,
                    w_res,
                } => {
                    let gl = apply_mlp2(g, p, gate, e)?;
                    let gv = g.sigmoid(gl)?;
                    let hw = g.matmul(h, p[*w_msg])?;
                    let from = g.gather_rows(hw, input.src.clone())?;
                    let weighted = g.scale_rows(from, gv)?;
                    let m = g.scatter_add_rows(weighted, input.dst.clone(), n)?;
                    let gb = apply_mlp2(g, p, film, s)?;
                    let d = self.config.hidden;
                    let gamma = g.slice_cols(gb, 0, d)?;
                    let beta = g.slice_cols(gb, d, d)?;
                    let one_gamma = g.affine(gamma, 1.0, 1.0)?;
                    let mt = g.mul_row(m, one_gamma)?;
                    let mt = g.add_row(mt, beta)?;
                    let r = g.matmul(h, p[*w_res])?;
                    let z = g.add(mt, r)?;
                    let z = g.relu(z)?;
                    g.layer_norm(z)?
                }
                Layer::Gin { eps, w1, w2, edge } => {
                    let mut from = g.gather_rows(h, input.src.clone())?;
                    if let Some((ew, eb)) = edge {
                        let em = g.matmul(e, p[*ew])?;
                        let em = g.add_row(em, p[*eb])?;
                        from = g.add(from, em)?;
                    }
                    let nsum = g.scatter_add_rows(from, input.dst.clone(), n)?;
                    let one_eps = g.affine(p[*eps], 1.0, 1.0)?;
                    let own = g.mul_scalar(h, one_eps)?;
                    let a = g.add(own, nsum)?;
                    let t = g.matmul(a, p[*w1])?;
                    let t = g.relu(t)?;
                    let t = g.matmul(t, p[*w2])?;
                    let t = g.relu(t)?;
                    let t = g.add(t, a)?;
                    let t = g.layer_norm(t)?;
                    g.relu(t)?
                }
            };
        }
        Ok(h)
    }

    /// Edge gates of every GCN layer, one value per message edge.
    pub fn edge_gates(&self, store: &ParamStore, input: &GraphInput) -> Result<Vec<Vec<f64>>, TensorError> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let e = g.constant(input.edges.clone());
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Gcn { gate, .. } = layer {
                let gl = apply_mlp2(&mut g, &p, gate, e)?;
                let gv = g.sigmoid(gl)?;
                out.push(g.value(gv).data.clone());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floorplan::{Die, Floorplan};
    use crate::rtcg::build_rtcg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn die(id: u32, x: f64, y: f64, w: f64, h: f64, cte: f64) -> Die {
        Die {
            id,
            x_origin: x,
            y_origin: y,
            width: w,
            height: h,
            cte,
        }
    }

    fn sample_fp() -> Floorplan {
        Floorplan::new(
            PackageConfig::reference(),
            vec![
                die(0, 10.0, 10.0, 30.0, 25.0, 4.0),
                die(1, 60.0, 15.0, 25.0, 25.0, 9.0),
                die(2, 20.0, 80.0, 40.0, 30.0, 6.5),
                die(3, 120.0, 120.0, 25.0, 45.0, 10.5),
            ],
        )
    }

    fn random_params(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }

    fn encode(enc: &Encoder, store: &ParamStore, input: &GraphInput) -> Vec<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h = enc.forward(&mut g, &p, input).unwrap();
        g.value(h).data.clone()
    }

    #[test]
    fn messages_are_bidirectional_and_sorted() {
        let graph = build_rtcg(&sample_fp()).unwrap();
        let msgs = message_edges(&graph);
        assert_eq!(msgs.len(), 2 * graph.edges.len());
        assert!(msgs.windows(2).all(|w| (w[0].dst, w[0].src) <= (w[1].dst, w[1].src)));
        for e in &graph.edges {
            let rev = msgs.iter().find(|m| m.src == e.v && m.dst == e.u).unwrap();
            for i in 0..EDGE_FEATURES {
                let sign = if ANTISYMMETRIC.contains(&i) { -1.0 } else { 1.0 };
                assert_eq!(rev.features[i], sign * e.features[i]);
            }
        }
    }

    #[test]
    fn zero_gate_params_give_one_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(EncoderConfig::gcn(), &mut store, &mut rng);
        store.tensors_mut().iter_mut().for_each(|t| t.data.fill(0.0));
        let input = GraphInput::new(&build_rtcg(&sample_fp()).unwrap(), &PackageConfig::reference());
        for layer in enc.edge_gates(&store, &input).unwrap() {
            assert!(layer.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn gates_match_reference_mlp_and_stay_in_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(EncoderConfig::gcn(), &mut store, &mut rng);
        random_params(&mut store, 3);
        let input = GraphInput::new(&build_rtcg(&sample_fp()).unwrap(), &PackageConfig::reference());
        let gates = enc.edge_gates(&store, &input).unwrap();
        let names = store.names().to_vec();
        let find = |n: &str| store.get(names.iter().position(|x| x == n).unwrap());
        let (w1, b1, w2, b2) = (find("enc.0.gate.w1"), find("enc.0.gate.b1"), find("enc.0.gate.w2"), find("enc.0.gate.b2"));
        for (k, e) in input.edges.data.chunks(EDGE_FEATURES).enumerate() {
            let hidden: Vec<f64> = (0..32)
                .map(|j| (b1.data[j] + (0..8).map(|i| e[i] * w1.data[i * 32 + j]).sum::<f64>()).max(0.0))
                .collect();
            let z = b2.data[0] + (0..32).map(|j| hidden[j] * w2.data[j]).sum::<f64>();
            assert!((gates[0][k] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-14);
        }
        assert_eq!(gates.len(), 4);
        assert!(gates.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
    }

    // Scalar-by-scalar evaluation of one GCN layer of width 1 on two nodes.
    #[test]
    fn two_node_gcn_layer_matches_manual_trace() {
        let cfg = EncoderConfig {
            kind: EncoderKind::Gcn,
            layers: 1,
            hidden: 2,
            gate_hidden: 1,
            film_hidden: 1,
            gin_edge_mix: false,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(cfg, &mut store, &mut rng);
        random_params(&mut store, 5);
        let fp = Floorplan::new(
            PackageConfig::reference(),
            vec![die(0, 10.0, 10.0, 30.0, 30.0, 4.0), die(1, 80.0, 12.0, 30.0, 30.0, 9.0)],
        );
        let graph = build_rtcg(&fp).unwrap();
        let input = GraphInput::new(&graph, &fp.config);
        let out = encode(&enc, &store, &input);

        let t = |i: usize| store.get(i).data.clone();
        // Parameter order: lift.w, lift.b, w_msg, gate(w1,b1,w2,b2), film(w1,b1,w2,b2), w_res.
        let (lw, lb, wm) = (t(0), t(1), t(2));
        let (gw1, gb1, gw2, gb2) = (t(3), t(4), t(5), t(6));
        let (fw1, fb1, fw2, fb2) = (t(7), t(8), t(9), t(10));
        let wr = t(11);
        let h0: Vec<[f64; 2]> = graph
            .nodes
            .iter()
            .map(|x| {
                let mut h = [0.0; 2];
                for (c, hc) in h.iter_mut().enumerate() {
                    *hc = (lb[c] + (0..7).map(|i| x[i] * lw[i * 2 + c]).sum::<f64>()).max(0.0);
                }
                h
            })
            .collect();
        let s = global_context(&fp.config);
        let fh = (fb1[0] + (0..6).map(|i| s[i] * fw1[i]).sum::<f64>()).max(0.0);
        let gb: Vec<f64> = (0..4).map(|j| fb2[j] + fh * fw2[j]).collect();
        for v in 0..2 {
            let mut m = [0.0; 2];
            for msg in message_edges(&graph).iter().filter(|m| m.dst == v) {
                let gh = (gb1[0] + (0..8).map(|i| msg.features[i] * gw1[i]).sum::<f64>()).max(0.0);
                let gate = 1.0 / (1.0 + (-(gb2[0] + gh * gw2[0])).exp());
                for c in 0..2 {
                    m[c] += gate * (h0[msg.src][0] * wm[c] + h0[msg.src][1] * wm[2 + c]);
                }
            }
            let mut z = [0.0; 2];
            for c in 0..2 {
                let mt = (1.0 + gb[c]) * m[c] + gb[2 + c];
                let r = h0[v][0] * wr[c] + h0[v][1] * wr[2 + c];
                z[c] = (mt + r).max(0.0);
            }
            let mu = (z[0] + z[1]) / 2.0;
            let var = ((z[0] - mu).powi(2) + (z[1] - mu).powi(2)) / 2.0;
            for c in 0..2 {
                let expect = (z[c] - mu) / (var + 1e-5).sqrt();
                assert!((out[v * 2 + c] - expect).abs() < 1e-12, "{} vs {expect}", out[v * 2 + c]);
            }
        }
    }

    #[test]
    fn isolated_gcn_node_sees_only_film_shift_and_residual() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(EncoderConfig { layers: 1, ..EncoderConfig::gcn() }, &mut store, &mut rng);
        let fp = Floorplan::new(PackageConfig::reference(), vec![die(0, 10.0, 10.0, 30.0, 30.0, 4.0)]);
        let input = GraphInput::new(&build_rtcg(&fp).unwrap(), &fp.config);
        let out = encode(&enc, &store, &input);
        // Zeroing the message weight must not matter without neighbours.
        let mut zeroed = store.clone();
        zeroed.get_mut(2).data.fill(0.0);
        zeroed.get_mut(3).data.fill(0.0);
        assert_eq!(encode(&enc, &zeroed, &input), out);
    }

    #[test]
    fn gin_single_node_matches_manual_trace() {
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 2,
            ..EncoderConfig::gin()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = Encoder::new(cfg, &mut store, &mut rng);
        // lift: identity on the first two features.
        store.get_mut(0).data = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        store.get_mut(1).data = vec![0.0, 0.0];
        store.get_mut(2).data = vec![0.5];
        store.get_mut(3).data = vec![1.0, 0.0, 0.0, 1.0];
        store.get_mut(4).data = vec![2.0, 0.0, 0.0, 1.0];
        let fp = Floorplan::new(PackageConfig::reference(), vec![die(0, 10.0, 10.0, 40.0, 20.0, 4.0)]);
        let input = GraphInput::new(&build_rtcg(&fp).unwrap(), &fp.config);
        let out = encode(&enc, &store, &input);
        // h = (0.2, 0.1); a = 1.5 h; t = (2a0, a1) + a = (3·0.3, 2·0.15).
        let t = [0.9, 0.3];
        let mu = 0.6;
        let sd = (0.09f64 + 1e-5).sqrt();
        assert!((out[0] - ((t[0] - mu) / sd).max(0.0)).abs() < 1e-12);
        assert_eq!(out[1], 0.0);

        // ε = −1 cancels the self term entirely.
        store.get_mut(2).data = vec![-1.0];
        let cancelled = encode(&enc, &store, &input);
        assert_eq!(cancelled, vec![0.0, 0.0]);
    }

    fn permuted(fp: &Floorplan, perm: &[usize]) -> Floorplan {
        let mut q = fp.clone();
        q.dies = perm.iter().map(|&i| fp.dies[i].clone()).collect();
        q
    }

    #[test]
    fn encoders_are_permutation_equivariant() {
        let fp = sample_fp();
        let perm = [2usize, 0, 3, 1];
        for cfg in [EncoderConfig::gcn(), EncoderConfig::gin(), EncoderConfig { gin_edge_mix: true, ..EncoderConfig::gin() }] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let enc = Encoder::new(cfg, &mut store, &mut rng);
            let a = encode(&enc, &store, &GraphInput::new(&build_rtcg(&fp).unwrap(), &fp.config));
            let q = permuted(&fp, &perm);
            let b = encode(&enc, &store, &GraphInput::new(&build_rtcg(&q).unwrap(), &q.config));
            let d = cfg.hidden;
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..d {
                    assert!((b[new * d + c] - a[old * d + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let fp = Floorplan::new(
            PackageConfig::reference(),
            vec![
                die(0, 10.0, 10.0, 30.0, 25.0, 4.0),
                die(1, 60.0, 15.0, 25.0, 25.0, 9.0),
                die(2, 20.0, 80.0, 40.0, 30.0, 6.5),
            ],
        );
        let mut input = GraphInput::new(&build_rtcg(&fp).unwrap(), &fp.config);
        // Bring features to the unit scale seen after normalization.
        for t in [&mut input.nodes, &mut input.edges] {
            let m = t.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            t.data.iter_mut().for_each(|v| *v /= m);
        }
        for cfg in [EncoderConfig::gcn(), EncoderConfig::gin()] {
            let cfg = EncoderConfig {
                hidden: 6,
                gate_hidden: 4,
                film_hidden: 3,
                ..cfg
            };
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let enc = Encoder::new(cfg, &mut store, &mut rng);
            let loss = |g: &mut Graph, store: &ParamStore| -> Result<Var, TensorError> {
                let p = store.bind(g);
                let h = enc.forward(g, &p, &input)?;
                let sq = g.mul(h, h)?;
                let w = g.constant(Tensor {
                    shape: g.shape(h).to_vec(),
                    data: (0..g.value(h).len()).map(|i| (i as f64 * 0.37).sin()).collect(),
                });
                let s = g.mul(sq, w)?;
                g.sum(s)
            };
            let mut g = Graph::new();
            let l = loss(&mut g, &store).unwrap();
            let grads = g.backward(l).unwrap();
            let ad = g.param_grads(&grads, store.len());
            let eval = |s: &ParamStore| {
                let mut g = Graph::new();
                let l = loss(&mut g, s).unwrap();
                g.value(l).item()
            };
            let h = 1e-5;
            for id in 0..store.len() {
                let ad = ad[id].clone().unwrap_or_else(|| vec![0.0; store.get(id).len()]);
                let scale = ad.iter().fold(1e-6f64, |a, v| a.max(v.abs()));
                for k in 0..ad.len() {
                    let mut plus = store.clone();
                    plus.get_mut(id).data[k] += h;
                    let mut minus = store.clone();
                    minus.get_mut(id).data[k] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let err = (fd - ad[k]).abs() / scale;
                    assert!(err < 1e-5, "{:?} {}[{k}]: {} vs {fd}", cfg.kind, store.names()[id], ad[k]);
                }
            }
        }
    }
}
