//! Parameter containers. Every trainable tensor is a [`Matrix`] (vectors are
//! `1 x n`) so optimizers, checkpoints and gradient checks can walk them in a
//! single fixed order via [`Params::tensors`].

use crate::model::config::{HeadKind, ModelConfig};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
    /// Attention sublayer removed; the residual path (plus `compensation`,
    /// when present) stands in for it.
    pub pruned: bool,
    /// Linear compensation `W_c` (`D x D`) applied to the post-norm input.
    pub compensation: Option<Matrix>,
}

/// One view of the visual token compressor. Head `i` uses columns
/// `[i d, (i + 1) d)` of `w_q` and `w_k`; `w_v` is shared by all heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MvtcView {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MvtcParams {
    pub text: MvtcView,
    pub image: MvtcView,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Completion {
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
    },
    Plain {
        w: Matrix,
        b: Matrix,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub vis_w: Matrix,
    pub vis_b: Matrix,
    pub mvtc: MvtcParams,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    pub head: HeadParams,
}

fn ones(n: usize) -> Matrix {
    Matrix::from_vec(1, n, vec![1.0; n]).expect("shape")
}

impl Params {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.d_model;
        let f = cfg.mlp_hidden;
        let scaled = |rng: &mut SeededRng, rows: usize, cols: usize, gain: f64| {
            rng.normal_matrix(rows, cols, gain / (rows as f64).sqrt())
        };
        let residual_gain = 1.0 / ((2 * cfg.layers.max(1)) as f64).sqrt();
        let tok_emb = rng.normal_matrix(cfg.vocab_size, d, 1.0);
        let pos_emb = rng.normal_matrix(cfg.max_seq, d, 0.1);
        let vis_w = scaled(rng, cfg.visual_dim, d, 1.0);
        let vis_b = Matrix::zeros(1, d);
        let view = |rng: &mut SeededRng| MvtcView {
            w_q: scaled(rng, d, d, 1.0),
            w_k: scaled(rng, d, d, 1.0),
            w_v: scaled(rng, d, d, 1.0),
        };
        let mvtc = MvtcParams {
            text: view(rng),
            image: view(rng),
        };
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_gain: ones(d),
                ln1_bias: Matrix::zeros(1, d),
                w_q: scaled(rng, d, d, 1.0),
                w_k: scaled(rng, d, d, 1.0),
                w_v: scaled(rng, d, d, 1.0),
                w_o: scaled(rng, d, d, residual_gain),
                ln2_gain: ones(d),
                ln2_bias: Matrix::zeros(1, d),
                mlp_w1: scaled(rng, d, f, 1.0),
                mlp_b1: Matrix::zeros(1, f),
                mlp_w2: scaled(rng, f, d, residual_gain),
                mlp_b2: Matrix::zeros(1, d),
                pruned: false,
                compensation: None,
            })
            .collect();
        let head = match cfg.head {
            HeadKind::Completion => HeadParams::Completion {
                w1: scaled(rng, 3 * d, 3 * d, 1.0),
                b1: Matrix::zeros(1, 3 * d),
                w2: scaled(rng, 3 * d, cfg.num_entities, 1.0),
                b2: Matrix::zeros(1, cfg.num_entities),
            },
            HeadKind::Plain => HeadParams::Plain {
                w: scaled(rng, d, cfg.num_entities, 1.0),
                b: Matrix::zeros(1, cfg.num_entities),
            },
        };
        Self {
            tok_emb,
            pos_emb,
            vis_w,
            vis_b,
            mvtc,
            layers,
            lnf_gain: ones(d),
            lnf_bias: Matrix::zeros(1, d),
            head,
        }
    }

    /// All tensors in checkpoint order, with stable names.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("vis_w".into(), &self.vis_w),
            ("vis_b".into(), &self.vis_b),
        ];
        for (tag, v) in [("text", &self.mvtc.text), ("image", &self.mvtc.image)] {
            out.push((format!("mvtc.{tag}.w_q"), &v.w_q));
            out.push((format!("mvtc.{tag}.w_k"), &v.w_k));
            out.push((format!("mvtc.{tag}.w_v"), &v.w_v));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in l.named() {
                out.push((format!("layers.{i}.{name}"), m));
            }
            if let Some(wc) = &l.compensation {
                out.push((format!("layers.{i}.compensation"), wc));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        match &self.head {
            HeadParams::Completion { w1, b1, w2, b2 } => {
                out.push(("head.w1".into(), w1));
                out.push(("head.b1".into(), b1));
                out.push(("head.w2".into(), w2));
                out.push(("head.b2".into(), b2));
            }
            HeadParams::Plain { w, b } => {
                out.push(("head.w".into(), w));
                out.push(("head.b".into(), b));
            }
        }
        out
    }

    /// Mutable counterpart of [`Params::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("vis_w".into(), &mut self.vis_w),
            ("vis_b".into(), &mut self.vis_b),
        ];
        for (tag, v) in [("text", &mut self.mvtc.text), ("image", &mut self.mvtc.image)] {
            out.push((format!("mvtc.{tag}.w_q"), &mut v.w_q));
            out.push((format!("mvtc.{tag}.w_k"), &mut v.w_k));
            out.push((format!("mvtc.{tag}.w_v"), &mut v.w_v));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                ln1_gain,
                ln1_bias,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2_gain,
                ln2_bias,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
                compensation,
                ..
            } = l;
            let named: [(&str, &mut Matrix); 12] = [
                ("ln1_gain", ln1_gain),
                ("ln1_bias", ln1_bias),
                ("w_q", w_q),
                ("w_k", w_k),
                ("w_v", w_v),
                ("w_o", w_o),
                ("ln2_gain", ln2_gain),
                ("ln2_bias", ln2_bias),
                ("mlp_w1", mlp_w1),
                ("mlp_b1", mlp_b1),
                ("mlp_w2", mlp_w2),
                ("mlp_b2", mlp_b2),
            ];
            for (name, m) in named {
                out.push((format!("layers.{i}.{name}"), m));
            }
            if let Some(wc) = compensation {
                out.push((format!("layers.{i}.compensation"), wc));
            }
        }
        out.push(("lnf_gain".into(), &mut self.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.lnf_bias));
        match &mut self.head {
            HeadParams::Completion { w1, b1, w2, b2 } => {
                out.push(("head.w1".into(), w1));
                out.push(("head.b1".into(), b1));
                out.push(("head.w2".into(), w2));
                out.push(("head.b2".into(), b2));
            }
            HeadParams::Plain { w, b } => {
                out.push(("head.w".into(), w));
                out.push(("head.b".into(), b));
            }
        }
        out
    }

    /// Same structure, every entry zero. Used for gradients and optimizer state.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.tensors_mut() {
            m.data_mut().fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &Params) {
        let theirs = other.tensors();
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(theirs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in self.tensors_mut() {
            m.scale(s);
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }
}

impl LayerParams {
    fn named(&self) -> [(&'static str, &Matrix); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ]
    }
}
