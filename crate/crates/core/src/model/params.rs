use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::encoding::CveParams;
use crate::linalg::{uniform_vec, Linear, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    pub fn zeros(d: usize) -> Self {
        LayerNorm {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub cve_t: CveParams,
    pub cve_v: CveParams,
    /// `V × d` lookup embedding of variable codes.
    pub feature_table: Matrix,
    /// Token standing in for an empty observation window.
    pub placeholder: Vec<f64>,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    /// `d × d` fusion projection, no bias.
    pub fusion_w: Matrix,
    pub fusion_a: Vec<f64>,
    pub static1: Linear,
    pub static2: Linear,
    pub classifier: Linear,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, vocab_size: usize, static_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let bound_d = 1.0 / (d as f64).sqrt();
        let cve_t = CveParams::init(d, &mut rng);
        let cve_v = CveParams::init(d, &mut rng);
        let feature_table = Matrix::uniform(vocab_size, d, bound_d, &mut rng);
        let placeholder = uniform_vec(d, bound_d, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                wq: Linear::init(d, d, &mut rng),
                wk: Linear::init(d, d, &mut rng),
                wv: Linear::init(d, d, &mut rng),
                wo: Linear::init(d, d, &mut rng),
                ln2: LayerNorm::identity(d),
                ff1: Linear::init(d, config.ffn_hidden, &mut rng),
                ff2: Linear::init(config.ffn_hidden, d, &mut rng),
            })
            .collect();
        ModelParams {
            cve_t,
            cve_v,
            feature_table,
            placeholder,
            blocks,
            final_ln: LayerNorm::identity(d),
            fusion_w: Matrix::uniform(d, d, bound_d, &mut rng),
            fusion_a: uniform_vec(d, bound_d, &mut rng),
            static1: Linear::init(static_dim, config.static_hidden, &mut rng),
            static2: Linear::init(config.static_hidden, config.static_hidden, &mut rng),
            classifier: Linear::init(d + config.static_hidden, config.head.outputs(), &mut rng),
        }
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn d(&self) -> usize {
        self.feature_table.cols
    }

    pub fn vocab_size(&self) -> usize {
        self.feature_table.rows
    }

    pub fn static_dim(&self) -> usize {
        self.static1.input_dim()
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("cve_t.w1".into(), &self.cve_t.w1),
            ("cve_t.b1".into(), &self.cve_t.b1),
            ("cve_t.w2".into(), &self.cve_t.w2.data),
            ("cve_t.b2".into(), &self.cve_t.b2),
            ("cve_v.w1".into(), &self.cve_v.w1),
            ("cve_v.b1".into(), &self.cve_v.b1),
            ("cve_v.w2".into(), &self.cve_v.w2.data),
            ("cve_v.b2".into(), &self.cve_v.b2),
            ("feature_table".into(), &self.feature_table.data),
            ("placeholder".into(), &self.placeholder),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                (p("ln1.gain"), b.ln1.gain.as_slice()),
                (p("ln1.bias"), &b.ln1.bias),
                (p("wq.w"), &b.wq.w.data),
                (p("wq.b"), &b.wq.b),
                (p("wk.w"), &b.wk.w.data),
                (p("wk.b"), &b.wk.b),
                (p("wv.w"), &b.wv.w.data),
                (p("wv.b"), &b.wv.b),
                (p("wo.w"), &b.wo.w.data),
                (p("wo.b"), &b.wo.b),
                (p("ln2.gain"), &b.ln2.gain),
                (p("ln2.bias"), &b.ln2.bias),
                (p("ff1.w"), &b.ff1.w.data),
                (p("ff1.b"), &b.ff1.b),
                (p("ff2.w"), &b.ff2.w.data),
                (p("ff2.b"), &b.ff2.b),
            ]);
        }
        out.extend([
            ("final_ln.gain".to_string(), self.final_ln.gain.as_slice()),
            ("final_ln.bias".into(), &self.final_ln.bias),
            ("fusion_w".into(), &self.fusion_w.data),
            ("fusion_a".into(), &self.fusion_a),
            ("static1.w".into(), &self.static1.w.data),
            ("static1.b".into(), &self.static1.b),
            ("static2.w".into(), &self.static2.w.data),
            ("static2.b".into(), &self.static2.b),
            ("classifier.w".into(), &self.classifier.w.data),
            ("classifier.b".into(), &self.classifier.b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("cve_t.w1".into(), &mut self.cve_t.w1),
            ("cve_t.b1".into(), &mut self.cve_t.b1),
            ("cve_t.w2".into(), &mut self.cve_t.w2.data),
            ("cve_t.b2".into(), &mut self.cve_t.b2),
            ("cve_v.w1".into(), &mut self.cve_v.w1),
            ("cve_v.b1".into(), &mut self.cve_v.b1),
            ("cve_v.w2".into(), &mut self.cve_v.w2.data),
            ("cve_v.b2".into(), &mut self.cve_v.b2),
            ("feature_table".into(), &mut self.feature_table.data),
            ("placeholder".into(), &mut self.placeholder),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                (p("ln1.gain"), &mut b.ln1.gain),
                (p("ln1.bias"), &mut b.ln1.bias),
                (p("wq.w"), &mut b.wq.w.data),
                (p("wq.b"), &mut b.wq.b),
                (p("wk.w"), &mut b.wk.w.data),
                (p("wk.b"), &mut b.wk.b),
                (p("wv.w"), &mut b.wv.w.data),
                (p("wv.b"), &mut b.wv.b),
                (p("wo.w"), &mut b.wo.w.data),
                (p("wo.b"), &mut b.wo.b),
                (p("ln2.gain"), &mut b.ln2.gain),
                (p("ln2.bias"), &mut b.ln2.bias),
                (p("ff1.w"), &mut b.ff1.w.data),
                (p("ff1.b"), &mut b.ff1.b),
                (p("ff2.w"), &mut b.ff2.w.data),
                (p("ff2.b"), &mut b.ff2.b),
            ]);
        }
        out.extend([
            ("final_ln.gain".to_string(), &mut self.final_ln.gain),
            ("final_ln.bias".into(), &mut self.final_ln.bias),
            ("fusion_w".into(), &mut self.fusion_w.data),
            ("fusion_a".into(), &mut self.fusion_a),
            ("static1.w".into(), &mut self.static1.w.data),
            ("static1.b".into(), &mut self.static1.b),
            ("static2.w".into(), &mut self.static2.w.data),
            ("static2.b".into(), &mut self.static2.b),
            ("classifier.w".into(), &mut self.classifier.w.data),
            ("classifier.b".into(), &mut self.classifier.b),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.len() == t2.len())
    }
}
