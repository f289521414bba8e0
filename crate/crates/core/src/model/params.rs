//! Model parameter tree.
//!
//! Parameter structs are generic over their element type: `ModelParams<Matrix>`
//! owns the weights, `ModelParams<NodeId>` is the same tree after insertion
//! into a graph. `map` and `for_each` walk the tree in one fixed order, which
//! defines the checkpoint tensor order and the optimizer iteration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Matrix;
use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnHead<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub heads: Vec<AttnHead<T>>,
    pub attn_out: Linear<T>,
    pub ln1: LayerNorm<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub ln2: LayerNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream<T> {
    pub proj: Linear<T>,
    pub pos: T,
    pub blocks: Vec<Block<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoderParams<T> {
    pub proj: Linear<T>,
    pub pos: T,
    pub blocks: Vec<Block<T>>,
    pub pool_visual: T,
    pub pool_subtitle: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub visual: Stream<T>,
    pub subtitle: Option<Stream<T>>,
    pub fusion: Linear<T>,
    pub query: QueryEncoderParams<T>,
    pub start_head: ConvStack<T>,
    pub end_head: ConvStack<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    fn for_each<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{name}.w"), &self.w);
        f(format!("{name}.b"), &self.b);
    }
}

impl<T> LayerNorm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNorm<U> {
        LayerNorm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    fn for_each<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{name}.gamma"), &self.gamma);
        f(format!("{name}.beta"), &self.beta);
    }
}

impl<T> Block<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Block<U> {
        Block {
            heads: self
                .heads
                .iter()
                .map(|h| AttnHead {
                    wq: f(&h.wq),
                    wk: f(&h.wk),
                    wv: f(&h.wv),
                })
                .collect(),
            attn_out: self.attn_out.map(f),
            ln1: self.ln1.map(f),
            ffn1: self.ffn1.map(f),
            ffn2: self.ffn2.map(f),
            ln2: self.ln2.map(f),
        }
    }

    fn for_each<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        for (i, h) in self.heads.iter().enumerate() {
            f(format!("{name}.head{i}.wq"), &h.wq);
            f(format!("{name}.head{i}.wk"), &h.wk);
            f(format!("{name}.head{i}.wv"), &h.wv);
        }
        self.attn_out.for_each(&format!("{name}.attn_out"), f);
        self.ln1.for_each(&format!("{name}.ln1"), f);
        self.ffn1.for_each(&format!("{name}.ffn1"), f);
        self.ffn2.for_each(&format!("{name}.ffn2"), f);
        self.ln2.for_each(&format!("{name}.ln2"), f);
    }
}

impl<T> Stream<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Stream<U> {
        Stream {
            proj: self.proj.map(f),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
        }
    }

    fn for_each<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        self.proj.for_each(&format!("{name}.proj"), f);
        f(format!("{name}.pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("{name}.block{i}"), f);
        }
    }
}

impl<T> QueryEncoderParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> QueryEncoderParams<U> {
        QueryEncoderParams {
            proj: self.proj.map(f),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            pool_visual: f(&self.pool_visual),
            pool_subtitle: f(&self.pool_subtitle),
        }
    }

    fn for_each<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        self.proj.for_each(&format!("{name}.proj"), f);
        f(format!("{name}.pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("{name}.block{i}"), f);
        }
        f(format!("{name}.pool_visual"), &self.pool_visual);
        f(format!("{name}.pool_subtitle"), &self.pool_subtitle);
    }
}

impl<T> ConvStack<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvStack<U> {
        ConvStack {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    fn for_each<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{name}.w1"), &self.w1);
        f(format!("{name}.b1"), &self.b1);
        f(format!("{name}.w2"), &self.w2);
        f(format!("{name}.b2"), &self.b2);
    }
}

impl<T> ModelParams<T> {
    /// Visit every tensor mutably, in the same order as [`Self::for_each`].
    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        let visit_linear = |l: &mut Linear<T>, f: &mut dyn FnMut(&mut T)| {
            f(&mut l.w);
            f(&mut l.b);
        };
        let visit_norm = |l: &mut LayerNorm<T>, f: &mut dyn FnMut(&mut T)| {
            f(&mut l.gamma);
            f(&mut l.beta);
        };
        let visit_block = |b: &mut Block<T>, f: &mut dyn FnMut(&mut T)| {
            for h in &mut b.heads {
                f(&mut h.wq);
                f(&mut h.wk);
                f(&mut h.wv);
            }
            visit_linear(&mut b.attn_out, f);
            visit_norm(&mut b.ln1, f);
            visit_linear(&mut b.ffn1, f);
            visit_linear(&mut b.ffn2, f);
            visit_norm(&mut b.ln2, f);
        };
        let visit_stream = |s: &mut Stream<T>, f: &mut dyn FnMut(&mut T)| {
            visit_linear(&mut s.proj, f);
            f(&mut s.pos);
            for b in &mut s.blocks {
                visit_block(b, f);
            }
        };
        let visit_conv = |c: &mut ConvStack<T>, f: &mut dyn FnMut(&mut T)| {
            f(&mut c.w1);
            f(&mut c.b1);
            f(&mut c.w2);
            f(&mut c.b2);
        };
        visit_stream(&mut self.visual, f);
        if let Some(sub) = &mut self.subtitle {
            visit_stream(sub, f);
        }
        visit_linear(&mut self.fusion, f);
        visit_linear(&mut self.query.proj, f);
        f(&mut self.query.pos);
        for b in &mut self.query.blocks {
            visit_block(b, f);
        }
        f(&mut self.query.pool_visual);
        f(&mut self.query.pool_subtitle);
        visit_conv(&mut self.start_head, f);
        visit_conv(&mut self.end_head, f);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            visual: self.visual.map(f),
            subtitle: self.subtitle.as_ref().map(|s| s.map(f)),
            fusion: self.fusion.map(f),
            query: self.query.map(f),
            start_head: self.start_head.map(f),
            end_head: self.end_head.map(f),
        }
    }

    /// Visit every tensor with its canonical name, in checkpoint order.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.visual.for_each("video.visual", f);
        if let Some(sub) = &self.subtitle {
            sub.for_each("video.subtitle", f);
        }
        self.fusion.for_each("video.fusion", f);
        self.query.for_each("query", f);
        self.start_head.for_each("loc.start", f);
        self.end_head.for_each("loc.end", f);
    }
}

struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    fn uniform(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| self.rng.gen_range(-bound..bound))
                .collect(),
        )
    }

    fn linear(&mut self, inp: usize, out: usize) -> Linear<Matrix> {
        Linear {
            w: self.uniform(inp, out, inp),
            b: self.uniform(1, out, inp),
        }
    }

    fn norm(&self, n: usize) -> LayerNorm<Matrix> {
        LayerNorm {
            gamma: Matrix::from_vec(1, n, vec![1.0; n]),
            beta: Matrix::zeros(1, n),
        }
    }

    fn block(&mut self, cfg: &ModelConfig) -> Block<Matrix> {
        let h = cfg.hidden_dim;
        let dh = h / cfg.n_heads;
        Block {
            heads: (0..cfg.n_heads)
                .map(|_| AttnHead {
                    wq: self.uniform(h, dh, h),
                    wk: self.uniform(h, dh, h),
                    wv: self.uniform(h, dh, h),
                })
                .collect(),
            attn_out: self.linear(h, h),
            ln1: self.norm(h),
            ffn1: self.linear(h, 2 * h),
            ffn2: self.linear(2 * h, h),
            ln2: self.norm(h),
        }
    }

    fn stream(&mut self, cfg: &ModelConfig, input_dim: usize) -> Stream<Matrix> {
        let h = cfg.hidden_dim;
        Stream {
            proj: self.linear(input_dim, h),
            pos: self.uniform(cfg.max_time_steps, h, h),
            blocks: (0..cfg.video_blocks).map(|_| self.block(cfg)).collect(),
        }
    }

    fn conv_stack(&mut self, cfg: &ModelConfig) -> ConvStack<Matrix> {
        let h = cfg.hidden_dim;
        let k = cfg.conv_kernel;
        ConvStack {
            w1: self.uniform(h, h * k, h * k),
            b1: self.uniform(1, h, h * k),
            w2: self.uniform(1, h * k, h * k),
            b2: self.uniform(1, 1, h * k),
        }
    }
}

impl ModelParams<Matrix> {
    /// Seed-deterministic initialization: weights and biases are uniform in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`; layer-norm gains start at one.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut init = Initializer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let h = cfg.hidden_dim;
        let visual = init.stream(cfg, cfg.visual_dim);
        let subtitle = cfg.subtitle_dim.map(|d| init.stream(cfg, d));
        let fusion = init.linear(4 * h, h);
        let query = QueryEncoderParams {
            proj: init.linear(h, h),
            pos: init.uniform(cfg.max_time_steps, h, h),
            blocks: (0..cfg.query_blocks).map(|_| init.block(cfg)).collect(),
            pool_visual: init.uniform(h, 1, h),
            pool_subtitle: init.uniform(h, 1, h),
        };
        let start_head = init.conv_stack(cfg);
        let end_head = init.conv_stack(cfg);
        ModelParams {
            visual,
            subtitle,
            fusion,
            query,
            start_head,
            end_head,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.for_each(&mut |_, m| count += m.data.len());
        count
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, m| ok &= m.all_finite());
        ok
    }

    /// Tensors in checkpoint order.
    pub fn flatten(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, m| out.push((name, m)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            n_heads: 2,
            video_blocks: 2,
            query_blocks: 1,
            visual_dim: 8,
            subtitle_dim: Some(8),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_cfg();
        assert_eq!(ModelParams::init(&cfg), ModelParams::init(&cfg));
        let other = ModelConfig {
            seed: 7,
            ..tiny_cfg()
        };
        assert_ne!(ModelParams::init(&cfg), ModelParams::init(&other));
    }

    #[test]
    fn visit_order_matches_map_order() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg);
        let mut names = Vec::new();
        params.for_each(&mut |name, _| names.push(name));
        let mut count = 0usize;
        let mapped: ModelParams<usize> = params.map(&mut |_| {
            count += 1;
            count
        });
        let mut mapped_iter = Vec::new();
        mapped.for_each(&mut |_, &i| mapped_iter.push(i));
        assert_eq!(mapped_iter, (1..=names.len()).collect::<Vec<_>>());
        assert_eq!(
            names.len(),
            names.iter().collect::<std::collections::BTreeSet<_>>().len()
        );
    }

    #[test]
    fn for_each_mut_matches_for_each_order() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg);
        let mut shapes = Vec::new();
        params.for_each(&mut |_, m| shapes.push(m.shape()));
        let mut shapes_mut = Vec::new();
        params.for_each_mut(&mut |m| shapes_mut.push(m.shape()));
        assert_eq!(shapes, shapes_mut);
    }
}
