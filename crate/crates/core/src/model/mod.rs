//! The four CMAE networks: trajectory encoder, reconstruction decoder,
//! contrastive projector and pair discriminator.

mod checkpoint;
mod forward;
pub(crate) mod tree;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{DArray, Graph, Var};
use crate::maskplan::MaskPlan;
use crate::trajio::{PatchSequence, N_PATCHES, PATCH_LEN};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    decode, discriminate, discriminator_logits, encode, pool, project, transformer_block,
};
pub use tree::Tree;
use tree::param_tree;

/// Which encoder summary the discriminator consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscInput {
    /// Average-pooled encoder output (before the projector).
    Pooled,
    /// Unit-norm projector output.
    Projected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub disc_depth: usize,
    pub disc_heads: usize,
    pub disc_mlp_hidden: usize,
    /// Hidden width of transformer MLPs as a multiple of the model width.
    pub mlp_ratio: usize,
    pub patch_len: usize,
    pub n_patches: usize,
    pub disc_input: DiscInput,
}

impl Default for ModelConfig {
    /// Full-size configuration: 8 blocks × 8 heads at width 512 for the
    /// encoder, 8 × 8 at width 256 for the decoder.
    fn default() -> Self {
        Self {
            enc_dim: 512,
            enc_depth: 8,
            enc_heads: 8,
            dec_dim: 256,
            dec_depth: 8,
            dec_heads: 8,
            proj_hidden: 512,
            proj_out: 128,
            disc_depth: 2,
            disc_heads: 8,
            disc_mlp_hidden: 512,
            mlp_ratio: 4,
            patch_len: PATCH_LEN,
            n_patches: N_PATCHES,
            disc_input: DiscInput::Pooled,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in seconds on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            enc_dim: 32,
            enc_depth: 2,
            enc_heads: 4,
            dec_dim: 16,
            dec_depth: 1,
            dec_heads: 2,
            proj_hidden: 32,
            proj_out: 16,
            disc_depth: 1,
            disc_heads: 4,
            disc_mlp_hidden: 32,
            ..Self::default()
        }
    }

    pub fn disc_dim(&self) -> usize {
        match self.disc_input {
            DiscInput::Pooled => self.enc_dim,
            DiscInput::Projected => self.proj_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("enc_dim", self.enc_dim),
            ("enc_heads", self.enc_heads),
            ("dec_dim", self.dec_dim),
            ("dec_heads", self.dec_heads),
            ("proj_hidden", self.proj_hidden),
            ("proj_out", self.proj_out),
            ("disc_heads", self.disc_heads),
            ("disc_mlp_hidden", self.disc_mlp_hidden),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (d, h, what) in [
            (self.enc_dim, self.enc_heads, "enc"),
            (self.dec_dim, self.dec_heads, "dec"),
            (self.disc_dim(), self.disc_heads, "disc"),
        ] {
            if d % h != 0 {
                return Err(Error::Config(format!(
                    "{what} width {d} is not divisible by {h} heads"
                )));
            }
        }
        if self.patch_len != PATCH_LEN || self.n_patches != N_PATCHES {
            return Err(Error::Config(format!(
                "patch layout is fixed at {N_PATCHES} patches of {PATCH_LEN} values"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}
param_tree!(Linear { leaves: [weight, bias], trees: [] });

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}
param_tree!(Norm { leaves: [gain, bias], trees: [] });

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub ln2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
param_tree!(Block { leaves: [], trees: [ln1, query, key, value, out, ln2, fc1, fc2] });

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub patch_embed: Linear<T>,
    pub pos: T,
    pub blocks: Vec<Block<T>>,
}
param_tree!(Encoder { leaves: [pos], trees: [patch_embed, blocks] });

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub embed: Linear<T>,
    pub mask_token: T,
    pub pos: T,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub head: Linear<T>,
}
param_tree!(Decoder { leaves: [mask_token, pos], trees: [embed, blocks, norm, head] });

#[derive(Clone, Debug, PartialEq)]
pub struct Projector<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
param_tree!(Projector { leaves: [], trees: [fc1, fc2] });

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub blocks: Vec<Block<T>>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
param_tree!(Discriminator { leaves: [], trees: [blocks, fc1, fc2] });

#[derive(Clone, Debug, PartialEq)]
pub struct Cmae<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub projector: Projector<T>,
    pub discriminator: Discriminator<T>,
}
param_tree!(Cmae { leaves: [], trees: [encoder, decoder, projector, discriminator] });

/// Parameter groups, used to choose what a training stage updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Groups {
    pub encoder: bool,
    pub decoder: bool,
    pub projector: bool,
    pub discriminator: bool,
}

impl Groups {
    pub const NONE: Groups = Groups {
        encoder: false,
        decoder: false,
        projector: false,
        discriminator: false,
    };
    pub const ALL: Groups = Groups {
        encoder: true,
        decoder: true,
        projector: true,
        discriminator: true,
    };
}

/// All learnable arrays plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub net: Cmae<DArray>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> DArray {
        let n = shape.iter().product();
        DArray::new(
            shape.to_vec(),
            (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect(),
        )
        .expect("shape and length agree")
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear<DArray> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            weight: self.uniform(&[fan_in, fan_out], bound),
            bias: DArray::zeros(&[fan_out]),
        }
    }

    fn norm(&mut self, d: usize) -> Norm<DArray> {
        Norm {
            gain: DArray::filled(&[d], 1.0),
            bias: DArray::zeros(&[d]),
        }
    }

    fn block(&mut self, d: usize, ratio: usize) -> Block<DArray> {
        Block {
            ln1: self.norm(d),
            query: self.linear(d, d),
            key: self.linear(d, d),
            value: self.linear(d, d),
            out: self.linear(d, d),
            ln2: self.norm(d),
            fc1: self.linear(d, d * ratio),
            fc2: self.linear(d * ratio, d),
        }
    }

    fn table(&mut self, rows: usize, cols: usize) -> DArray {
        self.uniform(&[rows, cols], 0.035)
    }

    /// Sin/cos starting values for a learned positional table. Rows of
    /// the mask-token sequence are otherwise nearly constant, which makes
    /// the first layer norm badly conditioned.
    fn positions(&mut self, rows: usize, cols: usize) -> DArray {
        let mut data = Vec::with_capacity(rows * cols);
        for p in 0..rows {
            for c in 0..cols {
                let freq = 10000f64.powf(-((c / 2 * 2) as f64) / cols as f64);
                let a = p as f64 * freq;
                data.push(if c % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
        DArray::new(vec![rows, cols], data).expect("shape and length agree")
    }
}

impl ModelParams {
    /// Random initialization: Xavier-uniform linear weights, zero biases,
    /// unit norm gains, sinusoidal positional tables and a small uniform mask token.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let r = c.mlp_ratio;
        let encoder = Encoder {
            patch_embed: init.linear(c.patch_len, c.enc_dim),
            pos: init.positions(c.n_patches, c.enc_dim),
            blocks: (0..c.enc_depth).map(|_| init.block(c.enc_dim, r)).collect(),
        };
        let decoder = Decoder {
            embed: init.linear(c.enc_dim, c.dec_dim),
            mask_token: init.table(1, c.dec_dim),
            pos: init.positions(c.n_patches, c.dec_dim),
            blocks: (0..c.dec_depth).map(|_| init.block(c.dec_dim, r)).collect(),
            norm: init.norm(c.dec_dim),
            head: init.linear(c.dec_dim, c.patch_len),
        };
        let projector = Projector {
            fc1: init.linear(c.enc_dim, c.proj_hidden),
            fc2: init.linear(c.proj_hidden, c.proj_out),
        };
        let dd = c.disc_dim();
        let discriminator = Discriminator {
            blocks: (0..c.disc_depth).map(|_| init.block(dd, r)).collect(),
            fc1: init.linear(2 * dd, c.disc_mlp_hidden),
            fc2: init.linear(c.disc_mlp_hidden, 2),
        };
        Ok(Self {
            config: config.clone(),
            net: Cmae {
                encoder,
                decoder,
                projector,
                discriminator,
            },
        })
    }

    /// Records every array on `g`; arrays of groups in `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: Groups) -> Cmae<Var> {
        let leaf = |on: bool| {
            move |g: &mut Graph, a: &DArray| if on { g.param(a) } else { g.leaf(a) }
        };
        let (e, d, p, s) = (
            leaf(trainable.encoder),
            leaf(trainable.decoder),
            leaf(trainable.projector),
            leaf(trainable.discriminator),
        );
        Cmae {
            encoder: self.net.encoder.map(&mut |a| e(g, a)),
            decoder: self.net.decoder.map(&mut |a| d(g, a)),
            projector: self.net.projector.map(&mut |a| p(g, a)),
            discriminator: self.net.discriminator.map(&mut |a| s(g, a)),
        }
    }

    /// Copies gradients from a differentiated graph into the grad slots of
    /// the arrays in `groups`; other arrays get their grads cleared.
    pub fn store_grads(&mut self, g: &Graph, bound: &Cmae<Var>, groups: Groups) -> Result<()> {
        fn copy<A: Tree<DArray>, B: Tree<Var>>(
            g: &Graph,
            arrays: &mut A,
            vars: &B,
            on: bool,
        ) -> Result<()> {
            let mut vs = Vec::new();
            vars.visit("", &mut |_, v| vs.push(*v));
            let mut i = 0;
            let mut res = Ok(());
            arrays.visit_mut("", &mut |_, a| {
                if on {
                    if res.is_ok() {
                        res = g.write_grad(vs[i], a);
                    }
                } else {
                    a.clear_grad();
                }
                i += 1;
            });
            res
        }
        copy(g, &mut self.net.encoder, &bound.encoder, groups.encoder)?;
        copy(g, &mut self.net.decoder, &bound.decoder, groups.decoder)?;
        copy(g, &mut self.net.projector, &bound.projector, groups.projector)?;
        copy(g, &mut self.net.discriminator, &bound.discriminator, groups.discriminator)
    }

    /// Mutable references to every array in `groups`, in stable order.
    pub fn arrays_mut(&mut self, groups: Groups) -> Vec<&mut DArray> {
        let mut out = Vec::new();
        let n = &mut self.net;
        let mut push = |a| out.push(a);
        if groups.encoder {
            n.encoder.visit_mut("", &mut |_, a| push(a));
        }
        if groups.decoder {
            n.decoder.visit_mut("", &mut |_, a| push(a));
        }
        if groups.projector {
            n.projector.visit_mut("", &mut |_, a| push(a));
        }
        if groups.discriminator {
            n.discriminator.visit_mut("", &mut |_, a| push(a));
        }
        out
    }

    /// `(name, array)` pairs for every parameter, in stable order.
    pub fn named_arrays(&self) -> Vec<(String, &DArray)> {
        let mut out = Vec::new();
        self.net.visit("", &mut |name, a| out.push((name.to_string(), a)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Encoder summary of `s` with every unpadded patch visible, either
    /// average-pooled or passed through the projector.
    pub fn embed(&self, s: &PatchSequence, space: DiscInput) -> Result<Vec<f64>> {
        self.embed_visible(s, &MaskPlan::unmasked(s.n_unpadded)?, space)
    }

    /// As [`ModelParams::embed`], from the visible patches of `plan` only.
    pub fn embed_visible(&self, s: &PatchSequence, plan: &MaskPlan, space: DiscInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Groups::NONE);
        let z = embed_var(&mut g, &b, &self.config, s, plan, space)?;
        Ok(g.value(z).to_vec())
    }
}

/// In-graph form of [`ModelParams::embed_visible`]; a `1 × d` row.
pub fn embed_var(
    g: &mut Graph,
    net: &Cmae<Var>,
    cfg: &ModelConfig,
    s: &PatchSequence,
    plan: &MaskPlan,
    space: DiscInput,
) -> Result<Var> {
    let z = encode(g, &net.encoder, cfg, s, plan)?;
    match space {
        DiscInput::Pooled => Ok(pool(g, z)),
        DiscInput::Projected => project(g, &net.projector, z),
    }
}
