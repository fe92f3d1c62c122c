use crate::error::{Error, Result};
use crate::gradcore::{attention, Graph, Var};
use crate::maskplan::MaskPlan;
use crate::trajio::PatchSequence;

use super::{Block, Decoder, Discriminator, Encoder, Linear, ModelConfig, Norm, Projector};

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

impl Norm<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

/// `x + attn(ln1(x))`, then `+ fc2(gelu(fc1(ln2(x))))`.
pub fn transformer_block(g: &mut Graph, b: &Block<Var>, x: Var, heads: usize) -> Result<Var> {
    let h = b.ln1.forward(g, x)?;
    let q = b.query.forward(g, h)?;
    let k = b.key.forward(g, h)?;
    let v = b.value.forward(g, h)?;
    let a = attention(g, q, k, v, b.out.weight, Some(b.out.bias), heads, None)?;
    let x = g.add(x, a)?;
    let h = b.ln2.forward(g, x)?;
    let h = b.fc1.forward(g, h)?;
    let h = g.gelu(h);
    let h = b.fc2.forward(g, h)?;
    g.add(x, h)
}

fn patch_rows(g: &mut Graph, patches: &PatchSequence, idx: &[usize]) -> Result<Var> {
    let width = patches.patches[0].len();
    let data = idx
        .iter()
        .flat_map(|&i| patches.patches[i].iter().copied())
        .collect();
    g.constant(vec![idx.len(), width], data)
}

/// Embeds the visible patches (linear map plus the positional entry of
/// each patch's original index) and runs the encoder blocks.
///
/// Returns `|visible| × enc_dim`, rows in visible-index order.
pub fn encode(
    g: &mut Graph,
    enc: &Encoder<Var>,
    cfg: &ModelConfig,
    patches: &PatchSequence,
    plan: &MaskPlan,
) -> Result<Var> {
    plan.check(patches.n_unpadded)?;
    let p = patch_rows(g, patches, &plan.visible)?;
    let x = enc.patch_embed.forward(g, p)?;
    let pos = g.gather_rows(enc.pos, &plan.visible)?;
    let mut x = g.add(x, pos)?;
    for b in &enc.blocks {
        x = transformer_block(g, b, x, cfg.enc_heads)?;
    }
    Ok(x)
}

/// Reconstructs the masked patches from the visible embeddings.
///
/// The decoder sees the visible embeddings and one learned mask token per
/// masked index, each with its positional entry; padded indices never
/// enter. Returns `|masked| × patch_len`, rows in masked-index order.
pub fn decode(
    g: &mut Graph,
    dec: &Decoder<Var>,
    cfg: &ModelConfig,
    visible: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    if plan.masked.is_empty() {
        return Err(Error::contract("decode needs at least one masked patch"));
    }
    if g.shape(visible).first() != Some(&plan.visible.len()) {
        return Err(Error::contract(format!(
            "visible embeddings {:?} do not match {} visible patches",
            g.shape(visible),
            plan.visible.len()
        )));
    }
    let y = dec.embed.forward(g, visible)?;
    let tokens = g.gather_rows(dec.mask_token, &vec![0; plan.masked.len()])?;
    let seq = g.concat_rows(&[y, tokens])?;
    let order: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
    let pos = g.gather_rows(dec.pos, &order)?;
    let mut x = g.add(seq, pos)?;
    for b in &dec.blocks {
        x = transformer_block(g, b, x, cfg.dec_heads)?;
    }
    let x = dec.norm.forward(g, x)?;
    let x = dec.head.forward(g, x)?;
    let nv = plan.visible.len();
    g.slice_rows(x, nv, nv + plan.masked.len())
}

/// Average over the rows of the visible embeddings: `1 × enc_dim`.
pub fn pool(g: &mut Graph, visible: Var) -> Var {
    g.mean_rows(visible)
}

/// Average pooling, two-layer ReLU MLP, then L2 normalization.
pub fn project(g: &mut Graph, proj: &Projector<Var>, visible: Var) -> Result<Var> {
    let z = pool(g, visible);
    let h = proj.fc1.forward(g, z)?;
    let h = g.relu(h);
    let h = proj.fc2.forward(g, h)?;
    Ok(g.l2_normalize_rows(h))
}

/// Raw `1 × 2` logits for (same writer, different writer).
///
/// The two embeddings form a 2-token sequence for the discriminator's
/// transformer blocks; the result is flattened into the MLP head.
pub fn discriminator_logits(
    g: &mut Graph,
    disc: &Discriminator<Var>,
    cfg: &ModelConfig,
    z_i: Var,
    z_j: Var,
) -> Result<Var> {
    let d = cfg.disc_dim();
    for z in [z_i, z_j] {
        if g.value(z).len() != d {
            return Err(Error::Shape {
                op: "discriminate",
                left: vec![1, d],
                right: g.shape(z).to_vec(),
            });
        }
    }
    let a = g.reshape(z_i, vec![1, d])?;
    let b = g.reshape(z_j, vec![1, d])?;
    let mut x = g.concat_rows(&[a, b])?;
    for blk in &disc.blocks {
        x = transformer_block(g, blk, x, cfg.disc_heads)?;
    }
    let x = g.reshape(x, vec![1, 2 * d])?;
    let h = disc.fc1.forward(g, x)?;
    let h = g.gelu(h);
    disc.fc2.forward(g, h)
}

/// `softmax(f_dis(concat(z_i, z_j)))` as a `1 × 2` distribution.
pub fn discriminate(
    g: &mut Graph,
    disc: &Discriminator<Var>,
    cfg: &ModelConfig,
    z_i: Var,
    z_j: Var,
) -> Result<Var> {
    let logits = discriminator_logits(g, disc, cfg, z_i, z_j)?;
    g.softmax(logits, 1)
}
