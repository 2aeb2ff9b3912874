//! Generator, PatchGAN discriminator, projection heads and patch sampling.
//!
//! Generator: two stride-2 3×3 convolutions, nine residual blocks, two
//! stride-2 3×3 transposed convolutions and a `tanh` output. Discriminator:
//! five 4×4 convolutions with strides (2, 2, 2, 1, 1) emitting a logit map.

use noisim_diffcore::{Graph, Mode, NodeId, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamSet};

pub const RES_BLOCKS: usize = 9;
pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

/// Layers whose activations feed the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureLayer {
    Input,
    Enc1,
    Enc2,
    Res3,
    Res6,
}

pub const FEATURE_LAYERS: [FeatureLayer; 5] = [
    FeatureLayer::Input,
    FeatureLayer::Enc1,
    FeatureLayer::Enc2,
    FeatureLayer::Res3,
    FeatureLayer::Res6,
];

/// Channel widths and a few fixed hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchPlan {
    /// Encoder widths `[c1, c2]`; the residual trunk runs at `c2`.
    pub gen_channels: [usize; 2],
    /// Widths of discriminator layers 1-4; layer 5 emits one channel.
    pub disc_channels: [usize; 4],
    pub head_units: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for ArchPlan {
    fn default() -> Self {
        Self {
            gen_channels: [64, 128],
            disc_channels: [64, 128, 256, 512],
            head_units: 256,
            dropout: 0.5,
            leaky_slope: 0.2,
        }
    }
}

impl ArchPlan {
    pub fn tiny() -> Self {
        Self {
            gen_channels: [8, 16],
            disc_channels: [8, 16, 32, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_channels.contains(&0) || self.disc_channels.contains(&0) || self.head_units == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Channel count of each contrastive feature layer.
    pub fn feature_channels(&self) -> [usize; 5] {
        let [c1, c2] = self.gen_channels;
        [1, c1, c2, c2, c2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NormSlot {
    gain: usize,
    shift: usize,
}

fn add_conv<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, dims: [usize; 4], bias: usize, rng: &mut R) -> ConvSlot {
    ConvSlot {
        weight: p.push(format!("{name}.weight"), normal_tensor(&dims, INIT_STD, rng)),
        bias: p.push(format!("{name}.bias"), Tensor::zeros(&[bias])),
    }
}

fn add_norm(p: &mut ParamSet, name: &str, channels: usize) -> NormSlot {
    NormSlot {
        gain: p.push(format!("{name}.gain"), Tensor::full(&[channels], 1.0)),
        shift: p.push(format!("{name}.shift"), Tensor::zeros(&[channels])),
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlockSlots {
    conv1: ConvSlot,
    norm1: NormSlot,
    conv2: ConvSlot,
    norm2: NormSlot,
}

/// Activations captured at the five contrastive layers, in
/// [`FEATURE_LAYERS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures(pub [NodeId; 5]);

pub struct GeneratorOutput {
    pub output: NodeId,
    pub features: LayerFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub plan: ArchPlan,
    pub params: ParamSet,
    enc1: ConvSlot,
    enc1_norm: NormSlot,
    enc2: ConvSlot,
    enc2_norm: NormSlot,
    blocks: Vec<ResBlockSlots>,
    dec1: ConvSlot,
    dec1_norm: NormSlot,
    dec2: ConvSlot,
}

/// Output padding that makes a stride-2, pad-1, 3×3 transposed convolution
/// land exactly on `target`.
fn inversion_padding(input: usize, target: usize) -> Result<usize> {
    let base = 2 * input - 1;
    match target.checked_sub(base) {
        Some(p) if p < 2 => Ok(p),
        _ => Err(Error::Diff(noisim_diffcore::Error::Shape {
            op: "generator",
            detail: format!("cannot upsample {input} back to {target}"),
        })),
    }
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(plan: &ArchPlan, rng: &mut R) -> Self {
        let [c1, c2] = plan.gen_channels;
        let mut p = ParamSet::new();
        let enc1 = add_conv(&mut p, "enc1", [c1, 1, 3, 3], c1, rng);
        let enc1_norm = add_norm(&mut p, "enc1.norm", c1);
        let enc2 = add_conv(&mut p, "enc2", [c2, c1, 3, 3], c2, rng);
        let enc2_norm = add_norm(&mut p, "enc2.norm", c2);
        let blocks = (0..RES_BLOCKS)
            .map(|b| ResBlockSlots {
                conv1: add_conv(&mut p, &format!("rb{b}.conv1"), [c2, c2, 3, 3], c2, rng),
                norm1: add_norm(&mut p, &format!("rb{b}.norm1"), c2),
                conv2: add_conv(&mut p, &format!("rb{b}.conv2"), [c2, c2, 3, 3], c2, rng),
                norm2: add_norm(&mut p, &format!("rb{b}.norm2"), c2),
            })
            .collect();
        // transposed kernels are [cin, cout, kh, kw]
        let dec1 = add_conv(&mut p, "dec1", [c2, c1, 3, 3], c1, rng);
        let dec1_norm = add_norm(&mut p, "dec1.norm", c1);
        let dec2 = add_conv(&mut p, "dec2", [c1, 1, 3, 3], 1, rng);
        Self {
            plan: plan.clone(),
            params: p,
            enc1,
            enc1_norm,
            enc2,
            enc2_norm,
            blocks,
            dec1,
            dec1_norm,
            dec2,
        }
    }

    fn conv_norm_relu(&self, g: &mut Graph, b: &[NodeId], x: NodeId, conv: ConvSlot, norm: NormSlot) -> Result<NodeId> {
        let h = g.conv2d(x, b[conv.weight], b[conv.bias], (2, 2), (1, 1))?;
        let h = g.instance_norm(h, b[norm.gain], b[norm.shift], NORM_EPS)?;
        Ok(g.relu(h))
    }

    fn res_block<R: Rng + ?Sized>(&self, g: &mut Graph, b: &[NodeId], x: NodeId, s: &ResBlockSlots, mode: Mode, rng: &mut R) -> Result<NodeId> {
        let h = g.conv2d(x, b[s.conv1.weight], b[s.conv1.bias], (1, 1), (1, 1))?;
        let h = g.instance_norm(h, b[s.norm1.gain], b[s.norm1.shift], NORM_EPS)?;
        let h = g.relu(h);
        let h = g.conv2d(h, b[s.conv2.weight], b[s.conv2.bias], (1, 1), (1, 1))?;
        let h = g.instance_norm(h, b[s.norm2.gain], b[s.norm2.shift], NORM_EPS)?;
        let h = g.dropout(h, self.plan.dropout, mode, rng)?;
        Ok(g.add(x, h)?)
    }

    fn check_input(&self, g: &Graph, x: NodeId) -> Result<()> {
        let d = g.dims(x);
        if d.len() != 4 || d[1] != 1 || d[2] < 5 || d[3] < 5 {
            return Err(Error::Diff(noisim_diffcore::Error::Shape {
                op: "generator",
                detail: format!("expected [n, 1, h, w] input with h, w >= 5, got {:?}", d),
            }));
        }
        Ok(())
    }

    /// Runs the encoder and trunk only as deep as the last feature layer.
    pub fn encode_features<R: Rng + ?Sized>(&self, g: &mut Graph, b: &[NodeId], x: NodeId, mode: Mode, rng: &mut R) -> Result<LayerFeatures> {
        self.check_input(g, x)?;
        let e1 = self.conv_norm_relu(g, b, x, self.enc1, self.enc1_norm)?;
        let e2 = self.conv_norm_relu(g, b, e1, self.enc2, self.enc2_norm)?;
        let mut h = e2;
        let mut res = [e2; 2];
        for (i, s) in self.blocks.iter().enumerate().take(6) {
            h = self.res_block(g, b, h, s, mode, rng)?;
            match i {
                2 => res[0] = h,
                5 => res[1] = h,
                _ => {}
            }
        }
        Ok(LayerFeatures([x, e1, e2, res[0], res[1]]))
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, b: &[NodeId], x: NodeId, mode: Mode, rng: &mut R) -> Result<GeneratorOutput> {
        self.check_input(g, x)?;
        let in_size = (g.dims(x)[2], g.dims(x)[3]);
        let e1 = self.conv_norm_relu(g, b, x, self.enc1, self.enc1_norm)?;
        let mid_size = (g.dims(e1)[2], g.dims(e1)[3]);
        let e2 = self.conv_norm_relu(g, b, e1, self.enc2, self.enc2_norm)?;
        let deep_size = (g.dims(e2)[2], g.dims(e2)[3]);
        let mut h = e2;
        let mut res = [e2; 2];
        for (i, s) in self.blocks.iter().enumerate() {
            h = self.res_block(g, b, h, s, mode, rng)?;
            match i {
                2 => res[0] = h,
                5 => res[1] = h,
                _ => {}
            }
        }
        let op1 = (inversion_padding(deep_size.0, mid_size.0)?, inversion_padding(deep_size.1, mid_size.1)?);
        let u = g.conv_transpose2d(h, b[self.dec1.weight], b[self.dec1.bias], (2, 2), (1, 1), op1)?;
        let u = g.instance_norm(u, b[self.dec1_norm.gain], b[self.dec1_norm.shift], NORM_EPS)?;
        let u = g.relu(u);
        let op2 = (inversion_padding(mid_size.0, in_size.0)?, inversion_padding(mid_size.1, in_size.1)?);
        let u = g.conv_transpose2d(u, b[self.dec2.weight], b[self.dec2.bias], (2, 2), (1, 1), op2)?;
        let output = g.tanh(u);
        Ok(GeneratorOutput {
            output,
            features: LayerFeatures([x, e1, e2, res[0], res[1]]),
        })
    }

    /// Zero both convolutions of residual block `index`.
    pub fn zero_block(&mut self, index: usize) {
        let s = self.blocks[index].clone();
        for slot in [s.conv1.weight, s.conv1.bias, s.conv2.weight, s.conv2.bias] {
            self.params.get_mut(slot).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub plan: ArchPlan,
    pub params: ParamSet,
    convs: [ConvSlot; 5],
    norms: [NormSlot; 3],
}

pub const DISC_KERNEL: usize = 4;
pub const DISC_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(plan: &ArchPlan, rng: &mut R) -> Self {
        let d = plan.disc_channels;
        let widths = [1, d[0], d[1], d[2], d[3], 1];
        let mut p = ParamSet::new();
        let convs: Vec<ConvSlot> = (0..5)
            .map(|l| add_conv(&mut p, &format!("conv{}", l + 1), [widths[l + 1], widths[l], DISC_KERNEL, DISC_KERNEL], widths[l + 1], rng))
            .collect();
        let norms: Vec<NormSlot> = (1..4).map(|l| add_norm(&mut p, &format!("conv{}.norm", l + 1), widths[l + 1])).collect();
        Self {
            plan: plan.clone(),
            params: p,
            convs: convs.try_into().unwrap(),
            norms: norms.try_into().unwrap(),
        }
    }

    /// Patch logit map, `[n, 1, 14, 14]` for a 129×128 input.
    pub fn forward(&self, g: &mut Graph, b: &[NodeId], x: NodeId) -> Result<NodeId> {
        let d = g.dims(x);
        if d.len() != 4 || d[1] != 1 {
            return Err(Error::Diff(noisim_diffcore::Error::Shape {
                op: "discriminator",
                detail: format!("expected [n, 1, h, w] input, got {:?}", d),
            }));
        }
        let mut h = x;
        for (l, conv) in self.convs.iter().enumerate() {
            let s = DISC_STRIDES[l];
            h = g.conv2d(h, b[conv.weight], b[conv.bias], (s, s), (1, 1))?;
            if (1..4).contains(&l) {
                let n = self.norms[l - 1];
                h = g.instance_norm(h, b[n.gain], b[n.shift], NORM_EPS)?;
            }
            if l < 4 {
                h = g.leaky_relu(h, self.plan.leaky_slope);
            }
        }
        Ok(h)
    }

    /// Zero the last layer, making the logits independent of the input.
    pub fn zero_output_layer(&mut self) {
        let c = self.convs[4];
        self.params.get_mut(c.weight).data_mut().fill(0.0);
        self.params.get_mut(c.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeadSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// One two-layer MLP per feature layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub plan: ArchPlan,
    pub params: ParamSet,
    slots: [HeadSlots; 5],
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(plan: &ArchPlan, rng: &mut R) -> Self {
        let u = plan.head_units;
        let mut p = ParamSet::new();
        let slots: Vec<HeadSlots> = plan
            .feature_channels()
            .iter()
            .enumerate()
            .map(|(l, &c)| HeadSlots {
                w1: p.push(format!("head{l}.fc1.weight"), normal_tensor(&[u, c], INIT_STD, rng)),
                b1: p.push(format!("head{l}.fc1.bias"), Tensor::zeros(&[u])),
                w2: p.push(format!("head{l}.fc2.weight"), normal_tensor(&[u, u], INIT_STD, rng)),
                b2: p.push(format!("head{l}.fc2.bias"), Tensor::zeros(&[u])),
            })
            .collect();
        Self {
            plan: plan.clone(),
            params: p,
            slots: slots.try_into().unwrap(),
        }
    }

    /// MLP of layer `layer` followed by row-wise L2 normalization.
    pub fn embed(&self, g: &mut Graph, b: &[NodeId], layer: usize, rows: NodeId) -> Result<NodeId> {
        let s = self.slots[layer];
        let h = g.linear(rows, b[s.w1], b[s.b1])?;
        let h = g.relu(h);
        let h = g.linear(h, b[s.w2], b[s.b2])?;
        Ok(g.l2_normalize(h, L2_EPS)?)
    }
}

/// Generator, discriminator and heads, all initialized from one seed.
pub fn init_params(plan: &ArchPlan, seed: u64) -> Result<(Generator, Discriminator, Heads)> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Generator::new(plan, &mut rng);
    let d = Discriminator::new(plan, &mut rng);
    let h = Heads::new(plan, &mut rng);
    Ok((g, d, h))
}

/// Query and key embeddings of one example at one layer. Row `i` of `keys`
/// is the positive for row `i` of `queries`; the other rows are negatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchPair {
    pub queries: NodeId,
    pub keys: NodeId,
}

/// `layers[l][n]`: pairs for feature layer `l`, example `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub layers: Vec<Vec<PatchPair>>,
    /// Sampled flat locations per layer.
    pub locations: Vec<Vec<usize>>,
}

/// Sample `per_layer` distinct locations per layer (shared by query and key
/// maps and across the batch) and embed the channel vectors found there.
pub fn sample_patches<R: Rng + ?Sized>(
    g: &mut Graph,
    query: &LayerFeatures,
    key: &LayerFeatures,
    heads: &Heads,
    head_ids: &[NodeId],
    per_layer: usize,
    rng: &mut R,
) -> Result<PatchEmbedding> {
    let mut layers = Vec::with_capacity(5);
    let mut locations = Vec::with_capacity(5);
    for l in 0..5 {
        let (q, k) = (query.0[l], key.0[l]);
        if g.dims(q) != g.dims(k) {
            return Err(Error::Sampling(format!(
                "layer {l}: query map {:?} and key map {:?} differ",
                g.dims(q),
                g.dims(k)
            )));
        }
        let d = g.dims(q).to_vec();
        let (n, plane) = (d[0], d[2] * d[3]);
        if per_layer > plane || per_layer == 0 {
            return Err(Error::Sampling(format!(
                "layer {l}: {per_layer} patches requested from {plane} locations"
            )));
        }
        let locs = index::sample(rng, plane, per_layer).into_vec();
        let flat: Vec<(usize, usize)> = (0..n).flat_map(|s| locs.iter().map(move |&p| (s, p))).collect();
        let qrows = g.gather_locations(q, &flat)?;
        let krows = g.gather_locations(k, &flat)?;
        let qe = heads.embed(g, head_ids, l, qrows)?;
        let ke = heads.embed(g, head_ids, l, krows)?;
        let pairs = if n == 1 {
            vec![PatchPair { queries: qe, keys: ke }]
        } else {
            (0..n)
                .map(|s| {
                    let rows: Vec<usize> = (s * per_layer..(s + 1) * per_layer).collect();
                    Ok(PatchPair {
                        queries: g.gather_rows(qe, &rows)?,
                        keys: g.gather_rows(ke, &rows)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        layers.push(pairs);
        locations.push(locs);
    }
    Ok(PatchEmbedding { layers, locations })
}
