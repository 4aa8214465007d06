//! Generator modules (style encoder, mapping network, content encoder,
//! decoder, combiner, separator) and the multi-branch discriminator.
//!
//! Every module is a function of a [`Graph`] and the shared [`ParamStore`]
//! held by [`Model`]; parameter names start with the module prefix
//! (`SE.`, `M.`, `CE.`, `Dec.`, `Comb.`, `Sep.`, `Dsc.`).

mod config;
mod layers;

use impute_tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::ArchConfig;
use layers::{Builder, Conv, Dense, StyleAffine};

use crate::domain::DomainLabel;
use crate::error::{Error, Result};

/// Epsilon inside instance normalization and AdaIN.
pub const NORM_EPS: f64 = 1e-5;

pub const MODULE_PREFIXES: [&str; 7] = ["SE.", "M.", "CE.", "Dec.", "Comb.", "Sep.", "Dsc."];
pub const GENERATOR_PREFIXES: [&str; 6] = ["SE.", "M.", "CE.", "Dec.", "Comb.", "Sep."];

/// Spatial latent map plus the per-level skip features (finest first).
///
/// Combined content uses the same type; its skips are the averaged skips of
/// the three inputs.
#[derive(Clone, Debug)]
pub struct Content {
    pub map: Var,
    pub skips: Vec<Var>,
}

pub type CombinedContent = Content;

#[derive(Clone, Debug)]
struct StyleEncoder {
    stem: Conv,
    blocks: Vec<Conv>,
    heads: Vec<Dense>,
}

#[derive(Clone, Debug)]
struct MappingNet {
    hidden: Vec<Dense>,
    heads: Vec<Dense>,
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    stem: Conv,
    blocks: Vec<Conv>,
}

#[derive(Clone, Debug)]
struct Decoder {
    levels: Vec<(Conv, StyleAffine)>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Combiner {
    blocks: [Conv; 2],
}

#[derive(Clone, Debug)]
struct Separator {
    embedding: ParamId,
    blocks: [(Conv, StyleAffine); 2],
}

#[derive(Clone, Debug)]
struct Discriminator {
    blocks: Vec<Conv>,
    heads: Vec<Dense>,
}

#[derive(Clone, Debug)]
struct Modules {
    se: StyleEncoder,
    map: MappingNet,
    ce: ContentEncoder,
    dec: Decoder,
    comb: Combiner,
    sep: Separator,
    dsc: Discriminator,
}

/// Parameters and layer layout of the full network.
#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    arch: ArchConfig,
    pub store: ParamStore<T>,
    modules: Modules,
}

impl<T: Element> Model<T> {
    /// He-initialized model; identical `(arch, seed)` give identical weights.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let a = &arch;
        let (l, c, s) = (a.levels, a.content_ch, a.style_dim);

        let se = StyleEncoder {
            stem: b.conv("SE.stem.conv", 1, a.width(0), 1, true)?,
            blocks: (0..l)
                .map(|i| b.conv(&format!("SE.block{i}.conv"), a.width(i), a.width(i + 1), 2, true))
                .collect::<Result<_>>()?,
            heads: domain_heads(&mut b, "SE", c, s)?,
        };
        let mut hidden = Vec::with_capacity(4);
        for i in 0..4 {
            let din = if i == 0 { a.noise_dim } else { a.map_width };
            hidden.push(b.dense(&format!("M.hidden{i}"), din, a.map_width)?);
        }
        let map = MappingNet {
            hidden,
            heads: domain_heads(&mut b, "M", a.map_width, s)?,
        };
        let ce = ContentEncoder {
            stem: b.conv("CE.stem.conv", 1, a.width(0), 1, false)?,
            blocks: (0..l)
                .map(|i| b.conv(&format!("CE.block{i}.conv"), a.width(i), a.width(i + 1), 2, false))
                .collect::<Result<_>>()?,
        };
        let mut levels = Vec::with_capacity(l);
        for j in 0..l {
            let (cin, cout) = (a.width(l - j), a.width(l - j - 1));
            let name = format!("Dec.level{j}");
            levels.push((
                b.conv(&format!("{name}.conv"), cin, cout, 1, false)?,
                StyleAffine::new(&mut b, &name, s, cout)?,
            ));
        }
        let dec = Decoder {
            levels,
            out: b.conv("Dec.out.conv", a.width(0), 1, 1, true)?,
        };
        let comb = Combiner {
            blocks: [
                b.conv("Comb.block0.conv", 3 * c, c, 1, false)?,
                b.conv("Comb.block1.conv", c, c, 1, false)?,
            ],
        };
        let table: Vec<T> = (0..DomainLabel::COUNT * a.domain_emb)
            .map(|_| {
                let z: f64 = StandardNormal.sample(b.rng);
                T::of(z)
            })
            .collect();
        let embedding = b
            .store
            .add("Sep.embedding", Tensor::new(&[DomainLabel::COUNT, a.domain_emb], table)?)?;
        let sep = Separator {
            embedding,
            blocks: [
                (
                    b.conv("Sep.block0.conv", c + a.domain_emb, c, 1, false)?,
                    StyleAffine::new(&mut b, "Sep.block0", a.domain_emb, c)?,
                ),
                (
                    b.conv("Sep.block1.conv", c, c, 1, false)?,
                    StyleAffine::new(&mut b, "Sep.block1", a.domain_emb, c)?,
                ),
            ],
        };
        let mut blocks = Vec::with_capacity(a.dsc_blocks);
        for i in 0..a.dsc_blocks {
            let cin = if i == 0 { 1 } else { a.dsc_width(i - 1) };
            blocks.push(b.conv(&format!("Dsc.block{i}.conv"), cin, a.dsc_width(i), 2, true)?);
        }
        let flat = a.dsc_width(a.dsc_blocks - 1) * a.dsc_size() * a.dsc_size();
        let dsc = Discriminator {
            blocks,
            heads: domain_heads(&mut b, "Dsc", flat, 1)?,
        };
        Ok(Self {
            arch,
            store,
            modules: Modules {
                se,
                map,
                ce,
                dec,
                comb,
                sep,
                dsc,
            },
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Same architecture and weights in another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            store: self.store.cast(),
            modules: self.modules.clone(),
        }
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn param_ids(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    }

    fn check_image(&self, g: &Graph<T>, x: Var, op: &str) -> Result<usize> {
        match *g.shape(x) {
            [n, 1, h, w] if h == self.arch.size && w == self.arch.size => Ok(n),
            ref other => Err(Error::Usage(format!(
                "{op}: expected [N, 1, {0}, {0}] image, got {other:?}",
                self.arch.size
            ))),
        }
    }

    /// Style code `[N, S]` of images `x` under domain `d`.
    pub fn style_encode(&self, g: &mut Graph<T>, x: Var, d: DomainLabel) -> Result<Var> {
        self.check_image(g, x, "style_encode")?;
        let se = &self.modules.se;
        let mut h = se.stem.apply(g, &self.store, x)?;
        h = g.leaky_relu(h)?;
        for block in &se.blocks {
            h = block.apply(g, &self.store, h)?;
            h = g.leaky_relu(h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        se.heads[d.index()].apply(g, &self.store, pooled)
    }

    /// Style code `[N, S]` from noise `z` of shape `[N, Z]`.
    pub fn map_noise(&self, g: &mut Graph<T>, z: Var, d: DomainLabel) -> Result<Var> {
        match *g.shape(z) {
            [_, k] if k == self.arch.noise_dim => {}
            ref other => {
                return Err(Error::Usage(format!(
                    "map_noise: expected [N, {}] noise, got {other:?}",
                    self.arch.noise_dim
                )))
            }
        }
        let m = &self.modules.map;
        let mut h = z;
        for layer in &m.hidden {
            h = layer.apply(g, &self.store, h)?;
            h = g.relu(h)?;
        }
        m.heads[d.index()].apply(g, &self.store, h)
    }

    pub fn content_encode(&self, g: &mut Graph<T>, x: Var) -> Result<Content> {
        Ok(self.content_encode_detailed(g, x)?.0)
    }

    /// Content plus the final instance-normalized map before its activation.
    pub fn content_encode_detailed(&self, g: &mut Graph<T>, x: Var) -> Result<(Content, Var)> {
        self.check_image(g, x, "content_encode")?;
        let ce = &self.modules.ce;
        let h = ce.stem.apply(g, &self.store, x)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        let mut h = g.relu(h)?;
        let mut skips = Vec::with_capacity(ce.blocks.len());
        let mut pre = h;
        for block in &ce.blocks {
            skips.push(h);
            h = block.apply(g, &self.store, h)?;
            pre = g.instance_norm(h, NORM_EPS)?;
            h = g.relu(pre)?;
        }
        Ok((Content { map: h, skips }, pre))
    }

    /// Fuses the contents of the three inputs, given in ascending domain order.
    pub fn combine(&self, g: &mut Graph<T>, contents: [&Content; 3]) -> Result<CombinedContent> {
        let shape = g.shape(contents[0].map).to_vec();
        for c in &contents[1..] {
            if g.shape(c.map) != shape.as_slice() || c.skips.len() != contents[0].skips.len() {
                return Err(Error::Usage("combine: inconsistent content dimensions".into()));
            }
        }
        let mut h = g.concat_channels(&contents.map(|c| c.map))?;
        for conv in &self.modules.comb.blocks {
            h = conv.apply(g, &self.store, h)?;
            h = g.instance_norm(h, NORM_EPS)?;
            h = g.relu(h)?;
        }
        let skips = (0..contents[0].skips.len())
            .map(|l| g.average(&contents.map(|c| c.skips[l])))
            .collect::<impute_tensor::Result<_>>()?;
        Ok(Content { map: h, skips })
    }

    /// Domain-specific content for `d`; skips pass through unchanged.
    pub fn separate(&self, g: &mut Graph<T>, cc: &CombinedContent, d: DomainLabel) -> Result<Content> {
        let sep = &self.modules.sep;
        let (n, _, h, w) = g.value(cc.map).dims4("separate")?;
        let table = g.param(&self.store, sep.embedding)?;
        let e = g.gather_rows(table, &vec![d.index(); n])?;
        let planes = g.broadcast_planes(e, h, w)?;
        let mut x = g.concat_channels(&[cc.map, planes])?;
        for (conv, affine) in &sep.blocks {
            x = conv.apply(g, &self.store, x)?;
            x = affine.adain(g, &self.store, x, e)?;
            x = g.relu(x)?;
        }
        Ok(Content {
            map: x,
            skips: cc.skips.clone(),
        })
    }

    /// Image `[N, 1, size, size]` in `(0, 1)` from content and style `[N, S]`.
    pub fn decode(&self, g: &mut Graph<T>, c: &Content, s: Var) -> Result<Var> {
        match *g.shape(s) {
            [_, k] if k == self.arch.style_dim => {}
            ref other => {
                return Err(Error::Usage(format!(
                    "decode: expected [N, {}] style, got {other:?}",
                    self.arch.style_dim
                )))
            }
        }
        let dec = &self.modules.dec;
        if c.skips.len() != dec.levels.len() {
            return Err(Error::Usage(format!(
                "decode: content has {} skips, expected {}",
                c.skips.len(),
                dec.levels.len()
            )));
        }
        let mut h = c.map;
        for (j, (conv, affine)) in dec.levels.iter().enumerate() {
            h = g.upsample2x(h)?;
            h = conv.apply(g, &self.store, h)?;
            let detail = g.highpass3x3(c.skips[c.skips.len() - 1 - j])?;
            h = g.add(h, detail)?;
            h = affine.adain(g, &self.store, h, s)?;
            h = g.relu(h)?;
        }
        let out = dec.out.apply(g, &self.store, h)?;
        Ok(g.sigmoid(out)?)
    }

    /// Probability `[N, 1]` that `x` is a real image of domain `d`.
    pub fn discriminate(&self, g: &mut Graph<T>, x: Var, d: DomainLabel) -> Result<Var> {
        let n = self.check_image(g, x, "discriminate")?;
        let dsc = &self.modules.dsc;
        let mut h = x;
        for block in &dsc.blocks {
            h = block.apply(g, &self.store, h)?;
            h = g.leaky_relu(h)?;
        }
        let flat = g.value(h).numel() / n;
        let h = g.reshape(h, &[n, flat])?;
        let logit = dsc.heads[d.index()].apply(g, &self.store, h)?;
        Ok(g.sigmoid(logit)?)
    }
}

fn domain_heads<T: Element>(b: &mut Builder<'_, T>, module: &str, din: usize, dout: usize) -> Result<Vec<Dense>> {
    DomainLabel::ALL
        .iter()
        .map(|d| b.dense(&format!("{module}.head{}", d.index()), din, dout))
        .collect()
}

impl Model<f32> {
    /// Parameter values as checkpoint entries, in creation order.
    pub fn param_entries(&self) -> Vec<(String, Tensor<f32>)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites every parameter from `lookup`, which must provide all of
    /// them with matching shapes.
    pub fn load_params(&mut self, lookup: impl Fn(&str) -> Option<Tensor<f32>>) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let p = self.store.get_mut(id);
            let t = lookup(&p.name).ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}
