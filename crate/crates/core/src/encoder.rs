//! Hierarchical transformer encoder.
//!
//! The encoder runs a stack of hierarchies over a token sequence. Each
//! hierarchy is a few transformer blocks at one temporal scale; between
//! hierarchies a merge layer concatenates adjacent token pairs and projects
//! `2d → d`, halving the token count. The per-hierarchy outputs are taken
//! *before* the merge, so callers see one feature sequence per scale:
//! `[n, d]`, `[n/2, d]`, … down the stack.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Linear, TransformerBlock};
use crate::num::Element;
use crate::params::{ParamKind, Params, Pass};
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

/// Encoder geometry and capacity. `layers` gives blocks per hierarchy; its
/// length is the number of hierarchies.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: Vec<usize>,
    pub d_ff: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("encoder needs at least one hierarchy"));
        }
        if self.layers.contains(&0) {
            return Err(Error::config(format!(
                "every hierarchy needs at least one block, got {:?}",
                self.layers
            )));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} must divide evenly into {} heads",
                self.d, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::config("feed-forward width must be positive"));
        }
        Ok(())
    }
}

/// Pairwise token merge: reshape `[b, n, d] → [b, n/2, 2d]` (adjacent rows
/// are contiguous in row-major order) and apply an affine map `2d → d`.
pub struct MergeLayer<T> {
    pub name: String,
    pub lin: Linear<T>,
    pub d: usize,
}

impl<T: Element> MergeLayer<T> {
    pub fn init(name: impl Into<String>, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let name = name.into();
        MergeLayer {
            lin: Linear::init(format!("{name}.lin"), 2 * d, d, rng),
            name,
            d,
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let shape = pass.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::contract(format!(
                "merge expects [batch, tokens, {}], got {:?}",
                self.d, shape
            )));
        }
        if !shape[1].is_multiple_of(2) {
            return Err(Error::contract(format!(
                "merge needs an even token count, got {}",
                shape[1]
            )));
        }
        let paired = pass
            .tape
            .reshape(x, vec![shape[0], shape[1] / 2, 2 * self.d])?;
        self.lin.forward(pass, paired)
    }
}

impl<T: Element> Params<T> for MergeLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.lin.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.lin.visit_mut(f);
    }
}

struct Hierarchy<T> {
    blocks: Vec<TransformerBlock<T>>,
    merge: Option<MergeLayer<T>>,
}

/// The full multi-hierarchy encoder.
pub struct Encoder<T> {
    pub name: String,
    pub cfg: EncoderConfig,
    hierarchies: Vec<Hierarchy<T>>,
}

impl<T: Element> Encoder<T> {
    pub fn init(name: impl Into<String>, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let levels = cfg.layers.len();
        let mut hierarchies = Vec::with_capacity(levels);
        for (li, &nblocks) in cfg.layers.iter().enumerate() {
            let mut blocks = Vec::with_capacity(nblocks);
            for bi in 0..nblocks {
                blocks.push(TransformerBlock::init(
                    format!("{name}.h{li}.b{bi}"),
                    cfg.d,
                    cfg.heads,
                    cfg.d_ff,
                    cfg.dropout,
                    rng,
                )?);
            }
            let merge = if li + 1 < levels {
                Some(MergeLayer::init(format!("{name}.h{li}.merge"), cfg.d, rng))
            } else {
                None
            };
            hierarchies.push(Hierarchy { blocks, merge });
        }
        Ok(Encoder {
            name,
            cfg: cfg.clone(),
            hierarchies,
        })
    }

    pub fn levels(&self) -> usize {
        self.hierarchies.len()
    }

    /// Run the stack. Returns one pre-merge feature sequence per hierarchy;
    /// the input token count must be divisible by `2^(levels-1)`.
    pub fn encode(&self, pass: &mut Pass<'_, T>, z0: Var, mode: Mode) -> Result<Vec<Var>> {
        let shape = pass.tape.shape(z0).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.d {
            return Err(Error::contract(format!(
                "encoder expects [batch, tokens, {}], got {:?}",
                self.cfg.d, shape
            )));
        }
        let need = 1usize << (self.levels() - 1);
        if !shape[1].is_multiple_of(need) {
            return Err(Error::contract(format!(
                "token count {} is not divisible by 2^(levels-1) = {need}",
                shape[1]
            )));
        }
        let mut z = z0;
        let mut features = Vec::with_capacity(self.levels());
        for h in &self.hierarchies {
            for block in &h.blocks {
                z = block.forward(pass, z, mode)?;
            }
            features.push(z);
            if let Some(merge) = &h.merge {
                z = merge.forward(pass, z)?;
            }
        }
        Ok(features)
    }
}

impl<T: Element> Params<T> for Encoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        for h in &self.hierarchies {
            for b in &h.blocks {
                b.visit(f);
            }
            if let Some(m) = &h.merge {
                m.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for h in &mut self.hierarchies {
            for b in &mut h.blocks {
                b.visit_mut(f);
            }
            if let Some(m) = &mut h.merge {
                m.visit_mut(f);
            }
        }
    }
}
