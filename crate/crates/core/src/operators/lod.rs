//! Level-of-detail pyramids.

use std::sync::Arc;

use super::{downsample_mean, procedural, separable_conv, Generator, BINOMIAL};
use crate::chunk::{EmbeddingData, TensorMetaData};
use crate::error::{Error, Result};
use crate::graph::Node;

/// Tensors of decreasing resolution covering the same physical extent.
/// Level 0 is full resolution; every level carries its embedding.
#[derive(Clone, Debug)]
pub struct LodPyramid {
    levels: Vec<Node>,
    const_tables: Vec<Option<Node>>,
}

impl LodPyramid {
    /// Checks the pyramid invariants: equal dimensionality, non-increasing
    /// sizes, non-decreasing spacing and physical sizes that agree within one
    /// element spacing of the coarser level.
    pub fn new(levels: Vec<Node>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::invalid("a pyramid needs at least one level"))?;
        let d = first.metadata().num_dims();
        let mut levels: Vec<Node> = levels
            .iter()
            .map(|n| n.with_embedding(n.embedding_or_unit()))
            .collect();
        for w in levels.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if b.metadata().num_dims() != d {
                return Err(Error::invalid("pyramid levels differ in dimensionality"));
            }
            let (ea, eb) = (a.embedding().unwrap(), b.embedding().unwrap());
            let pa = ea.physical_size(a.metadata());
            let pb = eb.physical_size(b.metadata());
            for i in 0..d {
                if b.metadata().size()[i] > a.metadata().size()[i] || eb.spacing[i] < ea.spacing[i] {
                    return Err(Error::invalid(
                        "pyramid levels must not grow in size or shrink in spacing",
                    ));
                }
                if (pa[i] - pb[i]).abs() > eb.spacing[i] + 1e-9 * pa[i] {
                    return Err(Error::invalid(format!(
                        "physical size of pyramid levels differs in dimension {i}: {} vs {}",
                        pa[i], pb[i]
                    )));
                }
            }
        }
        levels.shrink_to_fit();
        let const_tables = vec![None; levels.len()];
        Ok(LodPyramid { levels, const_tables })
    }

    /// Attaches precomputed const chunk tables, one per level, used instead of
    /// building them on demand.
    pub fn with_const_tables(mut self, tables: Vec<Option<Node>>) -> Result<Self> {
        if tables.len() != self.levels.len() {
            return Err(Error::invalid(format!(
                "{} const tables for {} levels",
                tables.len(),
                self.levels.len()
            )));
        }
        for (level, table) in self.levels.iter().zip(&tables) {
            if let Some(t) = table {
                let md = level.metadata();
                if t.metadata().size() != md.chunk_grid_dims() || t.metadata().element_type() != md.element_type() {
                    return Err(Error::ShapeMismatch(format!(
                        "const table of size {:?} does not match chunk grid {:?}",
                        t.metadata().size(),
                        md.chunk_grid_dims()
                    )));
                }
            }
        }
        self.const_tables = tables;
        Ok(self)
    }

    pub fn const_table(&self, level: usize) -> Option<&Node> {
        self.const_tables[level].as_ref()
    }

    pub fn levels(&self) -> &[Node] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Node {
        &self.levels[i]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &Node {
        &self.levels[0]
    }

    pub fn embedding(&self, level: usize) -> &EmbeddingData {
        self.levels[level].embedding().expect("pyramid levels carry embeddings")
    }
}

/// Dimensions that are still larger than one chunk.
fn coarsen_dims(md: &TensorMetaData) -> Vec<bool> {
    md.size().iter().zip(md.chunk_size()).map(|(s, c)| s > c).collect()
}

/// Builds a pyramid by smoothing with the binomial kernel and halving every
/// dimension that still spans more than one chunk, until none does.
pub fn build_lod(input: &Node, embedding: Option<EmbeddingData>) -> Result<LodPyramid> {
    let first = match embedding {
        Some(e) => {
            e.check_against(input.metadata())?;
            input.with_embedding(e)
        }
        None => input.with_embedding(input.embedding_or_unit()),
    };
    let mut levels = vec![first];
    while let Some(next) = next_level(levels.last().unwrap())? {
        levels.push(next);
    }
    LodPyramid::new(levels)
}

/// The level following `node` under the [`build_lod`] rule, or `None` once
/// every dimension fits in one chunk.
pub fn next_level(node: &Node) -> Result<Option<Node>> {
    let dims = coarsen_dims(node.metadata());
    if !dims.iter().any(|d| *d) {
        return Ok(None);
    }
    let kernels: Vec<Vec<f64>> = dims
        .iter()
        .map(|d| if *d { BINOMIAL.to_vec() } else { vec![1.0] })
        .collect();
    let smooth = separable_conv(node, &kernels)?;
    Ok(Some(downsample_mean(&smooth, &dims)?))
}

/// A pyramid with the input as its only level.
pub fn single_level_lod(input: &Node) -> LodPyramid {
    LodPyramid {
        levels: vec![input.with_embedding(input.embedding_or_unit())],
        const_tables: vec![None],
    }
}

impl Node {
    pub fn single_level_lod(&self) -> LodPyramid {
        single_level_lod(self)
    }
}

/// A pyramid whose every level is synthesized directly by `generator`, so
/// coarse levels never touch finer ones. Sizes follow the [`build_lod`] rule.
pub fn procedural_lod(
    generator: Arc<dyn Generator>,
    md: TensorMetaData,
    embedding: Option<EmbeddingData>,
) -> Result<LodPyramid> {
    let mut e = embedding.unwrap_or_else(|| EmbeddingData::unit(md.num_dims()));
    e.check_against(&md)?;
    let mut md = md;
    let mut levels = vec![procedural(generator.clone(), md.clone(), Some(e.clone()))?];
    loop {
        let dims = coarsen_dims(&md);
        if !dims.iter().any(|d| *d) {
            break;
        }
        let size = md
            .size()
            .iter()
            .zip(&dims)
            .map(|(s, d)| if *d { s.div_ceil(2) } else { *s })
            .collect();
        md = TensorMetaData::new(size, md.chunk_size().to_vec(), md.element_type())?;
        e = EmbeddingData::new(
            e.spacing
                .iter()
                .zip(&dims)
                .map(|(s, d)| if *d { s * 2.0 } else { *s })
                .collect(),
        )?;
        levels.push(procedural(generator.clone(), md.clone(), Some(e.clone()))?);
    }
    LodPyramid::new(levels)
}
