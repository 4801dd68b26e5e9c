use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};

/// A named `rows×cols` block inside a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous, non-overlapping blocks covering `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<Block>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its index.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.blocks.push(Block {
            name: name.into(),
            offset: self.len,
            rows,
            cols,
        });
        self.len += rows * cols;
        self.blocks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &Block {
        &self.blocks[index]
    }

    pub fn find(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Flat parameter storage with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(invalid(format!(
                "parameter count {} does not match layout size {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block_values(&self, index: usize) -> &[f64] {
        &self.values[self.layout.block(index).range()]
    }

    pub fn block_values_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layout.block(index).range();
        &mut self.values[range]
    }

    /// Every block as a named matrix.
    pub fn unflatten(&self) -> Vec<(String, Array2<f64>)> {
        self.layout
            .blocks()
            .iter()
            .map(|b| {
                let m = Array2::from_shape_vec((b.rows, b.cols), self.values[b.range()].to_vec()).unwrap();
                (b.name.clone(), m)
            })
            .collect()
    }

    /// Inverse of [`ParameterVector::unflatten`].
    pub fn flatten(blocks: &[(String, Array2<f64>)]) -> Self {
        let mut layout = Layout::new();
        let mut values = Vec::new();
        for (name, m) in blocks {
            layout.push(name.clone(), m.nrows(), m.ncols());
            values.extend(m.iter());
        }
        Self { layout, values }
    }
}

/// Where a model reads its parameters while recording onto a tape: `values`
/// is a (possibly larger) flat vector and the model's blocks start at `base`.
#[derive(Debug, Clone, Copy)]
pub struct ParamSource<'a> {
    pub values: &'a [f64],
    pub base: usize,
    /// Record parameters as differentiable leaves rather than constants.
    pub trainable: bool,
}

impl<'a> ParamSource<'a> {
    pub fn trainable(values: &'a [f64]) -> Self {
        Self {
            values,
            base: 0,
            trainable: true,
        }
    }

    pub fn frozen(values: &'a [f64]) -> Self {
        Self {
            values,
            base: 0,
            trainable: false,
        }
    }

    /// Records `block` on the tape.
    pub fn leaf(&self, tape: &mut Tape, block: &Block) -> Var {
        let start = self.base + block.offset;
        let slice = &self.values[start..start + block.len()];
        if self.trainable {
            tape.param(slice, start, block.rows, block.cols)
        } else {
            tape.constant(Array2::from_shape_vec((block.rows, block.cols), slice.to_vec()).unwrap())
        }
    }
}
