use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    /// Next-token prediction from a fixed window of previous tokens.
    LmFixedContext { context_window: usize, vocab_size: usize, embedding_dim: usize },
}

/// Stable 64-bit architecture hash (FNV-1a over a canonical encoding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fingerprint(pub u64);

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Where one dense layer lives inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlice {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

/// Network shape. Construction validates the dimensions and fixes the
/// parameter layout.
#[derive(Debug, Clone)]
pub struct Architecture {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    /// Number of classes `K` (the vocabulary size for the LM task).
    output_dim: usize,
    activation: Activation,
    task: Task,
    layout: Layout,
}

#[derive(Debug, Clone, Default)]
struct Layout {
    embedding: Option<Range<usize>>,
    layers: Vec<LayerSlice>,
    total: usize,
}

impl PartialEq for Architecture {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.hidden_dims == other.hidden_dims
            && self.output_dim == other.output_dim
            && self.activation == other.activation
            && self.task == other.task
    }
}

impl Eq for Architecture {}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        task: Task,
    ) -> Result<Self> {
        let mut arch =
            Self { input_dim, hidden_dims, output_dim, activation, task, layout: Layout::default() };
        arch.validate()?;
        arch.layout = arch.compute_layout();
        Ok(arch)
    }

    pub fn classifier(input_dim: usize, hidden_dims: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::new(input_dim, hidden_dims, n_classes, Activation::Relu, Task::Classification)
    }

    pub fn language_model(
        context_window: usize,
        vocab_size: usize,
        embedding_dim: usize,
        hidden_dims: Vec<usize>,
    ) -> Result<Self> {
        Self::new(
            context_window * embedding_dim,
            hidden_dims,
            vocab_size,
            Activation::Relu,
            Task::LmFixedContext { context_window, vocab_size, embedding_dim },
        )
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArchitecture(msg));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input and output dimensions must be at least 1".into());
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return bad(format!("hidden layer {i} has zero width"));
        }
        if let Task::LmFixedContext { context_window, vocab_size, embedding_dim } = self.task {
            if context_window == 0 || vocab_size == 0 || embedding_dim == 0 {
                return bad("lm dimensions must be at least 1".into());
            }
            if self.input_dim != context_window * embedding_dim {
                return bad(format!(
                    "lm input_dim {} != context_window {context_window} x embedding_dim {embedding_dim}",
                    self.input_dim
                ));
            }
            if self.output_dim != vocab_size {
                return bad(format!("lm output_dim {} != vocab_size {vocab_size}", self.output_dim));
            }
        }
        Ok(())
    }

    fn compute_layout(&self) -> Layout {
        let mut offset = 0;
        let embedding = match self.task {
            Task::LmFixedContext { vocab_size, embedding_dim, .. } => {
                offset = vocab_size * embedding_dim;
                Some(0..offset)
            }
            Task::Classification => None,
        };
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let weights = offset..offset + in_dim * out_dim;
                let biases = weights.end..weights.end + out_dim;
                offset = biases.end;
                LayerSlice { in_dim, out_dim, weights, biases }
            })
            .collect();
        Layout { embedding, layers, total: offset }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn layers(&self) -> &[LayerSlice] {
        &self.layout.layers
    }

    pub fn embedding(&self) -> Option<Range<usize>> {
        self.layout.embedding.clone()
    }

    pub fn n_classes(&self) -> usize {
        self.output_dim
    }

    pub fn vocab_size(&self) -> Option<usize> {
        match self.task {
            Task::LmFixedContext { vocab_size, .. } => Some(vocab_size),
            Task::Classification => None,
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut words: Vec<u64> = vec![
            self.input_dim as u64,
            self.hidden_dims.len() as u64,
        ];
        words.extend(self.hidden_dims.iter().map(|&h| h as u64));
        words.push(self.output_dim as u64);
        words.push(match self.activation {
            Activation::Relu => 1,
        });
        match self.task {
            Task::Classification => words.extend([1, 0, 0, 0]),
            Task::LmFixedContext { context_window, vocab_size, embedding_dim } => {
                words.extend([2, context_window as u64, vocab_size as u64, embedding_dim as u64])
            }
        }
        let mut h = OFFSET;
        for byte in b"codl-arch".iter().copied().chain(words.iter().flat_map(|w| w.to_le_bytes())) {
            h ^= u64::from(byte);
            h = h.wrapping_mul(PRIME);
        }
        Fingerprint(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims() {
        assert!(Architecture::classifier(0, vec![], 2).is_err());
        assert!(Architecture::classifier(2, vec![3, 0], 2).is_err());
        assert!(Architecture::classifier(2, vec![], 0).is_err());
        assert!(Architecture::language_model(0, 5, 3, vec![]).is_err());
    }

    #[test]
    fn lm_input_dim_must_match_window() {
        let task = Task::LmFixedContext { context_window: 4, vocab_size: 10, embedding_dim: 3 };
        assert!(Architecture::new(11, vec![], 10, Activation::Relu, task).is_err());
        assert!(Architecture::new(12, vec![], 10, Activation::Relu, task).is_ok());
    }

    #[test]
    fn layout_is_contiguous() {
        let a = Architecture::language_model(2, 5, 3, vec![4]).unwrap();
        assert_eq!(a.embedding(), Some(0..15));
        let l = a.layers();
        assert_eq!(l[0].weights, 15..15 + 24);
        assert_eq!(l[0].biases, 39..43);
        assert_eq!(l[1].weights, 43..63);
        assert_eq!(l[1].biases, 63..68);
        assert_eq!(a.param_count(), 68);
    }

    #[test]
    fn fingerprint_distinguishes_shapes() {
        let a = Architecture::classifier(4, vec![8], 3).unwrap();
        let b = Architecture::classifier(4, vec![8], 3).unwrap();
        let c = Architecture::classifier(4, vec![9], 3).unwrap();
        let d = Architecture::classifier(4, vec![8, 1], 3).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_ne!(a.fingerprint(), d.fingerprint());
    }
}
