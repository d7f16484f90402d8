use super::ModelKind;

/// Which embedding parameters to include in a count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingCount {
    None,
    /// `|M| · D`.
    Full,
    /// One row fixed to all-ones: `(|M| - 1) · D`.
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountOptions {
    pub output_filter: bool,
    pub embedding: EmbeddingCount,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self { output_filter: false, embedding: EmbeddingCount::None }
    }
}

pub const MNIST_FEATURES: usize = 25;
pub const MNIST_VIEWS: usize = 4;
/// Affine 100 → 25.
pub const MNIST_HIDDEN_PARAMS: usize = 4 * MNIST_FEATURES * MNIST_FEATURES + MNIST_FEATURES;
/// Affine 25 → 10.
pub const MNIST_OUTPUT_PARAMS: usize = MNIST_FEATURES * 10 + 10;

/// Learnable parameters of one SSM block of width `d`.
pub fn block_params(kind: ModelKind, n: usize, d: usize, output_filter: bool) -> usize {
    let base = 3 * n * d;
    let gate = match kind {
        ModelKind::Coffee => 0,
        ModelKind::S6 | ModelKind::Linearized => d * d,
    };
    let filter = if output_filter { n * d } else { 0 };
    base + gate + filter
}

pub fn count_params(
    kind: ModelKind,
    n: usize,
    d: usize,
    vocab_size: usize,
    options: CountOptions,
) -> usize {
    let embedding = match options.embedding {
        EmbeddingCount::None => 0,
        EmbeddingCount::Full => vocab_size * d,
        EmbeddingCount::Canonical => vocab_size.saturating_sub(1) * d,
    };
    block_params(kind, n, d, options.output_filter) + embedding
}

/// Four-view MNIST architecture: four SSM layers of width 25 plus the two
/// affine heads.
pub fn count_mnist_params(kind: ModelKind, n: usize, output_filter: bool) -> usize {
    MNIST_VIEWS * block_params(kind, n, MNIST_FEATURES, output_filter)
        + MNIST_HIDDEN_PARAMS
        + MNIST_OUTPUT_PARAMS
}

/// Sequential-pixel baseline: one width-1 SSM and an affine 784 → 10 head.
pub fn count_smnist_params(kind: ModelKind, n: usize, with_ssm: bool) -> usize {
    let head = 784 * 10 + 10;
    if with_ssm {
        block_params(kind, n, 1, false) + head
    } else {
        head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_totals() {
        assert_eq!(count_mnist_params(ModelKind::Coffee, 2, false), 3385);
        assert_eq!(count_mnist_params(ModelKind::Coffee, 2, true), 3585);
        assert_eq!(count_mnist_params(ModelKind::S6, 16, false), 10085);
        assert_eq!(count_mnist_params(ModelKind::S6, 2, false), 5885);
        assert_eq!(block_params(ModelKind::Coffee, 2, 25, false), 150);
    }

    #[test]
    fn block_formulas() {
        let full = CountOptions { output_filter: false, embedding: EmbeddingCount::Full };
        let canon = CountOptions { output_filter: false, embedding: EmbeddingCount::Canonical };
        assert_eq!(count_params(ModelKind::S6, 8, 16, 9, full), 784);
        assert_eq!(count_params(ModelKind::Coffee, 8, 16, 9, canon), 512);
        assert_eq!(count_params(ModelKind::Coffee, 1, 9, 9, canon), 99);
        assert_eq!(count_params(ModelKind::Coffee, 8, 16, 8, CountOptions::default()), 384);
    }
}
