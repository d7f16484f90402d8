use crate::numerics::Matrix;

/// Hidden state of every feature subsystem at one time step, `D × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub x: Matrix,
}

impl LayerState {
    pub fn zeros(d: usize, n: usize) -> Self {
        Self { x: Matrix::zeros(d, n) }
    }
}

/// States for a whole sequence stored as `L × D × n`, feature-major within a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    len: usize,
    d: usize,
    n: usize,
    data: Vec<f64>,
}

impl StateTrajectory {
    pub fn zeros(len: usize, d: usize, n: usize) -> Self {
        Self { len, d, n, data: vec![0.0; len * d * n] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.n)
    }

    /// All `D × n` entries at step `k`.
    #[inline]
    pub fn step(&self, k: usize) -> &[f64] {
        let w = self.d * self.n;
        &self.data[k * w..(k + 1) * w]
    }

    #[inline]
    pub fn step_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.d * self.n;
        &mut self.data[k * w..(k + 1) * w]
    }

    /// State of feature `i` at step `k`.
    #[inline]
    pub fn feature(&self, k: usize, i: usize) -> &[f64] {
        let base = (k * self.d + i) * self.n;
        &self.data[base..base + self.n]
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.d + i) * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        self.data[(k * self.d + i) * self.n + j] = v;
    }

    pub fn layer_state(&self, k: usize) -> LayerState {
        LayerState { x: Matrix::from_vec(self.d, self.n, self.step(k).to_vec()).expect("shape") }
    }

    pub fn last(&self) -> Option<LayerState> {
        self.len.checked_sub(1).map(|k| self.layer_state(k))
    }

    pub fn max_abs_diff(&self, other: &StateTrajectory) -> f64 {
        assert_eq!((self.len, self.d, self.n), (other.len, other.d, other.n));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Output sequence plus the state trajectory that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub outputs: Matrix,
    pub states: StateTrajectory,
}

/// Gate values for one feature. COFFEE gates each state component; S6 has one
/// scalar step size per feature.
#[derive(Debug, Clone, PartialEq)]
pub enum GateVector {
    Coffee { feature: usize, delta: Vec<f64> },
    S6 { feature: usize, delta: f64 },
}

impl GateVector {
    pub fn feature(&self) -> usize {
        match self {
            GateVector::Coffee { feature, .. } | GateVector::S6 { feature, .. } => *feature,
        }
    }
}
