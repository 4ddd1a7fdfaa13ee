/// Displacement penalty `h = (1−γ) + γ·hann2d`, applied multiplicatively.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineWindow {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

impl CosineWindow {
    pub fn new(rows: usize, cols: usize, influence: f64) -> Self {
        let (hr, hc) = (hann(rows), hann(cols));
        let mut values = Vec::with_capacity(rows * cols);
        for a in &hr {
            for b in &hc {
                values.push((1.0 - influence) + influence * a * b);
            }
        }
        CosineWindow { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores
            .iter()
            .zip(&self.values)
            .map(|(s, h)| s * h)
            .collect()
    }
}
