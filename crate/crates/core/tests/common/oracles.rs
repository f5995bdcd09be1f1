use ulab::metrics::Predictor;
use ulab::numerics::Matrix;
use ulab::Result;

/// Returns fixed continuations per cut, ignoring the model interface.
pub struct Scripted {
    pub vocab: usize,
    pub gens: Vec<(usize, Vec<u32>)>,
}

impl Predictor for Scripted {
    fn logits(&self, x: &[u32]) -> Result<Matrix> {
        Ok(Matrix::zeros(x.len(), self.vocab))
    }

    fn continuations(&self, _x: &[u32], cuts: &[usize]) -> Result<Vec<Vec<u32>>> {
        Ok(cuts
            .iter()
            .map(|c| self.gens.iter().find(|(k, _)| k == c).unwrap().1.clone())
            .collect())
    }
}

/// Deterministic pseudo-random argmax driven by a hash of the whole prefix.
pub struct Hashy {
    pub vocab: usize,
}

impl Hashy {
    pub fn next(&self, prefix: &[u32]) -> u32 {
        let mut h: u64 = 1469598103934665603;
        for &t in prefix {
            h = (h ^ t as u64).wrapping_mul(1099511628211);
        }
        (h % self.vocab as u64) as u32
    }
}

impl Predictor for Hashy {
    fn logits(&self, x: &[u32]) -> Result<Matrix> {
        let mut m = Matrix::zeros(x.len(), self.vocab);
        for t in 0..x.len() {
            m[(t, self.next(&x[..=t]) as usize)] = 1.0;
        }
        Ok(m)
    }
}

pub fn brute_overlap(a: &[u32], b: &[u32], n: usize) -> f64 {
    if a.len() < n {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in 0..=a.len() - n {
        total += 1;
        let mut found = false;
        for j in 0..(b.len() + 1).saturating_sub(n) {
            if (0..n).all(|k| a[i + k] == b[j + k]) {
                found = true;
                break;
            }
        }
        if found {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

pub fn brute_el(next: &dyn Fn(&[u32]) -> u32, x: &[u32], n: usize) -> f64 {
    let t_len = x.len();
    let mut sum = 0.0;
    let mut cuts = 0;
    for t in 1..=t_len - n {
        let mut seq = x[..t].to_vec();
        while seq.len() < t_len {
            let tok = next(&seq);
            seq.push(tok);
        }
        sum += brute_overlap(&seq[t..], &x[t..], n);
        cuts += 1;
    }
    sum / cuts as f64
}

pub fn brute_ma(next: &dyn Fn(&[u32]) -> u32, x: &[u32]) -> f64 {
    let mut hits = 0;
    for t in 1..x.len() {
        if next(&x[..t]) == x[t] {
            hits += 1;
        }
    }
    hits as f64 / (x.len() - 1) as f64
}
