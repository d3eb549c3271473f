//! Scalar references for the quantizer and the outlier statistics.

use std::collections::BTreeMap;

use prefixquant::quant::Granularity;
use prefixquant::tensor::Tensor;

/// Scalar quantize-dequantize of one group, straight from the formulas.
pub fn oracle_group(vals: &[f32], bits: u8, gamma: f32, beta: f32) -> (f32, f32, Vec<f32>) {
    let qmax = ((1u32 << bits) - 1) as f32;
    let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = ((gamma as f64 * hi as f64 - beta as f64 * lo as f64) / qmax as f64) as f32;
    if hi == lo || !(s >= 1e-8) {
        s = 1e-8;
    }
    let z = (-(beta as f64 * lo as f64 / s as f64).floor()).clamp(0.0, qmax as f64) as f32;
    let out = vals
        .iter()
        .map(|&x| {
            let q = ((x / s).round_ties_even() + z).clamp(0.0, qmax);
            s * (q - z)
        })
        .collect();
    (s, z, out)
}

/// Group key of element `i` for each granularity, from explicit indices.
pub fn group_key(g: Granularity, shape: &[usize], i: usize) -> (usize, usize) {
    match *shape {
        [_, c] => {
            let (r, col) = (i / c, i % c);
            match g {
                Granularity::PerTensor => (0, 0),
                Granularity::PerToken => (r, 0),
                Granularity::PerChannel => (col, 0),
                Granularity::Group(n) => (col, r / n),
                Granularity::PerHead => unreachable!(),
            }
        }
        [_, h, d] => {
            let (tk, head, ch) = (i / (h * d), (i / d) % h, i % d);
            match g {
                Granularity::PerTensor => (0, 0),
                Granularity::PerToken => (tk, 0),
                Granularity::PerHead => (head, 0),
                Granularity::PerChannel => (head * d + ch, 0),
                Granularity::Group(n) => ((tk * h + head) * d / n + ch / n, 0),
            }
        }
        _ => unreachable!(),
    }
}

pub fn oracle(x: &Tensor, g: Granularity, bits: u8, gamma: f32, beta: f32) -> Vec<f32> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..x.len() {
        groups.entry(group_key(g, x.shape(), i)).or_default().push(i);
    }
    let mut out = vec![0.0; x.len()];
    for idx in groups.values() {
        let vals: Vec<f32> = idx.iter().map(|&i| x.data()[i]).collect();
        let (_, _, q) = oracle_group(&vals, bits, gamma, beta);
        for (&i, v) in idx.iter().zip(q) {
            out[i] = v;
        }
    }
    out
}

/// Upper and lower outliers by direct comparison with the median.
pub fn brute_classify(m: &[f32], eta1: f64, eta2: f64) -> (Vec<usize>, Vec<usize>) {
    let mut sorted: Vec<f32> = m.to_vec();
    sorted.sort_by(f32::total_cmp);
    let med = (sorted[(sorted.len() - 1) / 2] as f64).max(1e-12);
    let mut up = Vec::new();
    let mut lo = Vec::new();
    for i in 0..m.len() {
        let r = m[i] as f64 / med;
        if r > eta1 {
            up.push(i);
        }
        if r == 0.0 || 1.0 / r > eta2 {
            lo.push(i);
        }
    }
    (up, lo)
}

/// The `o − 1` most frequent tokens, then `bos`.
pub fn brute_select(tally: &BTreeMap<u32, usize>, o: usize, bos: u32) -> Vec<u32> {
    let mut all: Vec<(u32, usize)> = tally.iter().map(|(&t, &n)| (t, n)).collect();
    // Stable sort by descending count keeps ascending ids within ties.
    all.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
    let mut want: Vec<u32> = all.into_iter().take(o - 1).map(|(id, _)| id).collect();
    want.push(bos);
    want
}
