/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[u8], classes: usize) -> (f32, Vec<f32>) {
    let n = labels.len();
    assert_eq!(logits.len(), n * classes);
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0f64;
    for (i, (row, &label)) in logits.chunks(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[label as usize] - max) as f64;
        for (k, e) in exps.iter().enumerate() {
            let p = e / sum;
            let target = if k == label as usize { 1.0 } else { 0.0 };
            grad[i * classes + k] = ((p - target) / n as f64) as f32;
        }
    }
    ((total / n as f64) as f32, grad)
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
