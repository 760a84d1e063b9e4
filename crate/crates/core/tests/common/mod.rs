//! Shared test oracles, independent of the implementation paths they
//! check: central finite differences for gradients, and brute-force rule
//! application for refinement and quantifying.

#![allow(dead_code)]

use mmq_core::pool::DataPool;
use mmq_core::quantify::QuantifyRecord;
use mmq_core::refine::{RefineConfig, ScoreRecord};
use std::collections::BTreeSet;

/// Central finite differences of a scalar function at `x`, one coordinate
/// at a time. The quotient is computed in f64 over the f32-typed function.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], eps: f32) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + eps;
        let plus = f(&probe);
        probe[i] = original - eps;
        let minus = f(&probe);
        probe[i] = original;
        grad.push((plus - minus) / (2.0 * f64::from(eps)));
    }
    grad
}

/// Central finite differences with a kink filter. The networks here are
/// piecewise linear in any single coordinate, so when the one-sided slopes
/// at +eps and -eps disagree the probe interval straddles a relu kink and
/// the central difference is not a derivative; those coordinates come back
/// as `None`. `slope_tol` is the relative slope disagreement treated as a
/// kink: use a tight value when `f` is evaluated in f64 and a looser one
/// when f32 evaluation noise or genuine curvature is present.
pub fn finite_diff_grad_checked(
    f: &mut dyn FnMut(&[f32]) -> f64,
    x: &[f32],
    eps: f32,
    slope_tol: f64,
) -> Vec<Option<f64>> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let original = probe[i];
        let center = f(&probe);
        probe[i] = original + eps;
        let plus = f(&probe);
        probe[i] = original - eps;
        let minus = f(&probe);
        probe[i] = original;
        let e = f64::from(eps);
        let forward = (plus - center) / e;
        let backward = (center - minus) / e;
        let scale = forward.abs().max(backward.abs()).max(0.1);
        if (forward - backward).abs() > slope_tol * scale {
            grad.push(None);
        } else {
            grad.push(Some((plus - minus) / (2.0 * e)));
        }
    }
    grad
}

/// Relative agreement with a small absolute floor for near-zero entries.
pub fn grads_close(analytic: &[f32], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> bool {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).all(|(&a, &n)| {
        let a = f64::from(a);
        let scale = a.abs().max(n.abs()).max(abs_floor / rel_tol);
        (a - n).abs() <= rel_tol * scale
    })
}

pub fn assert_grads_close(analytic: &[f32], numeric: &[f64], rel_tol: f64, abs_floor: f64, what: &str) {
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = f64::from(a);
        let scale = a.abs().max(n.abs()).max(abs_floor / rel_tol);
        assert!(
            (a - n).abs() <= rel_tol * scale,
            "{}: coordinate {} analytic {} vs finite-difference {} (rel err {})",
            what,
            i,
            a,
            n,
            (a - n).abs() / scale
        );
    }
}

/// Naive f64 reference forwards, independent of the tape. Finite
/// differences over these see no f32 rounding, so kink-free coordinates
/// must agree with the recorded backward pass to the full tolerance.
pub mod shadow {
    pub fn conv2d(
        x: &[f64],
        (c_in, h, w): (usize, usize, usize),
        weight: &[f64],
        c_out: usize,
        k: usize,
        bias: Option<&[f64]>,
        stride: usize,
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias.map(|b| b[co]).unwrap_or(0.0);
                    for ci in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                let xi = oi * stride + di;
                                let xj = oj * stride + dj;
                                acc += x[(ci * h + xi) * w + xj]
                                    * weight[((co * c_in + ci) * k + di) * k + dj];
                            }
                        }
                    }
                    out[(co * oh + oi) * ow + oj] = acc;
                }
            }
        }
        (out, (c_out, oh, ow))
    }

    pub fn relu(x: &mut [f64]) {
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn mean_pool(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
        (0..c)
            .map(|ci| x[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect()
    }

    pub fn linear(x: &[f64], weight: &[f64], bias: &[f64], out_dim: usize) -> Vec<f64> {
        let d = x.len();
        (0..out_dim)
            .map(|o| {
                bias[o]
                    + weight[o * d..(o + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    /// The four-conv trunk in f64, taking parameters as f32 tensors.
    pub fn extractor_forward(net: &mmq_core::FeatureNet, image: &[f32]) -> Vec<f64> {
        let mut x: Vec<f64> = image.iter().map(|&v| f64::from(v)).collect();
        let mut dims = (net.in_channels, net.image_size, net.image_size);
        for layer in 0..4 {
            let weight: Vec<f64> = net.conv_weights[layer]
                .data
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let bias: Vec<f64> = net.conv_biases[layer]
                .data
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let (out, out_dims) = conv2d(&x, dims, &weight, 64, 3, Some(&bias), 2);
            x = out;
            dims = out_dims;
            relu(&mut x);
        }
        let pooled = mean_pool(&x, dims);
        let pw: Vec<f64> = net.proj_weight.data.iter().map(|&v| f64::from(v)).collect();
        let pb: Vec<f64> = net.proj_bias.data.iter().map(|&v| f64::from(v)).collect();
        linear(&pooled, &pw, &pb, net.feature_dim)
    }
}

/// Brute-force application of the demotion/promotion rules, written
/// directly from the set formulas and kept deliberately naive.
pub struct OracleOutcome {
    pub m_final: BTreeSet<String>,
    pub u_final: BTreeSet<String>,
    pub labels: Vec<(String, usize)>,
}

pub fn refine_oracle(pool: &DataPool, records: &[ScoreRecord], cfg: &RefineConfig) -> OracleOutcome {
    let record_of = |id: &str| -> &ScoreRecord {
        records
            .iter()
            .find(|r| r.sample_id == id)
            .expect("record for every sample")
    };
    let m_initial: BTreeSet<String> = pool
        .samples
        .iter()
        .filter(|s| s.meta_label.is_some())
        .map(|s| s.id.clone())
        .collect();
    let u_initial: BTreeSet<String> = pool
        .samples
        .iter()
        .filter(|s| s.meta_label.is_none())
        .map(|s| s.id.clone())
        .collect();

    let mut demoted = BTreeSet::new();
    let mut promoted = BTreeSet::new();
    let mut labels = Vec::new();
    for s in &pool.samples {
        let record = record_of(&s.id);
        if let Some(meta) = s.meta_label {
            let fires = record.entries.iter().any(|e| {
                if cfg.demote_on_meta_class_prob {
                    e.meta_label_prob.map(|p| p < cfg.demote_below).unwrap_or(false)
                } else {
                    e.predicted_label == meta && e.confidence < cfg.demote_below
                }
            });
            if fires {
                demoted.insert(s.id.clone());
            } else {
                labels.push((s.id.clone(), meta));
            }
        } else if record.entries.iter().any(|e| e.confidence > cfg.promote_above) {
            promoted.insert(s.id.clone());
            let mut best = 0usize;
            for (i, e) in record.entries.iter().enumerate() {
                if e.confidence > record.entries[best].confidence {
                    best = i;
                }
            }
            labels.push((s.id.clone(), record.entries[best].predicted_label));
        }
    }
    // M_f = M - U' + M';  U_f = U - M' + U'
    let m_final: BTreeSet<String> = m_initial
        .difference(&demoted)
        .cloned()
        .collect::<BTreeSet<_>>()
        .union(&promoted)
        .cloned()
        .collect();
    let u_final: BTreeSet<String> = u_initial
        .difference(&promoted)
        .cloned()
        .collect::<BTreeSet<_>>()
        .union(&demoted)
        .cloned()
        .collect();
    labels.sort();
    OracleOutcome {
        m_final,
        u_final,
        labels,
    }
}

/// Brute-force fused-score ranking: recompute every per-sample score from
/// scratch in f64-free independent code and sort.
pub fn quantify_oracle(
    records: &[QuantifyRecord],
    rounds: &[usize],
    gamma: f32,
    n: usize,
) -> Vec<usize> {
    let m = rounds.len();
    let mut sums = vec![0.0f32; m];
    for record in records {
        for t in 0..m {
            let own = &record.entries[t].feature;
            let mut diversity = 0.0f64;
            for (u, other) in record.entries.iter().enumerate() {
                if u == t {
                    continue;
                }
                let dot: f64 = own
                    .iter()
                    .zip(&other.feature)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                let na: f64 = own.iter().map(|&a| f64::from(a) * f64::from(a)).sum();
                let nb: f64 = other
                    .feature
                    .iter()
                    .map(|&b| f64::from(b) * f64::from(b))
                    .sum();
                diversity += 1.0 - dot / (na.sqrt() * nb.sqrt());
            }
            sums[t] += gamma * record.entries[t].gt_prob + (1.0 - gamma) * diversity as f32;
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        sums[b]
            .partial_cmp(&sums[a])
            .unwrap()
            .then(rounds[a].cmp(&rounds[b]))
    });
    order.truncate(n);
    order
}
