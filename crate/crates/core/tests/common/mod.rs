#![allow(dead_code)]

use lie_mem::tasks::Task;
use num_bigint::BigUint;
use std::io::Write;

/// Target for any task, computed directly from the task definitions.
pub fn task_oracle(task: Task, input: &[usize], at: usize) -> Vec<usize> {
    match task {
        Task::Copy => input.to_vec(),
        Task::Reverse => input.iter().rev().copied().collect(),
        Task::BigramFlip => {
            let mut out = Vec::new();
            let mut i = 0;
            while i + 1 < input.len() {
                out.push(input[i + 1]);
                out.push(input[i]);
                i += 2;
            }
            out
        }
        Task::OddFirst => {
            let mut out = Vec::new();
            for (i, &x) in input.iter().enumerate() {
                if i % 2 == 0 {
                    out.push(x);
                }
            }
            for (i, &x) in input.iter().enumerate() {
                if i % 2 == 1 {
                    out.push(x);
                }
            }
            out
        }
        Task::Double => {
            let x = big_from_digits(input);
            big_to_digits(&(x * 2u32), input.len() + 1)
        }
        Task::InterleavedAdd => {
            let xs: Vec<usize> = input.iter().step_by(2).copied().collect();
            let ys: Vec<usize> = input.iter().skip(1).step_by(2).copied().collect();
            let sum = big_from_digits(&xs) + big_from_digits(&ys);
            big_to_digits(&sum, xs.len() + 1)
        }
        Task::RepeatCopy => {
            let n = input.iter().position(|&t| t != at).unwrap_or(input.len());
            let block = &input[n..];
            let mut out = Vec::new();
            for _ in 0..n {
                out.extend_from_slice(block);
            }
            out
        }
        Task::PrioritySort => {
            let mut items: Vec<(usize, usize, usize)> = Vec::new();
            let mut count = 0;
            for &t in input {
                if t == at {
                    count += 1;
                } else {
                    items.push((count, items.len(), t));
                    count = 0;
                }
            }
            items.sort();
            items.into_iter().map(|(_, _, t)| t).collect()
        }
    }
}

/// Little-endian decimal digits to an integer.
pub fn big_from_digits(digits: &[usize]) -> BigUint {
    let text: String = digits.iter().rev().map(|d| char::from(b'0' + *d as u8)).collect();
    if text.is_empty() {
        return BigUint::from(0u32);
    }
    BigUint::parse_bytes(text.as_bytes(), 10).unwrap()
}

/// Integer to `width` little-endian decimal digits, zero padded.
pub fn big_to_digits(x: &BigUint, width: usize) -> Vec<usize> {
    let text = x.to_str_radix(10);
    let mut digits: Vec<usize> = text.bytes().rev().map(|b| (b - b'0') as usize).collect();
    assert!(digits.len() <= width, "{x} needs more than {width} digits");
    digits.resize(width, 0);
    digits
}

/// Token-by-token comparison over the target plus its end marker.
pub fn reference_score(prediction: &[usize], target: &[usize], end: usize) -> (f64, f64) {
    let mut expected = target.to_vec();
    expected.push(end);
    let mut correct = 0usize;
    for i in 0..expected.len() {
        if i < prediction.len() && prediction[i] == expected[i] {
            correct += 1;
        }
    }
    let fine = correct as f64 / expected.len() as f64;
    let coarse = if correct == expected.len() { 1.0 } else { 0.0 };
    (fine, coarse)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `s_i / d_i^2` normalized, with the limit value on coincident keys and a
/// uniform split over the nearest keys when every strength is zero.
pub fn inverse_square_formula(q: &[f64], keys: &[Vec<f64>], s: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = keys.iter().map(|k| sq_dist(q, k)).collect();
    if s.iter().all(|&x| x == 0.0) {
        return uniform_over(&d.iter().map(|x| -x).collect::<Vec<_>>());
    }
    let on_key: f64 = d.iter().zip(s).filter(|(d, _)| **d == 0.0).map(|(_, s)| s).sum();
    if on_key > 0.0 {
        return d.iter().zip(s).map(|(&d, &s)| if d == 0.0 { s / on_key } else { 0.0 }).collect();
    }
    let raw: Vec<f64> = d.iter().zip(s).map(|(&d, &s)| if d == 0.0 { 0.0 } else { s / d }).collect();
    normalize(raw)
}

/// Uniform weights over the entries with the largest score.
pub fn uniform_over(scores: &[f64]) -> Vec<f64> {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = scores.iter().filter(|&&x| x == best).count() as f64;
    scores.iter().map(|&x| if x == best { 1.0 / n } else { 0.0 }).collect()
}

pub fn softmax_formula(q: &[f64], keys: &[Vec<f64>], s: &[f64], t: f64) -> Vec<f64> {
    if s.iter().all(|&x| x == 0.0) {
        return uniform_over(&keys.iter().map(|k| -sq_dist(q, k) / t).collect::<Vec<_>>());
    }
    let raw: Vec<f64> = keys.iter().zip(s).map(|(k, s)| s * (-sq_dist(q, k) / t).exp()).collect();
    normalize(raw)
}

pub fn ram_formula(q: &[f64], keys: &[Vec<f64>], s: &[f64]) -> Vec<f64> {
    if s.iter().all(|&x| x == 0.0) {
        return uniform_over(&keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>());
    }
    let raw: Vec<f64> = keys.iter().zip(s).map(|(k, s)| s * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>().exp()).collect();
    normalize(raw)
}

pub fn sharpen_formula(w: &[f64], gamma: f64) -> Vec<f64> {
    normalize(w.iter().map(|x| x.powf(gamma)).collect())
}

pub fn normalize(v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    v.into_iter().map(|x| x / total).collect()
}

/// Prints one line past the test harness's output capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}
