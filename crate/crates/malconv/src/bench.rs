//! Scaling benchmarks: forward-pass wall time and peak activation memory
//! as a function of input length.

use std::io::Write;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::TokenSource;
use crate::error::{Error, Result};
use crate::mem;
use crate::models::{LowmemOpts, Mode, Model};

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub len: usize,
    pub wall_seconds: f64,
    pub peak_activation_bytes: usize,
    pub logit: f32,
}

/// Write `len` seeded pseudo-random bytes to a temp file and return it so
/// the forward pass runs against streamed file input.
pub fn random_input_file(dir: &std::path::Path, len: usize, seed: u64) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("bench_{len}_{seed}.bin"));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0u8; 1 << 20];
    let mut left = len;
    while left > 0 {
        let n = left.min(buf.len());
        rng.fill_bytes(&mut buf[..n]);
        w.write_all(&buf[..n]).map_err(|e| Error::io(path.display().to_string(), e))?;
        left -= n;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// Time one forward pass per length, in the given mode, returning a point
/// per length.
pub fn run(
    model: &Model,
    dir: &std::path::Path,
    lengths: &[usize],
    seed: u64,
    mode: Mode,
    opts: &LowmemOpts,
) -> Result<Vec<BenchPoint>> {
    let mut points = Vec::with_capacity(lengths.len());
    for (i, &len) in lengths.iter().enumerate() {
        let path = random_input_file(dir, len, seed.wrapping_add(i as u64))?;
        let src = TokenSource::open(&path, model.min_token_len())?;
        mem::reset_peak();
        let start = Instant::now();
        let logit = model.predict(&src, mode, opts)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        points.push(BenchPoint {
            len,
            wall_seconds,
            peak_activation_bytes: mem::peak_bytes(),
            logit,
        });
        let _ = std::fs::remove_file(&path);
    }
    Ok(points)
}

/// Ordinary least squares fit y = slope*x + intercept with its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}
