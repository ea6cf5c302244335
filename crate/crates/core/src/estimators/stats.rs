//! Chunked, order-stable Monte Carlo accumulation.
//!
//! Samples are processed in fixed chunks of [`MC_CHUNK`]; chunk `c` draws
//! sequentially from `stream.split(c)` and partial sums are folded in chunk
//! index order. Chunk boundaries depend only on the sample count, so the
//! result is bit-identical whatever rayon's worker count is.

use crate::numerics::RngStream;
use crate::estimators::EstimatorError;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

pub(crate) const MC_CHUNK: usize = 4096;

/// Paired sums for a ratio-of-means estimator.
#[derive(Debug, Clone)]
pub(crate) struct RatioSums {
    pub n: usize,
    pub sum_a: f64,
    pub sum_b: f64,
    pub sum_aa: f64,
    pub sum_bb: f64,
    pub sum_ab: f64,
    /// Per-chunk `(sum_a, sum_b, count)`, for jackknife resampling.
    pub chunks: Vec<(f64, f64, usize)>,
}

impl RatioSums {
    pub fn ratio(&self) -> f64 {
        self.mean_a() / self.mean_b()
    }

    pub fn mean_a(&self) -> f64 {
        self.sum_a / self.n as f64
    }

    pub fn mean_b(&self) -> f64 {
        self.sum_b / self.n as f64
    }

    /// Delta-method standard error of the ratio.
    pub fn stderr(&self) -> f64 {
        let n = self.n as f64;
        let (ma, mb) = (self.mean_a(), self.mean_b());
        let r = ma / mb;
        let var_a = (self.sum_aa - n * ma * ma) / (n - 1.0);
        let var_b = (self.sum_bb - n * mb * mb) / (n - 1.0);
        let cov = (self.sum_ab - n * ma * mb) / (n - 1.0);
        let var_r = (var_a - 2.0 * r * cov + r * r * var_b) / (n * mb * mb);
        var_r.max(0.0).sqrt()
    }

    /// Leave-one-chunk-out jackknife standard error of the ratio.
    pub fn jackknife_stderr(&self) -> f64 {
        let k = self.chunks.len();
        if k < 2 {
            return f64::NAN;
        }
        let loo: Vec<f64> = self
            .chunks
            .iter()
            .map(|&(a, b, _)| (self.sum_a - a) / (self.sum_b - b))
            .collect();
        let mean = loo.iter().sum::<f64>() / k as f64;
        let ss = loo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        ((k as f64 - 1.0) / k as f64 * ss).sqrt()
    }
}

/// Accumulate paired `(numerator, denominator)` statistics.
pub(crate) fn mc_ratio_sums<F>(
    samples: usize,
    stream: &RngStream,
    per_sample: F,
) -> Result<RatioSums, EstimatorError>
where
    F: Fn(&mut ChaCha12Rng) -> Result<(f64, f64), EstimatorError> + Sync,
{
    let n_chunks = samples.div_ceil(MC_CHUNK);
    let partials: Result<Vec<_>, EstimatorError> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.split(c as u64).rng();
            let count = MC_CHUNK.min(samples - c * MC_CHUNK);
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for _ in 0..count {
                let (a, b) = per_sample(&mut rng)?;
                sa += a;
                sb += b;
                saa += a * a;
                sbb += b * b;
                sab += a * b;
            }
            Ok((sa, sb, saa, sbb, sab, count))
        })
        .collect();
    let partials = partials?;

    let mut out = RatioSums {
        n: 0,
        sum_a: 0.0,
        sum_b: 0.0,
        sum_aa: 0.0,
        sum_bb: 0.0,
        sum_ab: 0.0,
        chunks: Vec::with_capacity(n_chunks),
    };
    for (sa, sb, saa, sbb, sab, count) in partials {
        out.n += count;
        out.sum_a += sa;
        out.sum_b += sb;
        out.sum_aa += saa;
        out.sum_bb += sbb;
        out.sum_ab += sab;
        out.chunks.push((sa, sb, count));
    }
    Ok(out)
}

/// Entry-wise sums for a vector statistic.
#[derive(Debug, Clone)]
pub(crate) struct MomentSums {
    pub n: usize,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

impl MomentSums {
    pub fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n as f64
    }

    pub fn stderr(&self, i: usize) -> f64 {
        let n = self.n as f64;
        let m = self.mean(i);
        let var = ((self.sumsq[i] - n * m * m) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}

/// Accumulate a length-`stat_len` statistic vector per sample.
pub(crate) fn mc_moment_sums<F>(
    samples: usize,
    stream: &RngStream,
    stat_len: usize,
    per_sample: F,
) -> Result<MomentSums, EstimatorError>
where
    F: Fn(&mut ChaCha12Rng, &mut [f64]) -> Result<(), EstimatorError> + Sync,
{
    let n_chunks = samples.div_ceil(MC_CHUNK);
    let partials: Result<Vec<_>, EstimatorError> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.split(c as u64).rng();
            let count = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut stat = vec![0.0; stat_len];
            let mut sum = vec![0.0; stat_len];
            let mut sumsq = vec![0.0; stat_len];
            for _ in 0..count {
                per_sample(&mut rng, &mut stat)?;
                for i in 0..stat_len {
                    sum[i] += stat[i];
                    sumsq[i] += stat[i] * stat[i];
                }
            }
            Ok((sum, sumsq, count))
        })
        .collect();
    let partials = partials?;

    let mut out = MomentSums { n: 0, sum: vec![0.0; stat_len], sumsq: vec![0.0; stat_len] };
    for (sum, sumsq, count) in partials {
        out.n += count;
        for i in 0..stat_len {
            out.sum[i] += sum[i];
            out.sumsq[i] += sumsq[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn ratio_sums_worker_count_invariant() {
        let stream = RngStream::new(5).split(9);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                mc_ratio_sums(10_000, &stream, |rng| {
                    let a: f64 = rng.random();
                    let b: f64 = rng.random();
                    Ok((a, 1.0 + b))
                })
                .unwrap()
            })
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.sum_a.to_bits(), b.sum_a.to_bits());
        assert_eq!(a.sum_ab.to_bits(), b.sum_ab.to_bits());
        assert_eq!(a.ratio().to_bits(), b.ratio().to_bits());
    }

    #[test]
    fn moment_sums_partial_chunk() {
        // 5000 samples = one full chunk + one partial
        let stream = RngStream::new(6).split(1);
        let s = mc_moment_sums(5000, &stream, 2, |rng, out| {
            out[0] = rng.random();
            out[1] = 2.0;
            Ok(())
        })
        .unwrap();
        assert_eq!(s.n, 5000);
        assert_eq!(s.mean(1), 2.0);
        assert_eq!(s.stderr(1), 0.0);
        assert!((s.mean(0) - 0.5).abs() < 0.02);
    }

    #[test]
    fn jackknife_close_to_delta_method() {
        let stream = RngStream::new(7).split(2);
        let s = mc_ratio_sums(50_000, &stream, |rng| {
            let a: f64 = rng.random::<f64>() + 1.0;
            let b: f64 = rng.random::<f64>() + 2.0;
            Ok((a, b))
        })
        .unwrap();
        let (d, j) = (s.stderr(), s.jackknife_stderr());
        assert!((d - j).abs() / d < 0.25, "delta {d} vs jackknife {j}");
    }
}
