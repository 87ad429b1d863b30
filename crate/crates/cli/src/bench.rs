//! Single-image latency measurement.

use std::io::Write;
use std::time::Instant;

use gcnet_core::cost::count_params_flops;
use gcnet_core::network::{check_input_dims, Form, Network};
use gcnet_core::{Dims, Real, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MIN_WARMUP: usize = 5;
pub const MIN_TIMED: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub h: usize,
    pub w: usize,
    pub form: Form,
    pub warmup: usize,
    pub timed: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub params: u64,
    pub flops: u64,
}

pub const CSV_HEADER: [&str; 11] = ["h", "w", "form", "warmup", "timed", "mean_ms", "median_ms", "p95_ms", "fps", "params", "flops"];

impl BenchReport {
    pub fn csv_record(&self) -> [String; 11] {
        [
            self.h.to_string(),
            self.w.to_string(),
            form_name(self.form).to_string(),
            self.warmup.to_string(),
            self.timed.to_string(),
            format!("{:.4}", self.mean_ms),
            format!("{:.4}", self.median_ms),
            format!("{:.4}", self.p95_ms),
            format!("{:.3}", self.fps),
            self.params.to_string(),
            self.flops.to_string(),
        ]
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} form at {}x{}: mean {:.2} ms, median {:.2} ms, p95 {:.2} ms, {:.2} FPS ({} warmup, {} timed), {:.3} M params, {:.3} GFLOPs",
            form_name(self.form),
            self.h,
            self.w,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.fps,
            self.warmup,
            self.timed,
            self.params as f64 / 1e6,
            self.flops as f64 / 1e9
        )
    }
}

pub fn form_name(f: Form) -> &'static str {
    match f {
        Form::Training => "training",
        Form::Inference => "inference",
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times eval-mode forwards of one seeded `h × w` image, batch size 1, on the
/// calling thread.
pub fn bench<T: Real>(net: &Network<T>, h: usize, w: usize, warmup: usize, timed: usize, seed: u64) -> gcnet_core::Result<BenchReport> {
    check_input_dims(h, w)?;
    if warmup < MIN_WARMUP || timed < MIN_TIMED {
        return Err(gcnet_core::Error::Invalid(format!("need at least {MIN_WARMUP} warmup and {MIN_TIMED} timed iterations")));
    }
    let x = Tensor4::<T>::randn(Dims::new(1, 3, h, w), &mut ChaCha8Rng::seed_from_u64(seed));
    for _ in 0..warmup {
        std::hint::black_box(net.forward(&x)?);
    }
    let mut ms = Vec::with_capacity(timed);
    for _ in 0..timed {
        let t = Instant::now();
        std::hint::black_box(net.forward(&x)?);
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = ms.iter().sum::<f64>() / timed as f64;
    ms.sort_by(f64::total_cmp);
    let median_ms = median(&ms);
    let cost = count_params_flops(net, h, w)?;
    Ok(BenchReport {
        h,
        w,
        form: net.form,
        warmup,
        timed,
        mean_ms,
        median_ms,
        p95_ms: percentile(&ms, 0.95),
        fps: 1000.0 / median_ms,
        params: cost.params,
        flops: cost.flops,
    })
}

pub fn write_csv<W: Write>(out: W, reports: &[BenchReport]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(CSV_HEADER)?;
    for r in reports {
        wr.write_record(r.csv_record())?;
    }
    wr.flush()?;
    Ok(())
}
