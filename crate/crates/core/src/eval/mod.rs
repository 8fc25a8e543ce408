//! Evaluation: foreground/background metrics and the benchmark harness.

mod bench;
mod metrics;
mod scorer;

pub use bench::{
    run_benchmark, write_report, BenchLayout, BenchOptions, ConceptSet, IdentityRunner,
    ImageRow, MethodRunner, MetricsReport, PipelineRunner, SwapEntry, SwapJob, REPORT_COLUMNS,
};
pub use metrics::{
    background_metrics, clip_scores, cosine, masked_background_metrics, mse, psnr,
    psnr_from_mse, split_fg_bg, ssim, BackgroundMetrics, PixelRange,
};
pub use scorer::{pool, ImageTextScorer, PerceptualMetric, StubPerceptual, StubScorer};

/// Serializes `+inf` as the string `"inf"` and other values as numbers.
pub(crate) mod inf_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {t:?}"))),
        }
    }
}
