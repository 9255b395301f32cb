//! Dataset-level evaluation with per-frame median scaling.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, frame_sums, Aggregation, MetricSums, MetricsReport, DEFAULT_CLAMP};
use crate::networks::{Model, Network};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub network: Network,
    pub report: MetricsReport,
    pub frames: Vec<FrameRecord>,
}

/// Predicted depth (flattened, per triplet) of `network` on the frames
/// `indices`. The teacher sees only `I_t`; the student also gets `I_{t-1}`.
pub fn predict<F: Scalar>(model: &mut Model<F>, data: &Dataset, network: Network, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let batch = data.batch::<F>(indices)?;
    let depth = match network {
        Network::Teacher => model.predict_teacher(&batch.frames[1])?,
        Network::Student => model.predict_student(&batch.frames[1], &batch.frames[0], &data.intrinsics())?,
    };
    let n = depth.len() / indices.len();
    Ok(depth.data().chunks(n).map(|c| c.iter().map(|v| v.f64()).collect()).collect())
}

/// Evaluates every triplet's centre frame against ground truth.
pub fn evaluate_dataset<F: Scalar>(
    model: &mut Model<F>,
    data: &Dataset,
    network: Network,
    batch_size: usize,
    how: Aggregation,
) -> Result<EvalOutput> {
    if data.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut sums: Vec<MetricSums> = Vec::with_capacity(data.len());
    let mut frames = Vec::with_capacity(data.len());
    for chunk in all.chunks(batch_size.max(1)) {
        for (&index, pred) in chunk.iter().zip(predict(model, data, network, chunk)?) {
            let gt: Vec<f64> = data.triplets[index].depth.iter().map(|&d| d as f64).collect();
            let s = frame_sums(&pred, &gt, DEFAULT_CLAMP, None)?;
            frames.push(FrameRecord { index, metrics: s.report()? });
            sums.push(s);
        }
    }
    Ok(EvalOutput { network, report: aggregate(&sums, how)?, frames })
}
