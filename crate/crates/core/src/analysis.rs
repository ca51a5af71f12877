//! Token-level activation maps and their agreement with ground-truth masks.
//!
//! A map scores every visual token in `[0, 1]`; thresholding it gives a
//! pseudo-mask, which is compared with the projected ground-truth mask by
//! IoU at the best of nine thresholds.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{stack_images, Sample, TokenMask};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Model, Stage, TraceBundle, TracePoint};
use crate::tensor::{no_grad, Real, Tensor};

/// Thresholds swept by [`best_threshold_iou`], ascending.
pub const THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapKind {
    /// Norm of each token after subtracting the mean token.
    Magnitude,
    /// Norm of each token's DFT phase deviation from the mean phase.
    Frequency,
    /// Head-summed CLS attention.
    Attention,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::Magnitude => "magnitude",
            MapKind::Frequency => "frequency",
            MapKind::Attention => "attention",
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "magnitude" => Ok(MapKind::Magnitude),
            "frequency" => Ok(MapKind::Frequency),
            "attention" => Ok(MapKind::Attention),
            other => Err(Error::Config(format!("unknown map kind {other:?}; expected magnitude or frequency"))),
        }
    }
}

/// Per-token scores in `[0, 1]`, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ActivationMap {
    /// Min-max normalizes `raw`; a constant input becomes all zeros.
    pub fn normalized(rows: usize, cols: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != rows * cols {
            return Err(Error::Shape(format!("{} values do not fill a {rows}×{cols} grid", raw.len())));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let values = if hi > lo {
            raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Ok(ActivationMap { rows, cols, values })
    }

    /// Square grid when the count is a perfect square, a single row otherwise.
    fn grid_for(n: usize) -> (usize, usize) {
        let side = (n as f64).sqrt().round() as usize;
        if side * side == n {
            (side, side)
        } else {
            (1, n)
        }
    }
}

/// Binary map `values > threshold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    pub mask: TokenMask,
    /// Threshold in tenths (1..=9), kept integral so masks compare exactly.
    pub threshold_tenths: u8,
}

impl PseudoMask {
    pub fn threshold(&self) -> f64 {
        THRESHOLDS[self.threshold_tenths as usize - 1]
    }
}

pub fn pseudo_mask(map: &ActivationMap, threshold_tenths: u8) -> Result<PseudoMask> {
    if !(1..=9).contains(&threshold_tenths) {
        return Err(Error::Contract(format!("threshold must be 0.1..0.9, got {}", threshold_tenths as f64 / 10.0)));
    }
    let t = THRESHOLDS[threshold_tenths as usize - 1];
    Ok(PseudoMask {
        mask: TokenMask::new(map.rows, map.cols, map.values.iter().map(|&v| (v > t) as u8).collect())?,
        threshold_tenths,
    })
}

fn rows_f64<T: Real>(features: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    if features.rank() != 2 || features.shape()[0] < 2 {
        return Err(Error::Contract(format!(
            "activation maps need [tokens ≥ 2, dim] features, got {:?}",
            features.shape()
        )));
    }
    Ok((features.shape()[0], features.shape()[1], features.to_f64_vec()))
}

/// Per-token norm of `rows - mean(rows)`.
fn centered_norms(n: usize, d: usize, x: &[f64]) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    x.chunks_exact(d)
        .map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>().sqrt())
        .collect()
}

/// Visual-token features (CLS already removed) → centered-norm map.
pub fn magnitude_activation<T: Real>(features: &Tensor<T>) -> Result<ActivationMap> {
    let (n, d, x) = rows_f64(features)?;
    let (r, c) = ActivationMap::grid_for(n);
    ActivationMap::normalized(r, c, centered_norms(n, d, &x))
}

/// Phase angle with the sign of an exactly-zero imaginary part fixed to +0,
/// so real negative bins read as +π.
fn phase(z: Complex<f64>) -> f64 {
    if z.im == 0.0 {
        0.0f64.atan2(z.re)
    } else {
        z.im.atan2(z.re)
    }
}

/// Visual-token features → map of DFT phase deviation from the mean phase.
/// The transform runs along each token's channel axis.
pub fn frequency_activation<T: Real>(features: &Tensor<T>) -> Result<ActivationMap> {
    let (n, d, x) = rows_f64(features)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(d);
    let mut angles = Vec::with_capacity(n * d);
    let mut buf = vec![Complex::new(0.0, 0.0); d];
    for row in x.chunks_exact(d) {
        buf.iter_mut().zip(row).for_each(|(b, &v)| *b = Complex::new(v, 0.0));
        fft.process(&mut buf);
        angles.extend(buf.iter().map(|&z| phase(z)));
    }
    let (r, c) = ActivationMap::grid_for(n);
    ActivationMap::normalized(r, c, centered_norms(n, d, &angles))
}

/// Whether scaling the features by `s > 0` leaves the magnitude map unchanged within 1e-6.
pub fn scale_invariance_probe<T: Real>(features: &Tensor<T>, s: f64) -> Result<bool> {
    if !(s > 0.0) {
        return Err(Error::Contract(format!("scale must be positive, got {s}")));
    }
    let a = magnitude_activation(features)?;
    let b = magnitude_activation(&features.scale(s))?;
    Ok(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() <= 1e-6))
}

/// `TP / (TP + FP + FN)`; two empty masks agree perfectly (IoU 1).
pub fn iou(m_g: &TokenMask, m_p: &TokenMask) -> Result<f64> {
    if (m_g.rows, m_g.cols) != (m_p.rows, m_p.cols) {
        return Err(Error::Shape(format!(
            "mask grids differ: {}×{} vs {}×{}",
            m_g.rows, m_g.cols, m_p.rows, m_p.cols
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&g, &p) in m_g.cells.iter().zip(&m_p.cells) {
        match (g, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => {}
        }
    }
    let denom = tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { tp as f64 / denom as f64 })
}

/// Best IoU over [`THRESHOLDS`] and the smallest threshold achieving it.
pub fn best_threshold_iou(m_g: &TokenMask, map: &ActivationMap) -> Result<(f64, f64)> {
    let mut best = (-1.0, 0.0);
    for tenths in 1..=9u8 {
        let p = pseudo_mask(map, tenths)?;
        let v = iou(m_g, &p.mask)?;
        if v > best.0 {
            best = (v, p.threshold());
        }
    }
    Ok(best)
}

/// Min-max normalized CLS attention over visual tokens.
pub fn attention_map<T: Real>(trace: &TraceBundle<T>) -> Result<ActivationMap> {
    let raw: Vec<f64> = trace.w.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let (r, c) = if trace.grid * trace.grid == raw.len() {
        (trace.grid, trace.grid)
    } else {
        ActivationMap::grid_for(raw.len())
    };
    ActivationMap::normalized(r, c, raw)
}

/// Feature map of the given kind at `point`, CLS row dropped.
pub fn feature_map<T: Real>(trace: &TraceBundle<T>, point: TracePoint, kind: MapKind) -> Result<ActivationMap> {
    let feats = trace.features(point).ok_or_else(|| {
        let valid: Vec<&str> = trace.available().iter().map(|p| p.name()).collect();
        Error::Contract(format!("stage {point} is not traced for this model; valid stages: {}", valid.join(", ")))
    })?;
    let tokens = feats.shape()[0];
    let visual = feats.slice(0, 1, tokens - 1)?;
    let mut map = match kind {
        MapKind::Magnitude => magnitude_activation(&visual)?,
        MapKind::Frequency => frequency_activation(&visual)?,
        MapKind::Attention => return attention_map(trace),
    };
    if trace.grid * trace.grid == map.values.len() {
        map.rows = trace.grid;
        map.cols = trace.grid;
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoURow {
    pub image_id: usize,
    pub best_t: f64,
    pub iou: f64,
}

/// Feature-map and attention-map IoU per image for one stage and kind.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub stage: TracePoint,
    pub kind: MapKind,
    pub feature: Vec<IoURow>,
    pub attention: Vec<IoURow>,
}

fn mean_iou(rows: &[IoURow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.iou).sum::<f64>() / rows.len() as f64
}

impl IoUReport {
    pub fn feature_miou(&self) -> f64 {
        mean_iou(&self.feature)
    }

    pub fn attention_miou(&self) -> f64 {
        mean_iou(&self.attention)
    }

    fn csv(rows: &[IoURow], stage: TracePoint, kind: MapKind) -> String {
        let mut s = String::from("image_id,stage,kind,best_t,iou\n");
        for r in rows {
            writeln!(s, "{},{stage},{kind},{:.1},{:.6}", r.image_id, r.best_t, r.iou).expect("string write");
        }
        s
    }

    /// Feature-map rows, one per image.
    pub fn feature_csv(&self) -> String {
        Self::csv(&self.feature, self.stage, self.kind)
    }

    /// Attention-map rows, one per image.
    pub fn attention_csv(&self) -> String {
        Self::csv(&self.attention, self.stage, MapKind::Attention)
    }
}

/// Builds the report from precomputed traces; `masks[i]` belongs to `traces[i]`.
pub fn miou_from_traces<T: Real>(
    traces: &[TraceBundle<T>],
    masks: &[TokenMask],
    stage: TracePoint,
    kind: MapKind,
) -> Result<IoUReport> {
    if traces.len() != masks.len() {
        return Err(Error::Shape(format!("{} traces but {} masks", traces.len(), masks.len())));
    }
    let mut report = IoUReport {
        stage,
        kind,
        feature: Vec::with_capacity(traces.len()),
        attention: Vec::with_capacity(traces.len()),
    };
    for (i, (t, m)) in traces.iter().zip(masks).enumerate() {
        let (v, best_t) = best_threshold_iou(m, &feature_map(t, stage, kind)?)?;
        report.feature.push(IoURow { image_id: i, best_t, iou: v });
        let (v, best_t) = best_threshold_iou(m, &attention_map(t)?)?;
        report.attention.push(IoURow { image_id: i, best_t, iou: v });
    }
    Ok(report)
}

const TRACE_BATCH: usize = 64;

/// Traces `samples` through `model` in batches, without gradients.
pub fn trace_samples(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<TraceBundle<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(TRACE_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(model.forward_traced_batch(&stack_images(&refs, None)?)?.1);
    }
    Ok(out)
}

/// Traces `samples` and reports feature vs attention mIoU at `stage`.
pub fn miou_report(model: &Model<f32>, samples: &[Sample], stage: TracePoint, kind: MapKind) -> Result<IoUReport> {
    let c = &model.config;
    let masks = samples
        .iter()
        .map(|s| crate::data::to_token_mask(&s.mask, c.image_size, c.image_size, c.patch_size))
        .collect::<Result<Vec<_>>>()?;
    miou_from_traces(&trace_samples(model, samples)?, &masks, stage, kind)
}

/// Feature and attention mIoU for every traced stage and both feature kinds.
pub fn stage_sweep<T: Real>(traces: &[TraceBundle<T>], masks: &[TokenMask]) -> Result<Vec<IoUReport>> {
    let Some(first) = traces.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for stage in first.available() {
        for kind in [MapKind::Magnitude, MapKind::Frequency] {
            out.push(miou_from_traces(traces, masks, stage, kind)?);
        }
    }
    Ok(out)
}

/// Linear-case check of attention-weighted aggregation through the stage.
///
/// With a linear stage `L`, the CLS output obtained by first aggregating the
/// visual inputs with the CLS attention `w` (CLS key/value removed) and then
/// applying `L` must equal the `w`-weighted sum of the per-token outputs:
/// `L(Σ_v w_v z[v]) = Σ_v w_v L(z[v])`. The left side is evaluated in f64 from
/// the stage map; the right side from the traced stage outputs. Returns the
/// largest elementwise residual.
pub fn amplification_identity_check<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<f64> {
    let Stage::Linearized { map } = &model.stage else {
        return Err(Error::Contract("amplification identity needs a linearized model".into()));
    };
    let (_, trace) = no_grad(|| model.forward_traced(image))?;
    let z_in = trace.z_encoder.to_f64_vec();
    let z_out = trace
        .z_l2
        .as_ref()
        .ok_or_else(|| Error::Contract("linearized model did not trace its stage output".into()))?
        .to_f64_vec();
    let e = model.config.encoder_dim;
    let w: Vec<f64> = trace.w.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let l = map.to_f64_vec();

    let mut agg = vec![0.0; e];
    let mut rhs = vec![0.0; e];
    for (v, &wv) in w.iter().enumerate() {
        let row = (v + 1) * e; // skip CLS
        for j in 0..e {
            agg[j] += wv * z_in[row + j];
            rhs[j] += wv * z_out[row + j];
        }
    }
    let lhs: Vec<f64> = (0..e).map(|j| (0..e).map(|i| agg[i] * l[i * e + j]).sum()).collect();
    Ok(lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Writes `map` as a binary 8-bit PGM (P5), value `v` → `round(255·v)`.
pub fn write_pgm(map: &ActivationMap, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    bytes.extend(map.values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    write_atomic(path, &bytes)
}

/// Width, height and payload of a P5 file written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format(format!("{}: not a P5 graymap", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let (w, h): (usize, usize) = (fields[1].parse().map_err(|_| bad())?, fields[2].parse().map_err(|_| bad())?);
    let payload = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
    if payload.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, payload))
}

/// Writes the report's feature and attention tables and, for each traced
/// image, its feature and attention maps as `{prefix}_{id}.pgm`.
pub fn export_maps<T: Real>(report: &IoUReport, traces: &[TraceBundle<T>], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("miou.csv"), report.feature_csv().as_bytes())?;
    write_atomic(&dir.join("attention_miou.csv"), report.attention_csv().as_bytes())?;
    let maps = dir.join("maps");
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    for (i, t) in traces.iter().enumerate() {
        write_pgm(
            &feature_map(t, report.stage, report.kind)?,
            &maps.join(format!("{}_{}_{i:05}.pgm", report.stage, report.kind)),
        )?;
        write_pgm(&attention_map(t)?, &maps.join(format!("attention_{i:05}.pgm")))?;
    }
    Ok(())
}
