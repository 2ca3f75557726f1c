//! Position-aware attention analysis and the CIoU layout loss.
//!
//! Two routes share the CIoU core. The hard route reproduces the
//! monitoring pipeline — head-averaged map → min-max rescale →
//! threshold → Gaussian blur → tight supra-threshold extent — and is
//! used for layer selection and inspection. The soft route turns each
//! token's attention mass into a differentiable box (weighted mean ±
//! 1.5·std per axis) and injects the analytic CIoU gradient through a
//! proxy term, because the hard pipeline is not differentiable.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::glyph::BBox;
use crate::grid::Grid;

/// Thresholds and kernel settings for the hard pipeline.
#[derive(Debug, Clone, Copy)]
pub struct LayoutParams {
    /// Threshold on the rescaled [0,255] map.
    pub threshold: f64,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    /// Threshold on the blurred map for box extraction.
    pub box_threshold: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            threshold: 125.0,
            blur_kernel: 5,
            blur_sigma: 1.0,
            box_threshold: 127.0,
        }
    }
}

/// Half-width multiplier for soft boxes (mean ± 1.5·std).
pub const BOX_STD_WIDEN: f64 = 1.5;

/// Ceiling of the CIoU loss (1 − IoU ≤ 2 is impossible; each of the
/// three terms is bounded by 1), used when every pair in a batch lacks
/// a derived box.
pub const CIOU_LOSS_CEILING: f64 = 3.0;

/// A derived box tagged with its source map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedBox {
    pub bbox: BBox,
    pub layer_id: usize,
    pub token_id: usize,
}

/// All real-token maps of one cross-attention layer, indexed by token.
#[derive(Debug, Clone)]
pub struct TokenMaps {
    pub layer_id: usize,
    pub maps: Vec<Grid>,
}

/// Row-wise `softmax(Q Kᵀ / √d_k)` on row-major slices; `q` is `n×d_k`,
/// `k` is `m×d_k`, the result is `n×m`.
pub fn attention_scores(q: &[f64], k: &[f64], n: usize, m: usize, d_k: usize) -> Result<Vec<f64>> {
    if d_k == 0 || q.len() != n * d_k || k.len() != m * d_k {
        return Err(Error::invalid(format!(
            "attention shape mismatch: q {} != {n}x{d_k} or k {} != {m}x{d_k}",
            q.len(),
            k.len()
        )));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (j, r) in row.iter_mut().enumerate() {
            let mut dot = 0.0;
            for t in 0..d_k {
                dot += q[i * d_k + t] * k[j * d_k + t];
            }
            *r = dot * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        for r in row.iter_mut() {
            *r /= sum;
        }
    }
    Ok(out)
}

/// Min-max rescales `avg_map` to [0,255] and thresholds: cells strictly
/// above `threshold` become 255, the rest 0. A constant map (max equals
/// min) binarizes to all zeros.
pub fn binarize(avg_map: &Grid, threshold: f64) -> Grid {
    let data = avg_map.data();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let mut out = Grid::zeros(avg_map.w, avg_map.h);
    if !(hi > lo) {
        return out;
    }
    let scale = 255.0 / (hi - lo);
    for (o, &v) in out.data_mut().iter_mut().zip(data) {
        let rescaled = (v as f64 - lo) * scale;
        *o = if rescaled > threshold { 255.0 } else { 0.0 };
    }
    out
}

/// Reflect-101 index mirroring (edge cell not repeated).
fn mirror(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(kernel_size: usize, sigma: f64) -> Vec<f64> {
    assert!(kernel_size % 2 == 1, "kernel size must be odd");
    let r = (kernel_size / 2) as i64;
    if sigma <= 0.0 {
        let mut k = vec![0.0; kernel_size];
        k[r as usize] = 1.0;
        return k;
    }
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with reflect-101 borders. `sigma <= 0`
/// degenerates to the identity (delta kernel).
pub fn gaussian_blur(grid: &Grid, kernel_size: usize, sigma: f64) -> Grid {
    let k = gaussian_kernel(kernel_size, sigma);
    let r = (kernel_size / 2) as i64;
    let (w, h) = (grid.w, grid.h);
    // Horizontal pass.
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let sx = mirror(x as i64 + t as i64 - r, w);
                acc += kv * grid.get(sx, y) as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = Grid::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let sy = mirror(y as i64 + t as i64 - r, h);
                acc += kv * tmp[sy * w + x];
            }
            out.set(x, y, acc as f32);
        }
    }
    out
}

/// Tight bounding box of all cells strictly above `box_threshold`,
/// mapped from cell coordinates to model-input pixel coordinates.
/// Returns `None` when no cell qualifies.
pub fn derive_box(blurred: &Grid, box_threshold: f64, model_hw: (usize, usize)) -> Option<BBox> {
    let mut cell: Option<(usize, usize, usize, usize)> = None;
    for y in 0..blurred.h {
        for x in 0..blurred.w {
            if blurred.get(x, y) as f64 > box_threshold {
                cell = Some(match cell {
                    None => (x, y, x + 1, y + 1),
                    Some((x0, y0, x1, y1)) => {
                        (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1))
                    }
                });
            }
        }
    }
    let (x0, y0, x1, y1) = cell?;
    let sx = model_hw.1 as f64 / blurred.w as f64;
    let sy = model_hw.0 as f64 / blurred.h as f64;
    BBox::new(
        (x0 as f64 * sx).floor() as i32,
        (y0 as f64 * sy).floor() as i32,
        (x1 as f64 * sx).ceil() as i32,
        (y1 as f64 * sy).ceil() as i32,
    )
    .ok()
}

/// Runs the full hard pipeline on a raw head-averaged map.
pub fn derive_box_pipeline(
    avg_map: &Grid,
    params: &LayoutParams,
    model_hw: (usize, usize),
) -> Option<BBox> {
    let bin = binarize(avg_map, params.threshold);
    let blurred = gaussian_blur(&bin, params.blur_kernel, params.blur_sigma);
    derive_box(&blurred, params.box_threshold, model_hw)
}

fn check_box(b: [f64; 4], name: &str) -> Result<()> {
    if !(b[2] > b[0]) || !(b[3] > b[1]) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Geometry(format!(
            "degenerate {name} box ({}, {}, {}, {})",
            b[0], b[1], b[2], b[3]
        )));
    }
    Ok(())
}

/// CIoU loss between a derived box and a ground-truth box:
/// `1 − (IoU − ρ²/c² − αv)` with `v = (4/π²)(atan(w_g/h_g) − atan(w_d/h_d))²`
/// and `α = v/((1−IoU)+v)` treated as a constant under differentiation.
pub fn ciou_loss_f(d: [f64; 4], g: [f64; 4]) -> Result<f64> {
    Ok(ciou_grad(d, g)?.1)
}

/// Analytic gradient of [`ciou_loss_f`] with respect to the derived
/// box coordinates, plus the loss value.
pub fn ciou_grad(d: [f64; 4], g: [f64; 4]) -> Result<([f64; 4], f64)> {
    check_box(d, "derived")?;
    check_box(g, "ground-truth")?;
    let (dx0, dy0, dx1, dy1) = (d[0], d[1], d[2], d[3]);
    let (gx0, gy0, gx1, gy1) = (g[0], g[1], g[2], g[3]);
    let (wd, hd) = (dx1 - dx0, dy1 - dy0);
    let (wg, hg) = (gx1 - gx0, gy1 - gy0);

    let ix0 = dx0.max(gx0);
    let iy0 = dy0.max(gy0);
    let ix1 = dx1.min(gx1);
    let iy1 = dy1.min(gy1);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let inter = iw * ih;
    let area_d = wd * hd;
    let area_g = wg * hg;
    let union = area_d + area_g - inter;
    let iou = inter / union;

    let dcx = (dx0 + dx1) / 2.0;
    let dcy = (dy0 + dy1) / 2.0;
    let gcx = (gx0 + gx1) / 2.0;
    let gcy = (gy0 + gy1) / 2.0;
    let rho2 = (dcx - gcx).powi(2) + (dcy - gcy).powi(2);

    let cw = dx1.max(gx1) - dx0.min(gx0);
    let ch = dy1.max(gy1) - dy0.min(gy0);
    let c2 = cw * cw + ch * ch;

    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let delta = (wg / hg).atan() - (wd / hd).atan();
    let v = four_over_pi2 * delta * delta;
    let denom = (1.0 - iou) + v;
    let alpha = if denom > 0.0 { v / denom } else { 0.0 };

    let loss = 1.0 - iou + rho2 / c2 + alpha * v;

    // ∂I/∂coordinate: indicator of which box contributes each
    // intersection edge; zero when there is no overlap.
    let overlap = iw > 0.0 && ih > 0.0;
    let di = if overlap {
        [
            if dx0 > gx0 { -ih } else { 0.0 },
            if dy0 > gy0 { -iw } else { 0.0 },
            if dx1 < gx1 { ih } else { 0.0 },
            if dy1 < gy1 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let da = [-hd, -wd, hd, wd];
    // ∂IoU = (∂I·U − I·∂U)/U², ∂U = ∂A_d − ∂I.
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let du = da[i] - di[i];
        let diou = (di[i] * union - inter * du) / (union * union);
        grad[i] -= diou;
    }
    // ∂(ρ²/c²) = (∂ρ²·c² − ρ²·∂c²)/c⁴.
    let drho = [dcx - gcx, dcy - gcy, dcx - gcx, dcy - gcy];
    let dc2 = [
        if dx0 < gx0 { -2.0 * cw } else { 0.0 },
        if dy0 < gy0 { -2.0 * ch } else { 0.0 },
        if dx1 > gx1 { 2.0 * cw } else { 0.0 },
        if dy1 > gy1 { 2.0 * ch } else { 0.0 },
    ];
    for i in 0..4 {
        grad[i] += (drho[i] * c2 - rho2 * dc2[i]) / (c2 * c2);
    }
    // ∂v through the derived box's aspect term; α held constant.
    let dv_dwd = -2.0 * four_over_pi2 * delta * hd / (wd * wd + hd * hd);
    let dv_dhd = 2.0 * four_over_pi2 * delta * wd / (wd * wd + hd * hd);
    grad[0] += alpha * dv_dwd * -1.0;
    grad[1] += alpha * dv_dhd * -1.0;
    grad[2] += alpha * dv_dwd;
    grad[3] += alpha * dv_dhd;

    Ok((grad, loss))
}

/// Integer-box convenience wrapper over [`ciou_loss_f`].
pub fn ciou_loss(box_d: &BBox, box_g: &BBox) -> Result<f64> {
    ciou_loss_f(box_d.as_f64(), box_g.as_f64())
}

/// Differentiable box from an attention map: per-axis attention-mass
/// weighted mean ± [`BOX_STD_WIDEN`]·std, in model-pixel coordinates.
/// `map` is a nonnegative `[h, w]` tensor; gradient flows into it.
pub fn soft_box_tensor(map: &Tensor, model_hw: (usize, usize)) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    let dev = map.device();
    let sx = model_hw.1 as f64 / w as f64;
    let sy = model_hw.0 as f64 / h as f64;
    // Cell-center coordinates in pixels.
    let xs: Vec<f32> = (0..w).map(|x| ((x as f64 + 0.5) * sx) as f32).collect();
    let ys: Vec<f32> = (0..h).map(|y| ((y as f64 + 0.5) * sy) as f32).collect();
    let xs = Tensor::from_vec(xs, &[1, w], dev)?.broadcast_as((h, w))?;
    let ys = Tensor::from_vec(ys, &[h, 1], dev)?.broadcast_as((h, w))?;
    let mass = map.sum_all()?.clamp(1e-12, f64::INFINITY)?;
    let mean_x = map.mul(&xs)?.sum_all()?.div(&mass)?;
    let mean_y = map.mul(&ys)?.sum_all()?.div(&mass)?;
    // Guard variance away from zero so the box never degenerates.
    let min_var = (0.25 * sx * sx).min(0.25 * sy * sy);
    let var_x = map
        .mul(&xs.broadcast_sub(&mean_x)?.sqr()?)?
        .sum_all()?
        .div(&mass)?
        .clamp(min_var, f64::INFINITY)?;
    let var_y = map
        .mul(&ys.broadcast_sub(&mean_y)?.sqr()?)?
        .sum_all()?
        .div(&mass)?
        .clamp(min_var, f64::INFINITY)?;
    let half_x = (var_x.sqrt()? * BOX_STD_WIDEN)?;
    let half_y = (var_y.sqrt()? * BOX_STD_WIDEN)?;
    let x0 = mean_x.sub(&half_x)?;
    let y0 = mean_y.sub(&half_y)?;
    let x1 = mean_x.add(&half_x)?;
    let y1 = mean_y.add(&half_y)?;
    Ok(Tensor::stack(&[x0, y0, x1, y1], 0)?)
}

/// CIoU between a soft box tensor and a ground-truth box as a scalar
/// whose value is the loss and whose gradient (w.r.t. the soft box and
/// everything upstream of it) is the analytic CIoU gradient.
pub fn ciou_loss_term(soft_box: &Tensor, gt: &BBox) -> Result<(Tensor, f64)> {
    let vals: Vec<f32> = soft_box.detach().to_vec1()?;
    let d = [
        vals[0] as f64,
        vals[1] as f64,
        vals[2] as f64,
        vals[3] as f64,
    ];
    let (grad, loss) = ciou_grad(d, gt.as_f64())?;
    let g = Tensor::from_vec(
        grad.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
        &[4],
        soft_box.device(),
    )?;
    let proxy = soft_box.mul(&g)?.sum_all()?;
    let term = proxy.sub(&proxy.detach())?.affine(1.0, loss)?;
    Ok((term, loss))
}

/// IoU between the supra-threshold cell region of a binarized map and a
/// ground-truth box, both measured in model-pixel area.
pub fn region_box_iou(binary: &Grid, gt: &BBox, model_hw: (usize, usize)) -> f64 {
    let sx = model_hw.1 as f64 / binary.w as f64;
    let sy = model_hw.0 as f64 / binary.h as f64;
    let cell_area = sx * sy;
    let mut region_area = 0.0;
    let mut inter = 0.0;
    let g = [
        gt.x0 as f64,
        gt.y0 as f64,
        gt.x1 as f64,
        gt.y1 as f64,
    ];
    for y in 0..binary.h {
        for x in 0..binary.w {
            if binary.get(x, y) > 0.0 {
                region_area += cell_area;
                let cx0 = x as f64 * sx;
                let cy0 = y as f64 * sy;
                let ox = (cx0 + sx).min(g[2]) - cx0.max(g[0]);
                let oy = (cy0 + sy).min(g[3]) - cy0.max(g[1]);
                if ox > 0.0 && oy > 0.0 {
                    inter += ox * oy;
                }
            }
        }
    }
    let union = region_area + gt.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean region IoU of one layer's token maps against ground-truth
/// boxes (the layer-selection score).
pub fn layer_score(
    maps: &TokenMaps,
    gt_boxes: &[BBox],
    params: &LayoutParams,
    model_hw: (usize, usize),
) -> f64 {
    let n = maps.maps.len().min(gt_boxes.len());
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        let bin = binarize(&maps.maps[i], params.threshold);
        sum += region_box_iou(&bin, &gt_boxes[i], model_hw);
    }
    sum / n as f64
}

/// Ranks layers by mean region IoU against ground-truth character
/// boxes and returns the ids of the best `k`, ties broken toward lower
/// layer ids. Returns all layers when fewer than `k` exist.
pub fn select_layout_layers(
    layers: &[TokenMaps],
    gt_boxes: &[BBox],
    k: usize,
    params: &LayoutParams,
    model_hw: (usize, usize),
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = layers
        .iter()
        .map(|l| (layer_score(l, gt_boxes, params, model_hw), l.layer_id))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

/// Hard-pipeline layout loss: mean CIoU over (selected layer × real
/// token) pairs; pairs without a derived box contribute the maximum
/// observed pair loss (or [`CIOU_LOSS_CEILING`] when none derived).
pub fn layout_loss_hard(
    selected: &[TokenMaps],
    gt_boxes: &[BBox],
    params: &LayoutParams,
    model_hw: (usize, usize),
) -> f64 {
    let mut losses = Vec::new();
    let mut missing = 0usize;
    for layer in selected {
        for (map, gt) in layer.maps.iter().zip(gt_boxes) {
            match derive_box_pipeline(map, params, model_hw) {
                Some(b) => match ciou_loss(&b, gt) {
                    Ok(l) => losses.push(l),
                    Err(_) => missing += 1,
                },
                None => missing += 1,
            }
        }
    }
    let total_pairs = losses.len() + missing;
    if total_pairs == 0 {
        return 0.0;
    }
    let max_observed = losses
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let penalty = if losses.is_empty() {
        CIOU_LOSS_CEILING
    } else {
        max_observed
    };
    let sum: f64 = losses.iter().sum::<f64>() + penalty * missing as f64;
    sum / total_pairs as f64
}
