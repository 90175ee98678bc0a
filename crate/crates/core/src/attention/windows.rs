//! Window partitioning for local attention.
//!
//! Maps are reflect-padded up to a multiple of the window size. Query windows tile the
//! padded map; outreach windows are larger `M_o×M_o` squares concentric with each query
//! window, sampled with the dilation stride. All partitions are gathers with precomputed
//! indices, so their gradients are scatter-adds.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{index_tensor, reflect_index};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowGeometry {
    /// Query window side `M`.
    pub window: usize,
    /// Overlap ratio `γ ∈ [0,1)`.
    pub overlap: f64,
    /// Sampling stride inside the outreach window.
    pub dilation: usize,
}

impl Default for WindowGeometry {
    fn default() -> Self {
        Self {
            window: 8,
            overlap: 0.5,
            dilation: 2,
        }
    }
}

impl WindowGeometry {
    pub fn new(window: usize, overlap: f64, dilation: usize) -> Result<Self> {
        let g = Self {
            window,
            overlap,
            dilation,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.window >= 1, || "window size must be >= 1".into())?;
        ensure((0.0..1.0).contains(&self.overlap), || {
            format!("overlap ratio {} outside [0,1)", self.overlap)
        })?;
        ensure(self.dilation >= 1, || "dilation must be >= 1".into())
    }

    /// `M_o = floor((1+γ)·M)`.
    pub fn outreach_size(&self) -> usize {
        ((1.0 + self.overlap) * self.window as f64 + 1e-9).floor() as usize
    }

    /// Offset of the outreach window's first row relative to its query window.
    pub fn margin(&self) -> usize {
        (self.outreach_size() - self.window) / 2
    }

    pub fn outreach_side_tokens(&self) -> usize {
        self.outreach_size().div_ceil(self.dilation)
    }

    pub fn outreach_tokens(&self) -> usize {
        self.outreach_side_tokens().pow(2)
    }

    /// Side of the relative-offset table: all offsets from a query token to a key token.
    pub fn bias_side(&self) -> usize {
        self.window + self.outreach_size() - 1
    }

    /// For every (query token, key token) pair of a window, the flat index into a
    /// `bias_side²` relative-offset table.
    pub fn relative_index(&self) -> Vec<u32> {
        let m = self.window as isize;
        let side = self.bias_side() as isize;
        let margin = self.margin() as isize;
        let s = self.outreach_side_tokens() as isize;
        let d = self.dilation as isize;
        let mut idx = Vec::with_capacity((m * m * s * s) as usize);
        for qy in 0..m {
            for qx in 0..m {
                for ky in 0..s {
                    for kx in 0..s {
                        let oy = ky * d - margin - qy + margin + m - 1;
                        let ox = kx * d - margin - qx + margin + m - 1;
                        idx.push((oy * side + ox) as u32);
                    }
                }
            }
        }
        idx
    }
}

/// Window tiling of an `H×W` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize) -> Self {
        Self {
            height,
            width,
            window,
        }
    }

    pub fn padded(&self) -> (usize, usize) {
        (
            self.height.div_ceil(self.window) * self.window,
            self.width.div_ceil(self.window) * self.window,
        )
    }

    pub fn grid(&self) -> (usize, usize) {
        let (ph, pw) = self.padded();
        (ph / self.window, pw / self.window)
    }

    pub fn num_windows(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    fn source(&self, y: isize, x: isize) -> u32 {
        (reflect_index(y, self.height) * self.width + reflect_index(x, self.width)) as u32
    }

    /// Source pixel of each query token, window-major.
    pub fn query_index(&self) -> Vec<u32> {
        let (rows, cols) = self.grid();
        let m = self.window;
        let mut idx = Vec::with_capacity(rows * cols * m * m);
        for r in 0..rows {
            for c in 0..cols {
                for ty in 0..m {
                    for tx in 0..m {
                        idx.push(self.source((r * m + ty) as isize, (c * m + tx) as isize));
                    }
                }
            }
        }
        idx
    }

    /// Token position of each original pixel, row-major.
    pub fn merge_index(&self) -> Vec<u32> {
        let (_, cols) = self.grid();
        let m = self.window;
        let mut idx = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let win = (y / m) * cols + x / m;
                idx.push((win * m * m + (y % m) * m + x % m) as u32);
            }
        }
        idx
    }

    /// Source pixel of each outreach token, window-major.
    pub fn outreach_index(&self, g: &WindowGeometry) -> Vec<u32> {
        let (rows, cols) = self.grid();
        let m = self.window as isize;
        let margin = g.margin() as isize;
        let s = g.outreach_side_tokens() as isize;
        let d = g.dilation as isize;
        let mut idx = Vec::with_capacity(rows * cols * (s * s) as usize);
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                for ky in 0..s {
                    for kx in 0..s {
                        idx.push(self.source(r * m - margin + ky * d, c * m - margin + kx * d));
                    }
                }
            }
        }
        idx
    }
}

/// Precomputed index tensors for one `(H, W, geometry)` combination.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub layout: WindowLayout,
    pub query: Tensor,
    pub merge: Tensor,
    pub outreach: Tensor,
    pub relative: Tensor,
    pub outreach_tokens: usize,
}

impl WindowPlan {
    pub fn new(height: usize, width: usize, g: &WindowGeometry, dev: &candle_core::Device) -> Result<Self> {
        let layout = WindowLayout::new(height, width, g.window);
        Ok(Self {
            query: index_tensor(&layout.query_index(), dev)?,
            merge: index_tensor(&layout.merge_index(), dev)?,
            outreach: index_tensor(&layout.outreach_index(g), dev)?,
            relative: index_tensor(&g.relative_index(), dev)?,
            outreach_tokens: g.outreach_tokens(),
            layout,
        })
    }

    /// `B×H×W×C` → `(B·nW)×M²×C`.
    pub fn partition(&self, x: &Tensor) -> Result<Tensor> {
        gather_tokens(x, &self.query, self.layout.num_windows(), self.layout.tokens_per_window())
    }

    /// `B×H×W×C` → `(B·nW)×T×C` outreach tokens.
    pub fn partition_outreach(&self, x: &Tensor) -> Result<Tensor> {
        gather_tokens(x, &self.outreach, self.layout.num_windows(), self.outreach_tokens)
    }

    /// `(B·nW)×M²×C` → `B×H×W×C`, dropping padded tokens.
    pub fn merge(&self, windows: &Tensor) -> Result<Tensor> {
        let (bn, t, c) = windows.dims3()?;
        let nw = self.layout.num_windows();
        let b = bn / nw;
        let flat = windows.reshape((b, nw * t, c))?;
        Ok(flat
            .index_select(&self.merge, 1)?
            .reshape((b, self.layout.height, self.layout.width, c))?)
    }
}

/// Plans keyed by spatial size, built on first use.
#[derive(Debug)]
pub struct PlanCache {
    geometry: WindowGeometry,
    plans: Mutex<HashMap<(usize, usize), Arc<WindowPlan>>>,
}

impl PlanCache {
    pub fn new(geometry: WindowGeometry) -> Self {
        Self {
            geometry,
            plans: Mutex::new(HashMap::new()),
        }
    }

    pub fn geometry(&self) -> &WindowGeometry {
        &self.geometry
    }

    pub fn get(&self, height: usize, width: usize, dev: &candle_core::Device) -> Result<Arc<WindowPlan>> {
        let mut plans = self.plans.lock().unwrap();
        if let Some(p) = plans.get(&(height, width)) {
            return Ok(p.clone());
        }
        let p = Arc::new(WindowPlan::new(height, width, &self.geometry, dev)?);
        plans.insert((height, width), p.clone());
        Ok(p)
    }
}

fn gather_tokens(x: &Tensor, idx: &Tensor, windows: usize, tokens: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let flat = x.reshape((b, h * w, c))?;
    Ok(flat.index_select(idx, 1)?.reshape((b * windows, tokens, c))?)
}

/// Splits a `B×H×W×C` map into `M×M` windows (reflect-padding as needed).
pub fn partition_windows(x: &Tensor, window: usize) -> Result<(Tensor, WindowPlan)> {
    let (_, h, w, _) = x.dims4()?;
    let g = WindowGeometry::new(window, 0.0, 1)?;
    let plan = WindowPlan::new(h, w, &g, x.device())?;
    Ok((plan.partition(x)?, plan))
}

pub fn merge_windows(windows: &Tensor, plan: &WindowPlan) -> Result<Tensor> {
    plan.merge(windows)
}

/// Outreach key/value windows for a `B×H×W×C` map.
pub fn partition_outreach(x: &Tensor, g: &WindowGeometry) -> Result<Tensor> {
    g.validate()?;
    let (_, h, w, _) = x.dims4()?;
    WindowPlan::new(h, w, g, x.device())?.partition_outreach(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn ramp(b: usize, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::arange(0u32, (b * h * w * c) as u32, &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap()
            .reshape((b, h, w, c))
            .unwrap()
    }

    fn to_vec(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn window_counts() {
        let (win, _) = partition_windows(&ramp(1, 64, 64, 2), 8).unwrap();
        assert_eq!(win.dims(), &[64, 64, 2]);
        let x = ramp(1, 65, 64, 2);
        let (win, plan) = partition_windows(&x, 8).unwrap();
        assert_eq!(plan.layout.padded(), (72, 64));
        assert_eq!(win.dims()[0], 72);
        assert_eq!(to_vec(&merge_windows(&win, &plan).unwrap()), to_vec(&x));
    }

    #[test]
    fn merge_inverts_partition_exactly() {
        let x = ramp(2, 16, 24, 3);
        let (win, plan) = partition_windows(&x, 8).unwrap();
        assert_eq!(to_vec(&plan.merge(&win).unwrap()), to_vec(&x));
    }

    #[test]
    fn outreach_token_counts() {
        let g = WindowGeometry::new(8, 0.5, 1).unwrap();
        assert_eq!(g.outreach_size(), 12);
        assert_eq!(g.outreach_tokens(), 144);
        let g2 = WindowGeometry::new(8, 0.5, 2).unwrap();
        assert_eq!(g2.outreach_tokens(), 36);
        let k = partition_outreach(&ramp(1, 16, 16, 1), &g2).unwrap();
        assert_eq!(k.dims(), &[4, 36, 1]);
    }

    #[test]
    fn degenerate_outreach_equals_regular_windows() {
        let x = ramp(1, 12, 20, 2);
        let g = WindowGeometry::new(4, 0.0, 1).unwrap();
        let (win, _) = partition_windows(&x, 4).unwrap();
        assert_eq!(to_vec(&partition_outreach(&x, &g).unwrap()), to_vec(&win));
    }

    #[test]
    fn outreach_is_concentric() {
        // 8x8 map of pixel ids, one channel; second window's outreach starts one row and
        // column above/left of its query window.
        let x = ramp(1, 8, 8, 1);
        let g = WindowGeometry::new(4, 0.5, 1).unwrap();
        let k = partition_outreach(&x, &g).unwrap();
        let v = to_vec(&k);
        // window (1,1) is index 3; its first outreach token sits at (3,3)
        let t = g.outreach_tokens();
        assert_eq!(v[3 * t], (3 * 8 + 3) as f32);
        // window (0,0) reflects: first token (-1,-1) -> (1,1)
        assert_eq!(v[0], (8 + 1) as f32);
    }

    #[test]
    fn relative_index_in_range() {
        for (m, ov, d) in [(4, 0.0, 1), (4, 0.5, 2), (8, 0.5, 2), (5, 0.5, 1)] {
            let g = WindowGeometry::new(m, ov, d).unwrap();
            let side = g.bias_side() as u32;
            assert!(g.relative_index().iter().all(|i| *i < side * side));
            assert_eq!(g.relative_index().len(), m * m * g.outreach_tokens());
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(WindowGeometry::new(0, 0.0, 1).is_err());
        assert!(WindowGeometry::new(4, 1.0, 1).is_err());
        assert!(WindowGeometry::new(4, 0.5, 0).is_err());
    }
}
