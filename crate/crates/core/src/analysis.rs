//! Post-training analysis: pruning, displacement histograms, effective
//! receptive fields and the theoretical speed-up.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::dau::{DauConfig, DauParams};
use crate::error::{Error, Result};
use crate::network::{Layer, Network, Phase};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::fmt_sig;

/// `Kw * Kh / (4 K)`: dense kernel taps per output over the four bilinear
/// taps of each unit.
pub fn speedup_estimate(kw: f64, kh: f64, units: f64) -> f64 {
    kw * kh / (4.0 * units)
}

/// Reference value of the relative pruning threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneScope {
    /// Largest `|w|` of the unit's own layer.
    #[default]
    Layer,
    /// Largest `|w|` over all DAU layers.
    Global,
}

impl FromStr for PruneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(PruneScope::Layer),
            "global" => Ok(PruneScope::Global),
            other => Err(Error::Config(format!("unknown prune scope `{other}` (layer, global)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrune {
    pub layer: usize,
    pub units_before: usize,
    pub units_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub threshold: f64,
    pub scope: PruneScope,
    pub layers: Vec<LayerPrune>,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
}

impl PruneReport {
    pub fn units_before(&self) -> usize {
        self.layers.iter().map(|l| l.units_before).sum()
    }

    pub fn units_after(&self) -> usize {
        self.layers.iter().map(|l| l.units_after).sum()
    }

    pub fn removed_fraction(&self) -> f64 {
        removed(self.units_before(), self.units_after())
    }

    /// One row per DAU layer and a `total` row.
    pub fn csv(&self) -> String {
        let acc = |a: Option<f64>| a.map(fmt_sig).unwrap_or_default();
        let mut s = String::from("threshold,layer,units_before,units_after,removed_pct,accuracy_before,accuracy_after\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},,",
                fmt_sig(self.threshold),
                l.layer,
                l.units_before,
                l.units_after,
                fmt_sig(100.0 * removed(l.units_before, l.units_after))
            );
        }
        let _ = writeln!(
            s,
            "{},total,{},{},{},{},{}",
            fmt_sig(self.threshold),
            self.units_before(),
            self.units_after(),
            fmt_sig(100.0 * self.removed_fraction()),
            acc(self.accuracy_before),
            acc(self.accuracy_after)
        );
        s
    }
}

fn removed(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        1.0 - after as f64 / before as f64
    }
}

fn max_active_weight<T: Scalar>(p: &DauParams<T>) -> f64 {
    p.weight
        .iter()
        .zip(&p.active)
        .filter(|(_, &a)| a)
        .fold(0.0, |m, (w, _)| m.max(w.f64().abs()))
}

/// Deactivates every active unit with `|w| < threshold * max|w|` and zeroes
/// its weight. Remaining weights are not rescaled.
pub fn prune<T: Scalar>(net: &mut Network<T>, threshold: f64, scope: PruneScope) -> Result<PruneReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("prune threshold {threshold} is outside [0, 1]")));
    }
    let global = net
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Dau { params, .. } => Some(max_active_weight(params)),
            _ => None,
        })
        .fold(0.0, f64::max);
    let mut layers = Vec::new();
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        let Layer::Dau { params, .. } = layer else { continue };
        let reference = match scope {
            PruneScope::Layer => max_active_weight(params),
            PruneScope::Global => global,
        };
        let cut = threshold * reference;
        let units_before = params.active.iter().filter(|&&a| a).count();
        for (w, a) in params.weight.iter_mut().zip(params.active.iter_mut()) {
            if *a && w.f64().abs() < cut {
                *a = false;
                *w = T::zero();
            }
        }
        layers.push(LayerPrune {
            layer: i,
            units_before,
            units_after: params.active.iter().filter(|&&a| a).count(),
        });
    }
    Ok(PruneReport {
        threshold,
        scope,
        layers,
        accuracy_before: None,
        accuracy_after: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistogramKind {
    /// Distance `||mu||` from the kernel centre.
    Radial,
    /// `(mu_y, mu_x)`.
    Planar,
}

/// `|w|`-weighted distribution of unit displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementHistogram {
    pub kind: HistogramKind,
    /// Units with `|w|` below this fraction of the layer maximum are left out.
    pub min_relative_weight: f64,
    /// Radial bin edges, or the edges along both axes for planar histograms.
    pub edges: Vec<f64>,
    /// Radial: one mass per bin. Planar: row-major `[y bin][x bin]`.
    pub mass: Vec<f64>,
}

/// Bin width of the displacement histograms in pixels.
pub const HISTOGRAM_BIN: f64 = 0.25;

fn edges(lo: f64, hi: f64, bin: f64) -> Vec<f64> {
    let n = ((hi - lo) / bin).ceil().max(1.0) as usize;
    (0..=n).map(|i| lo + i as f64 * bin).collect()
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    let i = ((v - edges[0]) / (edges[1] - edges[0])).floor();
    (i.max(0.0) as usize).min(bins - 1)
}

/// Histogram of the active units of one DAU layer with
/// `|w| >= min_relative_weight * max|w|` (0 keeps every unit).
pub fn displacement_histogram<T: Scalar>(
    params: &DauParams<T>,
    cfg: &DauConfig,
    min_relative_weight: f64,
    kind: HistogramKind,
) -> Result<DisplacementHistogram> {
    let cut = min_relative_weight * max_active_weight(params);
    let selected: Vec<(f64, f64, f64)> = (0..params.units())
        .filter(|&u| params.active[u] && params.weight[u].f64().abs() >= cut)
        .map(|u| {
            let (my, mx) = params.mu_at(u);
            (params.weight[u].f64().abs(), my.f64(), mx.f64())
        })
        .collect();
    let total: f64 = selected.iter().map(|s| s.0).sum();
    if selected.is_empty() || !(total > 0.0) {
        return Err(Error::Analysis(format!(
            "no unit with non-zero weight has |w| >= {min_relative_weight} max|w|"
        )));
    }
    let dmax = cfg.max_displacement;
    let (edges, mut mass) = match kind {
        HistogramKind::Radial => {
            let e = edges(0.0, std::f64::consts::SQRT_2 * dmax, HISTOGRAM_BIN);
            let m = vec![0.0; e.len() - 1];
            (e, m)
        }
        HistogramKind::Planar => {
            let e = edges(-dmax, dmax, HISTOGRAM_BIN);
            let m = vec![0.0; (e.len() - 1) * (e.len() - 1)];
            (e, m)
        }
    };
    for &(w, my, mx) in &selected {
        let i = match kind {
            HistogramKind::Radial => bin_of(&edges, my.hypot(mx)),
            HistogramKind::Planar => bin_of(&edges, my) * (edges.len() - 1) + bin_of(&edges, mx),
        };
        mass[i] += w / total;
    }
    Ok(DisplacementHistogram {
        kind,
        min_relative_weight,
        edges,
        mass,
    })
}

impl DisplacementHistogram {
    /// Radial mass in bins starting at or beyond `radius`.
    pub fn mass_beyond(&self, radius: f64) -> f64 {
        assert_eq!(self.kind, HistogramKind::Radial, "mass_beyond needs a radial histogram");
        self.edges
            .windows(2)
            .zip(&self.mass)
            .filter(|(e, _)| e[0] >= radius - 1e-12)
            .map(|(_, m)| m)
            .sum()
    }

    pub fn csv(&self) -> String {
        let mut s = String::new();
        match self.kind {
            HistogramKind::Radial => {
                s.push_str("bin_lo,bin_hi,mass\n");
                for (e, m) in self.edges.windows(2).zip(&self.mass) {
                    let _ = writeln!(s, "{},{},{}", fmt_sig(e[0]), fmt_sig(e[1]), fmt_sig(*m));
                }
            }
            HistogramKind::Planar => {
                s.push_str("y_lo,y_hi,x_lo,x_hi,mass\n");
                let n = self.edges.len() - 1;
                for (i, m) in self.mass.iter().enumerate() {
                    let (y, x) = (i / n, i % n);
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        fmt_sig(self.edges[y]),
                        fmt_sig(self.edges[y + 1]),
                        fmt_sig(self.edges[x]),
                        fmt_sig(self.edges[x + 1]),
                        fmt_sig(*m)
                    );
                }
            }
        }
        s
    }
}

/// Cumulative-influence fractions at which contours are extracted.
pub const ERF_LEVELS: [f64; 3] = [0.25, 0.75, 0.999];

/// Smallest set of cells holding a fraction of the receptive-field mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub fraction: f64,
    /// Row-major membership over the grid.
    pub cells: Vec<bool>,
    /// Smallest cell mass inside the set.
    pub cutoff: f64,
}

impl Contour {
    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Effective receptive field of one output pixel, on the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative, sums to 1.
    pub grid: Vec<f64>,
    pub contours: Vec<Contour>,
}

/// For every output channel of layer `layer`, backpropagates a unit gradient
/// at the centre pixel to the input and accumulates the absolute input
/// gradient over channels and probe items. Batch norm runs in eval mode.
pub fn compute_erf<T: Scalar>(net: &Network<T>, layer: usize, probe: &Tensor<T>) -> Result<ErfMap> {
    let count = net.layers().len();
    if layer >= count {
        return Err(Error::Contract(format!("layer {layer} does not exist ({count} layers)")));
    }
    if matches!(net.layers()[layer], Layer::Dense { .. }) {
        return Err(Error::Contract(format!("layer {layer} (dense) has no spatial output")));
    }
    let mut probe_net = net.clone();
    let (out, caches) = probe_net.forward_to(probe, layer + 1, Phase::Eval)?;
    let os = out.shape();
    let (cy, cx) = (os.h / 2, os.w / 2);
    let is = probe.shape();
    let mut acc = vec![0.0f64; is.h * is.w];
    for c in 0..os.c {
        let mut g = Tensor::<T>::zeros(os);
        for n in 0..os.n {
            g.set(n, c, cy, cx, T::one());
        }
        let (gx, _) = probe_net.backward(&caches, g)?;
        for n in 0..is.n {
            for s in 0..is.c {
                for (a, v) in acc.iter_mut().zip(gx.plane(n, s)) {
                    *a += v.f64().abs();
                }
            }
        }
    }
    let total: f64 = acc.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Analysis(format!("layer {layer} output does not depend on the input")));
    }
    let grid: Vec<f64> = acc.iter().map(|a| a / total).collect();
    let contours = ERF_LEVELS.iter().map(|&f| contour(&grid, f)).collect();
    Ok(ErfMap {
        layer,
        height: is.h,
        width: is.w,
        grid,
        contours,
    })
}

/// All-ones probe of one item for `net`.
pub fn ones_probe<T: Scalar>(net: &Network<T>) -> Tensor<T> {
    let (c, h, w) = net.spec().input;
    Tensor::full(Shape::new(1, c, h, w), T::one())
}

/// Cells sorted by descending mass (ties by position) up to the shortest
/// prefix whose mass reaches `fraction`.
pub fn contour(grid: &[f64], fraction: f64) -> Contour {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]).then(a.cmp(&b)));
    let total: f64 = grid.iter().sum();
    let target = fraction * total;
    let mut cells = vec![false; grid.len()];
    let mut sum = 0.0;
    let mut cutoff = 0.0;
    for &i in &order {
        cells[i] = true;
        sum += grid[i];
        cutoff = grid[i];
        if sum >= target * (1.0 - 1e-12) {
            break;
        }
    }
    Contour { fraction, cells, cutoff }
}

impl ErfMap {
    pub fn grid_csv(&self) -> String {
        let mut s = String::new();
        for row in self.grid.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|&v| fmt_sig(v)).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn contours_csv(&self) -> String {
        let mut s = String::from("fraction,cells,cutoff\n");
        for c in &self.contours {
            let _ = writeln!(s, "{},{},{}", fmt_sig(c.fraction), c.area(), fmt_sig(c.cutoff));
        }
        s
    }

    /// Grey-scale grid with each contour drawn along its cell-set boundary.
    pub fn svg(&self) -> String {
        const CELL: usize = 12;
        const COLOURS: [&str; 3] = ["#d62728", "#ff7f0e", "#1f77b4"];
        let (w, h) = (self.width, self.height);
        let peak = self.grid.iter().copied().fold(0.0, f64::max);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
            w * CELL,
            h * CELL,
            w * CELL,
            h * CELL
        );
        for (i, &v) in self.grid.iter().enumerate() {
            let g = 255 - (255.0 * v / peak).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({g},{g},{g})\"/>",
                (i % w) * CELL,
                (i / w) * CELL
            );
        }
        for (c, colour) in self.contours.iter().zip(COLOURS) {
            let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && c.cells[y as usize * w + x as usize];
            let mut d = String::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !inside(y, x) {
                        continue;
                    }
                    let (x0, y0) = (x as usize * CELL, y as usize * CELL);
                    let (x1, y1) = (x0 + CELL, y0 + CELL);
                    if !inside(y - 1, x) {
                        let _ = write!(d, "M{x0} {y0}H{x1}");
                    }
                    if !inside(y + 1, x) {
                        let _ = write!(d, "M{x0} {y1}H{x1}");
                    }
                    if !inside(y, x - 1) {
                        let _ = write!(d, "M{x0} {y0}V{y1}");
                    }
                    if !inside(y, x + 1) {
                        let _ = write!(d, "M{x1} {y0}V{y1}");
                    }
                }
            }
            let _ = writeln!(
                s,
                "<path d=\"{d}\" stroke=\"{colour}\" stroke-width=\"2\" fill=\"none\"><title>{}</title></path>",
                fmt_sig(c.fraction)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
