//! Window partitioning, cyclic shifting and shift masks on a voxel grid of
//! `P` HEALPix pixels (nested order) by `D` vertical levels.
//!
//! A window is `window_hp` consecutive nested pixels by `window_d` consecutive
//! levels. Inside a window, voxel `(pixel, level)` sits at position
//! `pixel * window_d + level`; windows are ordered pixel-block major.
//!
//! The shift rolls the ring-ordered pixel axis by `-window_hp / 2` and the
//! level axis by `-window_d / 2`. Voxels that crossed the polar seam (ring
//! positions `P - shift_hp ..`) or the vertical seam (levels `D - shift_d ..`)
//! carry a wrap flag; attention is only allowed between voxels with equal
//! flags.

use std::sync::Arc;

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hpx::{GridSpec, RingTable};

/// Additive logit for forbidden attention pairs.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct WindowLayout {
    patch_spec: GridSpec,
    depth: usize,
    window_hp: usize,
    window_d: usize,
    shift_hp: usize,
    shift_d: usize,
    table: Arc<RingTable>,
    /// Windowed row -> voxel row of the unshifted tensor.
    perm_forward: Arc<Vec<usize>>,
    /// Voxel row -> windowed row; inverse of `perm_forward`.
    perm_inverse: Arc<Vec<usize>>,
    /// Region id (bit 1: polar wrap, bit 0: vertical wrap) per windowed row.
    regions: Vec<u8>,
}

impl WindowLayout {
    /// Builds a layout; `shifted` selects the shifted phase.
    pub fn new(patch_spec: GridSpec, depth: usize, window_hp: usize, window_d: usize, shifted: bool) -> Result<Self> {
        Self::with_table(Arc::new(RingTable::new(patch_spec)), depth, window_hp, window_d, shifted)
    }

    /// Like [`new`](Self::new), reusing a precomputed ring table.
    pub fn with_table(table: Arc<RingTable>, depth: usize, window_hp: usize, window_d: usize, shifted: bool) -> Result<Self> {
        let patch_spec = table.spec();
        let n_pix = patch_spec.n_pix() as usize;
        if window_hp == 0 || !window_hp.is_power_of_two() || window_hp.trailing_zeros() % 2 != 0 {
            return Err(Error::Config(format!("window_hp = {window_hp} is not a power of 4")));
        }
        if n_pix % window_hp != 0 {
            return Err(Error::Config(format!(
                "window_hp = {window_hp} does not tile {n_pix} pixels at n_side {}",
                patch_spec.n_side()
            )));
        }
        if window_d == 0 || depth % window_d != 0 {
            return Err(Error::Config(format!("window_d = {window_d} does not divide depth {depth}")));
        }
        let (shift_hp, shift_d) = if shifted { (window_hp / 2, window_d / 2) } else { (0, 0) };

        let n2r = table.nest_to_ring();
        let r2n = table.ring_to_nest();
        let n_vox = n_pix * depth;
        let w = window_hp * window_d;
        let d_blocks = depth / window_d;
        let mut perm_forward = Vec::with_capacity(n_vox);
        let mut regions = Vec::with_capacity(n_vox);
        for bh in 0..n_pix / window_hp {
            for bd in 0..d_blocks {
                for v in 0..w {
                    let p = bh * window_hp + v / window_d;
                    let l = bd * window_d + v % window_d;
                    let r = n2r[p] as usize;
                    let src_p = r2n[(r + shift_hp) % n_pix] as usize;
                    let src_l = (l + shift_d) % depth;
                    perm_forward.push(src_p * depth + src_l);
                    let wrap_hp = r >= n_pix - shift_hp;
                    let wrap_d = l >= depth - shift_d;
                    regions.push(((wrap_hp as u8) << 1) | wrap_d as u8);
                }
            }
        }
        let mut perm_inverse = vec![0; n_vox];
        for (i, &src) in perm_forward.iter().enumerate() {
            perm_inverse[src] = i;
        }
        Ok(Self {
            patch_spec,
            depth,
            window_hp,
            window_d,
            shift_hp,
            shift_d,
            table,
            perm_forward: Arc::new(perm_forward),
            perm_inverse: Arc::new(perm_inverse),
            regions,
        })
    }

    pub fn patch_spec(&self) -> GridSpec {
        self.patch_spec
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn window_hp(&self) -> usize {
        self.window_hp
    }

    pub fn window_d(&self) -> usize {
        self.window_d
    }

    pub fn shift_hp(&self) -> usize {
        self.shift_hp
    }

    pub fn shift_d(&self) -> usize {
        self.shift_d
    }

    pub fn is_shifted(&self) -> bool {
        self.shift_hp > 0 || self.shift_d > 0
    }

    pub fn ring_table(&self) -> &Arc<RingTable> {
        &self.table
    }

    pub fn n_pix(&self) -> usize {
        self.patch_spec.n_pix() as usize
    }

    /// Voxels per window, `window_hp * window_d`.
    pub fn window_len(&self) -> usize {
        self.window_hp * self.window_d
    }

    pub fn n_windows(&self) -> usize {
        self.n_pix() / self.window_hp * (self.depth / self.window_d)
    }

    pub fn perm_forward(&self) -> &Arc<Vec<usize>> {
        &self.perm_forward
    }

    pub fn perm_inverse(&self) -> &Arc<Vec<usize>> {
        &self.perm_inverse
    }

    /// Region id of every voxel of window `w`, in window order.
    pub fn window_regions(&self, w: usize) -> &[u8] {
        let n = self.window_len();
        &self.regions[w * n..(w + 1) * n]
    }

    pub fn region_count(&self, w: usize) -> usize {
        let mut seen = [false; 4];
        for &r in self.window_regions(w) {
            seen[r as usize] = true;
        }
        seen.iter().filter(|s| **s).count()
    }

    /// `true` where attention from voxel `i` to `j` of window `w` is forbidden.
    pub fn masked(&self, w: usize, i: usize, j: usize) -> bool {
        let r = self.window_regions(w);
        r[i] != r[j]
    }

    /// The mask of window `w` as rows of 0 (allowed) / 1 (masked).
    pub fn mask_grid(&self, w: usize) -> Vec<Vec<u8>> {
        let r = self.window_regions(w);
        r.iter().map(|a| r.iter().map(|b| (a != b) as u8).collect()).collect()
    }

    /// Additive masks of shape `(n_windows, 1, W, W)`, or `None` for an
    /// unshifted layout.
    pub fn mask_tensor<T: Element>(&self) -> Option<Tensor<T>> {
        if !self.is_shifted() {
            return None;
        }
        let n = self.window_len();
        let large = T::from_f64(MASK_VALUE);
        let mut data = Vec::with_capacity(self.n_windows() * n * n);
        for w in 0..self.n_windows() {
            let r = self.window_regions(w);
            for a in r {
                data.extend(r.iter().map(|b| if a == b { T::ZERO } else { large }));
            }
        }
        Some(Tensor::new(vec![self.n_windows(), 1, n, n], data).expect("mask extents"))
    }

    fn check_voxels<T: Element>(&self, x: &Var<T>, context: &str) -> Result<usize> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.n_pix() || s[1] != self.depth {
            return Err(Error::dim(
                context,
                format!("expected ({}, {}, C), got {s:?}", self.n_pix(), self.depth),
            ));
        }
        Ok(s[2])
    }

    /// `(P, D, C)` in nested order -> `(n_windows, W, C)`, applying the shift
    /// of this layout first.
    pub fn partition<T: Element>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let c = self.check_voxels(x, "window partition")?;
        let rows = tape.reshape(x, &[self.n_pix() * self.depth, c])?;
        let w = tape.gather_rows(&rows, &self.perm_forward)?;
        tape.reshape(&w, &[self.n_windows(), self.window_len(), c])
    }

    /// Inverse of [`partition`](Self::partition), undoing the shift.
    pub fn merge<T: Element>(&self, tape: &Tape<T>, windows: &Var<T>) -> Result<Var<T>> {
        let s = windows.shape();
        if s.len() != 3 || s[0] != self.n_windows() || s[1] != self.window_len() {
            return Err(Error::dim(
                "window merge",
                format!("expected ({}, {}, C), got {s:?}", self.n_windows(), self.window_len()),
            ));
        }
        let c = s[2];
        let rows = tape.reshape(windows, &[self.n_windows() * self.window_len(), c])?;
        let v = tape.gather_rows(&rows, &self.perm_inverse)?;
        tape.reshape(&v, &[self.n_pix(), self.depth, c])
    }

    /// Applies the shift of this layout without partitioning.
    pub fn shift<T: Element>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        self.roll(tape, x, -(self.shift_hp as i64), -(self.shift_d as i64))
    }

    pub fn unshift<T: Element>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        self.roll(tape, x, self.shift_hp as i64, self.shift_d as i64)
    }

    /// Cyclic roll of the ring-ordered pixel axis by `s` (`y[r] = x[r - s]`).
    pub fn roll_ring<T: Element>(&self, tape: &Tape<T>, x: &Var<T>, s: i64) -> Result<Var<T>> {
        self.roll(tape, x, s, 0)
    }

    fn roll<T: Element>(&self, tape: &Tape<T>, x: &Var<T>, s_hp: i64, s_d: i64) -> Result<Var<T>> {
        let c = self.check_voxels(x, "roll")?;
        let n_pix = self.n_pix() as i64;
        let depth = self.depth as i64;
        let n2r = self.table.nest_to_ring();
        let r2n = self.table.ring_to_nest();
        let mut idx = Vec::with_capacity(self.n_pix() * self.depth);
        for p in 0..self.n_pix() {
            let src_p = r2n[(n2r[p] as i64 - s_hp).rem_euclid(n_pix) as usize] as usize;
            for l in 0..depth {
                let src_l = (l - s_d).rem_euclid(depth) as usize;
                idx.push(src_p * self.depth + src_l);
            }
        }
        let rows = tape.reshape(x, &[self.n_pix() * self.depth, c])?;
        let y = tape.gather_rows(&rows, &Arc::new(idx))?;
        tape.reshape(&y, &[self.n_pix(), self.depth, c])
    }
}
