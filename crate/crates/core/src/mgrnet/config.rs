use std::ops::Range;

use crate::error::{Error, Result};

/// How the transformed low-level maps are combined with a branch map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// `eps(F2) * eps(F3) * F51`, elementwise.
    Multiply,
    /// Channel concatenation followed by a 1x1 projection back to C channels.
    Concat,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Multiply => "multiply",
            FusionMode::Concat => "concat",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(FusionMode::Multiply),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of Conv1..Conv4; the last one is the branch width C, kept by
    /// Conv51G / Conv51R.
    pub conv_channels: [usize; 4],
    /// Reduced attention width V.
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub region_width: usize,
    pub region_width_overlap: usize,
    pub region_height: usize,
    pub region_height_overlap: usize,
    pub fusion: FusionMode,
}

impl Default for NetConfig {
    /// Full-size network: 128x200 input, C=256, 16x25 branch maps, V=32, 1024-d
    /// embeddings.
    fn default() -> Self {
        NetConfig {
            input_height: 128,
            input_width: 200,
            conv_channels: [32, 64, 128, 256],
            attention_dim: 32,
            embedding_dim: 1024,
            region_width: 13,
            region_width_overlap: 7,
            region_height: 8,
            region_height_overlap: 4,
            fusion: FusionMode::Multiply,
        }
    }
}

impl NetConfig {
    /// 64x100 input, C=64, V=8, 128-d embeddings; branch maps are 8x13.
    pub fn desk() -> Self {
        NetConfig {
            input_height: 64,
            input_width: 100,
            conv_channels: [8, 16, 32, 64],
            attention_dim: 8,
            embedding_dim: 128,
            region_width: 7,
            region_width_overlap: 4,
            region_height: 4,
            region_height_overlap: 2,
            fusion: FusionMode::Multiply,
        }
    }

    /// Desk input size (64x100, 8x13 branch maps) with tiny widths: C=16, V=4,
    /// 32-d embeddings.
    pub fn compact() -> Self {
        NetConfig { conv_channels: [4, 8, 8, 16], attention_dim: 4, embedding_dim: 32, ..NetConfig::desk() }
    }

    /// Smallest useful network: 32x56 input, C=8, 4x7 branch maps, V=2, 16-d embeddings.
    pub fn tiny() -> Self {
        NetConfig {
            input_height: 32,
            input_width: 56,
            conv_channels: [2, 4, 4, 8],
            attention_dim: 2,
            embedding_dim: 16,
            region_width: 3,
            region_width_overlap: 1,
            region_height: 2,
            region_height_overlap: 1,
            fusion: FusionMode::Multiply,
        }
    }

    /// Branch channel count C.
    pub fn channels(&self) -> usize {
        self.conv_channels[3]
    }

    /// Spatial size of F2 and F3 (two 2x2 ceil poolings).
    pub fn mid_dims(&self) -> (usize, usize) {
        (self.input_height.div_ceil(4), self.input_width.div_ceil(4))
    }

    /// Spatial size H x W of F4 and every branch map.
    pub fn deep_dims(&self) -> (usize, usize) {
        let (h, w) = self.mid_dims();
        (h.div_ceil(2), w.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_height < 8 || self.input_width < 8 {
            return fail(format!("input {}x{} is below 8x8", self.input_height, self.input_width));
        }
        if self.conv_channels.contains(&0) || self.embedding_dim == 0 || self.attention_dim == 0 {
            return fail("channel counts and dimensions must be positive".into());
        }
        let c = self.channels();
        if self.attention_dim >= c {
            return fail(format!("attention dim V={} must be smaller than C={c}", self.attention_dim));
        }
        let (h, w) = self.deep_dims();
        check_axis("width", w, self.region_width, self.region_width_overlap)?;
        check_axis("height", h, self.region_height, self.region_height_overlap)?;
        Ok(())
    }

    /// The six region windows `(rows, cols)` over an `H x W` branch map: three
    /// column windows left to right, then three row windows top to bottom.
    pub fn region_windows(&self) -> Result<Vec<(Range<usize>, Range<usize>)>> {
        self.validate()?;
        let (h, w) = self.deep_dims();
        let cols = axis_windows(self.region_width, self.region_width_overlap);
        let rows = axis_windows(self.region_height, self.region_height_overlap);
        let mut out: Vec<_> = cols.into_iter().map(|c| (0..h, c)).collect();
        out.extend(rows.into_iter().map(|r| (r, 0..w)));
        Ok(out)
    }
}

fn check_axis(axis: &str, extent: usize, size: usize, overlap: usize) -> Result<()> {
    if size == 0 || size >= extent || overlap >= size {
        return Err(Error::Config(format!(
            "region {axis} {size} with overlap {overlap} does not fit a map {axis} of {extent}"
        )));
    }
    let stride = size - overlap;
    if extent - size != 2 * stride {
        return Err(Error::Config(format!(
            "three regions of {axis} {size} with stride {stride} do not tile {extent} exactly"
        )));
    }
    Ok(())
}

fn axis_windows(size: usize, overlap: usize) -> Vec<Range<usize>> {
    let stride = size - overlap;
    (0..3).map(|i| i * stride..i * stride + size).collect()
}
